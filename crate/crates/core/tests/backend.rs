use initno::attention::{Grid, TokenIndexSet};
use initno::backend::{
    denoise_step, embed_tokens, full_denoise, guided_noise, one_hot_embeddings, DenoiserBackend, PromptSpec,
    SyntheticBackend, SyntheticHead, SyntheticParams, ToyConfig, ToyDenoiser,
};
use initno::noise::{sample_standard, Latent, LatentShape, LossWeights};
use initno::pipeline::Scorer;
use initno::tensor::Matrix;
use initno::InitnoError;

fn prompt(embeddings: Matrix, targets: Vec<usize>) -> PromptSpec {
    PromptSpec::new(embeddings, TokenIndexSet::new(targets, 0).unwrap()).unwrap()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[test]
fn synthetic_cross_attention_matches_hand_computation() {
    let shape = LatentShape::new(1, 2, 2).unwrap();
    let grid = Grid::new(2, 2);
    let backend = SyntheticBackend::new(SyntheticParams {
        latent_shape: shape,
        grid,
        cross_heads: vec![SyntheticHead::new(
            Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
            Matrix::from_vec(3, 1, vec![0.0, 1.0, -0.5]).unwrap(),
        )],
        self_heads: vec![SyntheticHead::new(Matrix::filled(1, 1, 1.0), Matrix::filled(1, 1, 1.0))],
    })
    .unwrap();
    let latent = Latent::new(shape, vec![0.1, -0.4, 0.7, 1.2]).unwrap();
    let p = prompt(one_hot_embeddings(3), vec![1, 2]);
    let step = denoise_step(&backend, &latent, &p, 50).unwrap();
    let cross = &step.cross_stack.entries[0].map;
    for (cell, &x) in latent.data.iter().enumerate() {
        let expected = softmax(&[0.0, 2.0 * x, -x]);
        for (c, e) in expected.iter().enumerate() {
            assert!((cross.get(cell, c) - e).abs() < 1e-12);
        }
    }
    let selfm = &step.self_stack.entries[0].map;
    for (cell, &x) in latent.data.iter().enumerate() {
        let logits: Vec<f64> = latent.data.iter().map(|y| x * y).collect();
        let expected = softmax(&logits);
        for (c, e) in expected.iter().enumerate() {
            assert!((selfm.get(cell, c) - e).abs() < 1e-12);
        }
    }
    assert_eq!(step.predicted_noise, latent);
}

#[test]
fn zero_projections_give_uniform_maps() {
    let shape = LatentShape::new(2, 8, 8).unwrap();
    let grid = Grid::new(4, 4);
    let backend = SyntheticBackend::uniform(shape, grid, 5).unwrap();
    let latent = sample_standard(shape, 3).eps;
    let p = prompt(embed_tokens(&[0, 1, 2, 3], 5), vec![1, 2]);
    let step = denoise_step(&backend, &latent, &p, 50).unwrap();
    assert!(step.cross_stack.entries[0]
        .map
        .as_slice()
        .iter()
        .all(|v| (v - 0.25).abs() < 1e-15));
    assert!(step.self_stack.entries[0]
        .map
        .as_slice()
        .iter()
        .all(|v| (v - 1.0 / 16.0).abs() < 1e-15));
}

#[test]
fn larger_query_scale_sharpens_attention() {
    let shape = LatentShape::new(1, 4, 4).unwrap();
    let grid = Grid::new(4, 4);
    let latent = sample_standard(shape, 9).eps;
    let p = prompt(one_hot_embeddings(3), vec![1, 2]);
    let peak = |scale: f64| {
        let backend = SyntheticBackend::new(SyntheticParams {
            latent_shape: shape,
            grid,
            cross_heads: vec![SyntheticHead::new(
                Matrix::filled(1, 1, scale),
                Matrix::from_vec(3, 1, vec![0.0, 1.0, -1.0]).unwrap(),
            )],
            self_heads: vec![SyntheticHead::new(Matrix::zeros(1, 1), Matrix::zeros(1, 1))],
        })
        .unwrap();
        let step = denoise_step(&backend, &latent, &p, 50).unwrap();
        step.cross_stack.entries[0]
            .map
            .as_slice()
            .iter()
            .cloned()
            .fold(0.0, f64::max)
    };
    assert!(peak(4.0) > peak(1.0));
}

#[test]
fn toy_denoiser_is_deterministic_and_input_dependent() {
    let toy = ToyDenoiser::new(ToyConfig::default()).unwrap();
    let shape = ToyConfig::default().latent_shape;
    let p = prompt(embed_tokens(&[0, 11, 12, 13], 32), vec![1, 3]);
    let a = denoise_step(&toy, &Latent::zeros(shape), &p, 50).unwrap();
    let b = denoise_step(&toy, &Latent::zeros(shape), &p, 50).unwrap();
    assert_eq!(a, b);
    let c = denoise_step(&toy, &Latent::filled(shape, 1.0), &p, 50).unwrap();
    assert_ne!(a.predicted_noise, c.predicted_noise);
    assert_ne!(a.cross_stack, c.cross_stack);
    assert_eq!(a.cross_stack.len(), 4);
    assert_eq!(a.self_stack.len(), 4);
    a.cross_stack.check_normalized().unwrap();
    a.self_stack.check_normalized().unwrap();
    let again = ToyDenoiser::new(ToyConfig::default()).unwrap();
    assert_eq!(denoise_step(&again, &Latent::zeros(shape), &p, 50).unwrap(), a);
}

#[test]
fn toy_attention_gradient_is_nonzero_and_matches_finite_differences() {
    let toy = ToyDenoiser::new(ToyConfig::default()).unwrap();
    let p = prompt(embed_tokens(&[0, 11, 12, 13], 32), vec![1, 3]);
    let scorer = Scorer::new(toy.grid(), &p, Default::default(), Default::default()).unwrap();
    let noise = sample_standard(ToyConfig::default().latent_shape, 21).eps;
    let w = LossWeights {
        kl: 0.0,
        ..Default::default()
    };
    let (_, g) = scorer.evaluate_with_gradient(&toy, &p, &noise, w).unwrap();
    assert!(g.iter().any(|v| *v != 0.0));
    let loss = |z: &Latent| {
        let s = scorer.evaluate(&toy, &p, z).unwrap();
        s.cross_score + s.self_score
    };
    let top = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
    let h = 1e-4;
    let mut plus = noise.clone();
    plus.data[top] += h;
    let mut minus = noise.clone();
    minus.data[top] -= h;
    let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
    assert!(
        (fd - g[top]).abs() <= 1e-3 * g[top].abs().max(1e-6),
        "fd {fd} vs {}",
        g[top]
    );
}

#[test]
fn toy_full_denoise_runs_and_shrinks_the_noise() {
    let toy = ToyDenoiser::new(ToyConfig::default()).unwrap();
    let p = prompt(embed_tokens(&[0, 11, 12, 13], 32), vec![1, 3])
        .with_guidance(7.5, 10)
        .unwrap();
    let z = sample_standard(ToyConfig::default().latent_shape, 4).eps;
    let x = full_denoise(&toy, &z, &p).unwrap();
    assert!(x.data.iter().all(|v| v.is_finite()));
    assert!(x.norm() < z.norm());
    let g = guided_noise(&toy, &z, &p, 10).unwrap();
    assert_eq!(g.shape, z.shape);
}

#[test]
fn synthetic_backend_is_scoring_only() {
    let shape = LatentShape::new(1, 4, 4).unwrap();
    let backend = SyntheticBackend::uniform(shape, Grid::new(4, 4), 3).unwrap();
    let p = prompt(one_hot_embeddings(3), vec![1]);
    let err = full_denoise(&backend, &Latent::zeros(shape), &p).unwrap_err();
    assert!(matches!(err, InitnoError::ScoringOnlyBackend));
}

#[test]
fn timestep_and_shape_errors() {
    let toy = ToyDenoiser::new(ToyConfig::default()).unwrap();
    let p = prompt(embed_tokens(&[0, 11, 12], 32), vec![1]);
    let z = Latent::zeros(ToyConfig::default().latent_shape);
    assert!(matches!(
        denoise_step(&toy, &z, &p, 51),
        Err(InitnoError::UnsupportedTimestep { .. })
    ));
    assert!(denoise_step(&toy, &z, &p, 0).is_err());
    let wrong = Latent::zeros(LatentShape::new(1, 16, 16).unwrap());
    assert!(denoise_step(&toy, &wrong, &p, 50).is_err());
    let narrow = prompt(embed_tokens(&[0, 11, 12], 8), vec![1]);
    assert!(denoise_step(&toy, &z, &narrow, 50).is_err());
}
