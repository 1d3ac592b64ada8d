use initno::attention::{
    aggregate_cross, aggregate_self, gaussian_smooth, reweight_tokens, AggregatedCrossAttentionMap,
    AggregatedSelfAttentionMap, Grid, SmoothingSettings, TokenIndexSet,
};
use initno::backend::{
    denoise_step, embed_tokens, one_hot_embeddings, DenoiserBackend, PromptSpec, SyntheticBackend, ToyConfig,
    ToyDenoiser,
};
use initno::noise::{reparameterize, sample_standard, LatentShape};
use initno::pipeline::{
    evaluate_noise, initno, partition_experiment, OptimizationConfig, PartitionOptions, RoundStatus, Scorer,
    TerminalStatus,
};
use initno::scoring::{cross_attention_response_score, self_attention_conflict_score, Thresholds};
use initno::seed::partition_seed;
use initno::tensor::Matrix;

fn toy() -> ToyDenoiser {
    ToyDenoiser::new(ToyConfig::default()).unwrap()
}

fn toy_prompt() -> PromptSpec {
    PromptSpec::new(
        embed_tokens(&[0, 11, 12, 13], 32),
        TokenIndexSet::new(vec![1, 3], 0).unwrap(),
    )
    .unwrap()
}

#[test]
fn uniform_cross_attention_scores_one_minus_inverse_k() {
    let grid = Grid::new(4, 4);
    for k in 1..=6usize {
        let map =
            AggregatedCrossAttentionMap::new(grid, Matrix::filled(16, k, 1.0 / k as f64), (0..k).collect()).unwrap();
        let tokens = TokenIndexSet::new((0..k).collect(), k + 10).unwrap();
        let s = cross_attention_response_score(&map, &tokens).unwrap();
        assert!((s - (1.0 - 1.0 / k as f64)).abs() < 1e-15);
    }
}

#[test]
fn identical_self_maps_conflict_at_one_half() {
    let grid = Grid::new(3, 3);
    let cross = Matrix::from_fn(9, 3, |r, c| match (r, c) {
        (0, 1) | (8, 2) => 0.8,
        (_, 0) => 0.0,
        _ => 0.1,
    });
    let cross = AggregatedCrossAttentionMap::new(grid, cross, vec![0, 1, 2]).unwrap();
    let selfm = AggregatedSelfAttentionMap::new(grid, Matrix::filled(9, 9, 1.0 / 9.0)).unwrap();
    let tokens = TokenIndexSet::new(vec![1, 2], 0).unwrap();
    assert_eq!(self_attention_conflict_score(&selfm, &cross, &tokens).unwrap(), 0.5);
    let single = TokenIndexSet::new(vec![1], 0).unwrap();
    assert_eq!(self_attention_conflict_score(&selfm, &cross, &single).unwrap(), 0.0);
}

#[test]
fn taped_scoring_matches_the_plain_reference_path() {
    let backend = toy();
    let prompt = toy_prompt();
    let settings = SmoothingSettings::default();
    let grid = backend.grid();
    let scorer = Scorer::new(grid, &prompt, settings, Thresholds::default()).unwrap();
    for seed in 0..4 {
        let z = sample_standard(backend.latent_shape(), seed).eps;
        let maps = scorer.evaluate_maps(&backend, &prompt, &z).unwrap();

        let step = denoise_step(&backend, &z, &prompt, prompt.num_denoise_steps).unwrap();
        let cross = aggregate_cross(&step.cross_stack).unwrap();
        let cross = reweight_tokens(&cross, &prompt.target_tokens, settings.temperature).unwrap();
        let smoothed = gaussian_smooth(&cross.values, grid, settings.kernel_size, settings.sigma).unwrap();
        let cross = AggregatedCrossAttentionMap::new(grid, smoothed, cross.token_labels.clone()).unwrap();
        let selfm = aggregate_self(&step.self_stack).unwrap();
        let smoothed = gaussian_smooth(&selfm.values, grid, settings.kernel_size, settings.sigma).unwrap();
        let selfm = AggregatedSelfAttentionMap::new(grid, smoothed).unwrap();

        assert!(maps.cross.values.max_abs_diff(&cross.values) < 1e-12);
        assert!(maps.self_attn.values.max_abs_diff(&selfm.values) < 1e-12);
        let c = cross_attention_response_score(&cross, &prompt.target_tokens).unwrap();
        let s = self_attention_conflict_score(&selfm, &cross, &prompt.target_tokens).unwrap();
        assert!((maps.scores.cross_score - c).abs() < 1e-12);
        assert!((maps.scores.self_score - s).abs() < 1e-12);
    }
}

#[test]
fn toy_runs_are_deterministic() {
    let backend = toy();
    let prompt = toy_prompt();
    let cfg = OptimizationConfig {
        seed: 5,
        tau_c: 0.1,
        max_rounds: 2,
        max_steps: 15,
        ..Default::default()
    };
    let a = initno(&backend, &prompt, &cfg).unwrap();
    let b = initno(&backend, &prompt, &cfg).unwrap();
    assert_eq!(a.noise, b.noise);
    assert_eq!(a.distribution, b.distribution);
    assert_eq!(a.trace.rounds, b.trace.rounds);
}

#[test]
fn always_valid_backend_returns_the_sampled_noise() {
    let shape = LatentShape::new(1, 8, 8).unwrap();
    let backend = SyntheticBackend::always_valid(shape, Grid::new(8, 8), 4, &[1, 3]).unwrap();
    let prompt = PromptSpec::new(one_hot_embeddings(4), TokenIndexSet::new(vec![1, 3], 0).unwrap()).unwrap();
    for seed in 0..5 {
        let cfg = OptimizationConfig {
            seed,
            ..Default::default()
        };
        let r = initno(&backend, &prompt, &cfg).unwrap();
        assert_eq!(r.trace.status, TerminalStatus::Valid);
        assert_eq!(r.trace.total_updates(), 0);
        assert_eq!(r.noise, r.base.eps);
        assert!(r.trace.final_scores.valid);
    }
}

#[test]
fn never_valid_backend_exhausts_every_round() {
    let shape = LatentShape::new(1, 8, 8).unwrap();
    let backend = SyntheticBackend::never_valid(2, shape, Grid::new(8, 8), 6, 0.8).unwrap();
    let prompt = PromptSpec::new(
        embed_tokens(&[0, 4, 5, 6], 6),
        TokenIndexSet::new(vec![1, 2], 0).unwrap(),
    )
    .unwrap();
    let cfg = OptimizationConfig {
        max_rounds: 3,
        max_steps: 7,
        ..Default::default()
    };
    let r = initno(&backend, &prompt, &cfg).unwrap();
    assert_eq!(r.trace.status, TerminalStatus::PoolFallback);
    assert_eq!(r.pool.len(), 3);
    assert!(r
        .trace
        .rounds
        .iter()
        .all(|t| t.status == RoundStatus::Exhausted && t.updates == 7));
    let best = r
        .pool
        .entries
        .iter()
        .min_by(|a, b| a.scores.total().total_cmp(&b.scores.total()))
        .unwrap();
    assert_eq!(r.noise, best.noise);
    assert_eq!(r.trace.selected_round, best.round);
}

#[test]
fn a_valid_return_passes_a_fresh_evaluation() {
    let backend = toy();
    let prompt = toy_prompt();
    for seed in 0..10 {
        let cfg = OptimizationConfig {
            seed: 900 + seed,
            ..Default::default()
        };
        let r = initno(&backend, &prompt, &cfg).unwrap();
        if r.trace.status == TerminalStatus::Valid {
            let fresh = evaluate_noise(&backend, &prompt, &r.noise, &cfg).unwrap();
            assert!(fresh.valid);
            assert_eq!(fresh.cross_score, r.trace.final_scores.cross_score);
            assert_eq!(r.noise, reparameterize(&r.distribution, &r.base).unwrap());
        }
    }
}

#[test]
fn optimization_mostly_lowers_the_score_sum() {
    let backend = toy();
    let prompt = toy_prompt();
    let mut lowered = 0;
    let mut rounds = 0;
    for seed in 0..20 {
        let cfg = OptimizationConfig {
            seed: 40 + seed,
            tau_c: 0.05,
            tau_s: 0.05,
            max_rounds: 1,
            max_steps: 10,
            ..Default::default()
        };
        let r = initno(&backend, &prompt, &cfg).unwrap();
        let steps = &r.trace.rounds[0].steps;
        if steps.len() >= 2 {
            rounds += 1;
            if steps.last().unwrap().total() < steps[0].total() {
                lowered += 1;
            }
        }
    }
    assert!(rounds > 0);
    assert!(lowered * 10 >= rounds * 9, "{lowered} of {rounds}");
}

#[test]
fn tighter_thresholds_never_accept_more_noises() {
    let backend = toy();
    let prompt = toy_prompt();
    let loose = OptimizationConfig::default();
    let tight = OptimizationConfig {
        tau_c: 0.1,
        tau_s: 0.2,
        ..Default::default()
    };
    for i in 0..20 {
        let z = sample_standard(backend.latent_shape(), partition_seed(7, i)).eps;
        let a = evaluate_noise(&backend, &prompt, &z, &loose).unwrap();
        let b = evaluate_noise(&backend, &prompt, &z, &tight).unwrap();
        assert!(!b.valid || a.valid);
    }
}

#[test]
fn vacuous_thresholds_in_scoring_only_partitions() {
    let backend = toy();
    let prompt = toy_prompt();
    let opts = PartitionOptions {
        n_seeds: 8,
        run_initno: false,
        workers: Some(2),
    };
    let mut cfg = OptimizationConfig {
        tau_c: 1.0,
        tau_s: 1.0,
        ..Default::default()
    };
    let all = partition_experiment(&backend, &prompt, &cfg, opts).unwrap();
    assert_eq!(all.raw_valid_fraction, 1.0);
    cfg.tau_c = 0.0;
    cfg.tau_s = 0.0;
    let none = partition_experiment(&backend, &prompt, &cfg, opts).unwrap();
    assert_eq!(none.raw_valid_fraction, 0.0);
    assert_eq!(none.records.len(), 8);
    assert!(initno(&backend, &prompt, &cfg).is_err());
}

#[test]
fn partition_with_initno_pairs_seeds() {
    let backend = toy();
    let prompt = toy_prompt();
    let cfg = OptimizationConfig::default();
    let report = partition_experiment(
        &backend,
        &prompt,
        &cfg,
        PartitionOptions {
            n_seeds: 6,
            run_initno: true,
            workers: None,
        },
    )
    .unwrap();
    assert!(report.optimized_valid_fraction.unwrap() >= report.raw_valid_fraction);
    for rec in &report.records {
        let single = OptimizationConfig { seed: rec.seed, ..cfg };
        let r = initno(&backend, &prompt, &single).unwrap();
        assert_eq!(r.trace.rounds[0].steps[0].cross_score, rec.raw.cross_score);
        let opt = rec.optimized.as_ref().unwrap();
        assert_eq!(opt.scores.cross_score, r.trace.final_scores.cross_score);
    }
}
