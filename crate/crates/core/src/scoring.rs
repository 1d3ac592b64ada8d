//! Cross-attention response score, self-attention conflict score and the
//! validity test that splits initial noises into valid and invalid ones.

use serde::{Deserialize, Serialize};

use crate::attention::{AggregatedCrossAttentionMap, AggregatedSelfAttentionMap, TokenIndexSet};
use crate::error::{arg_err, shape_err, InitnoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_c: f64,
    pub tau_s: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { tau_c: 0.2, tau_s: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub cross_score: f64,
    pub self_score: f64,
    pub valid: bool,
    pub thresholds: Thresholds,
}

impl ScorePair {
    /// `S_cross + S_self`, the quantity minimized over the noise pool.
    pub fn total(&self) -> f64 {
        self.cross_score + self.self_score
    }
}

/// `1 - min_{target} max_{x,y} A[x, y, target]`.
pub fn cross_attention_response_score(map: &AggregatedCrossAttentionMap, tokens: &TokenIndexSet) -> Result<f64> {
    if tokens.is_empty() {
        return Err(InitnoError::NoTargetTokens);
    }
    let mut weakest = f64::INFINITY;
    for &t in tokens.indices() {
        let peak = map.channel(t)?.into_iter().fold(f64::NEG_INFINITY, f64::max);
        weakest = weakest.min(peak);
    }
    Ok(1.0 - weakest)
}

/// Grid coordinates `(x, y)` of a token's maximal cross attention; ties go
/// to the first cell in row-major order.
pub fn argmax_coordinates(map: &AggregatedCrossAttentionMap, token: usize) -> Result<(usize, usize)> {
    let channel = map.channel(token)?;
    let mut best = 0;
    for (i, &v) in channel.iter().enumerate() {
        if v > channel[best] {
            best = i;
        }
    }
    Ok(map.grid.coords(best))
}

/// Soft overlap `sum min(a, b) / sum (a + b)` of two non-negative maps.
pub fn pairwise_conflict(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err("pairwise conflict: map lengths differ"));
    }
    let (overlap, mass) = a
        .iter()
        .zip(b)
        .fold((0.0, 0.0), |(o, m), (&p, &q)| (o + p.min(q), m + (p + q)));
    if mass == 0.0 {
        return Err(InitnoError::DegenerateSelfAttention);
    }
    Ok((overlap / mass).min(0.5))
}

/// Mean pairwise conflict between the self-attention maps taken at each
/// target token's cross-attention peak. Zero when there is a single target.
pub fn self_attention_conflict_score(
    self_map: &AggregatedSelfAttentionMap,
    cross_map: &AggregatedCrossAttentionMap,
    tokens: &TokenIndexSet,
) -> Result<f64> {
    if tokens.is_empty() {
        return Err(InitnoError::NoTargetTokens);
    }
    if self_map.grid != cross_map.grid {
        return Err(shape_err("self and cross maps use different grids"));
    }
    let maps = tokens
        .indices()
        .iter()
        .map(|&t| {
            let (x, y) = argmax_coordinates(cross_map, t)?;
            Ok(self_map.map_at(x, y))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            total += pairwise_conflict(maps[i], maps[j])?;
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

/// Strict comparison on both scores.
pub fn evaluate_validity(cross_score: f64, self_score: f64, tau_c: f64, tau_s: f64) -> ScorePair {
    ScorePair {
        cross_score,
        self_score,
        valid: cross_score < tau_c && self_score < tau_s,
        thresholds: Thresholds { tau_c, tau_s },
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_c", self.tau_c), ("tau_s", self.tau_s)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(arg_err(format!("threshold out of range: {name} = {v}")));
            }
        }
        Ok(())
    }

    /// Closed-interval check for scoring-only use, where 0 and 1 make the
    /// test unsatisfiable or vacuous.
    pub fn validate_closed(&self) -> Result<()> {
        for (name, v) in [("tau_c", self.tau_c), ("tau_s", self.tau_s)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(arg_err(format!("threshold out of range: {name} = {v}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Grid;
    use crate::tensor::Matrix;

    fn cross(grid: Grid, channels: Vec<Vec<f64>>) -> AggregatedCrossAttentionMap {
        let n = channels.len();
        let values = Matrix::from_fn(grid.area(), n, |r, c| channels[c][r]);
        AggregatedCrossAttentionMap::new(grid, values, (1..=n).collect()).unwrap()
    }

    #[test]
    fn cross_score_examples() {
        let g = Grid::new(2, 2);
        let t = TokenIndexSet::new(vec![1, 2], 0).unwrap();
        let full = cross(g, vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]]);
        assert_eq!(cross_attention_response_score(&full, &t).unwrap(), 0.0);
        let partial = cross(g, vec![vec![0.8, 0.1, 0.0, 0.0], vec![0.2, 0.6, 0.1, 0.1]]);
        let s = cross_attention_response_score(&partial, &t).unwrap();
        assert!((s - 0.4).abs() < 1e-12);
        let empty = TokenIndexSet::new(vec![], 0).unwrap();
        assert_eq!(
            cross_attention_response_score(&partial, &empty)
                .unwrap_err()
                .to_string(),
            "no target tokens"
        );
    }

    #[test]
    fn argmax_examples() {
        let g = Grid::new(8, 8);
        let mut hot = vec![0.0; 64];
        hot[g.index(3, 7)] = 1.0;
        let m = cross(g, vec![hot, vec![0.25; 64]]);
        assert_eq!(argmax_coordinates(&m, 1).unwrap(), (3, 7));
        assert_eq!(argmax_coordinates(&m, 2).unwrap(), (0, 0));
        assert!(argmax_coordinates(&m, 9).is_err());
    }

    #[test]
    fn pairwise_conflict_examples() {
        let a = [0.1, 0.4, 0.5, 0.0];
        assert!((pairwise_conflict(&a, &a).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(pairwise_conflict(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        assert!((pairwise_conflict(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            pairwise_conflict(&[0.0; 3], &[0.0; 3]).unwrap_err().to_string(),
            "degenerate self-attention maps"
        );
    }

    #[test]
    fn single_target_has_no_conflict() {
        let g = Grid::new(2, 2);
        let c = cross(g, vec![vec![0.1, 0.9, 0.3, 0.2]]);
        let s = AggregatedSelfAttentionMap::new(g, Matrix::filled(4, 4, 0.25)).unwrap();
        let t = TokenIndexSet::new(vec![1], 0).unwrap();
        assert_eq!(self_attention_conflict_score(&s, &c, &t).unwrap(), 0.0);
    }

    #[test]
    fn identical_self_maps_conflict_half() {
        let g = Grid::new(2, 2);
        let c = cross(g, vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]]);
        let s = AggregatedSelfAttentionMap::new(g, Matrix::filled(4, 4, 0.25)).unwrap();
        let t = TokenIndexSet::new(vec![1, 2], 0).unwrap();
        assert!((self_attention_conflict_score(&s, &c, &t).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn validity_examples() {
        assert!(evaluate_validity(0.1, 0.2, 0.2, 0.3).valid);
        assert!(!evaluate_validity(0.2, 0.2, 0.2, 0.3).valid);
        assert!(!evaluate_validity(0.1, 0.3, 0.2, 0.3).valid);
        assert!(Thresholds { tau_c: 1.5, tau_s: 0.3 }.validate().is_err());
        assert!(Thresholds::default().validate().is_ok());
    }
}
