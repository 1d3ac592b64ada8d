//! Aggregation, token re-weighting and spatial smoothing of attention maps.
//!
//! A raw denoising step yields one attention map per (layer, head). Scoring
//! consumes a single cross-attention map and a single self-attention map
//! per step, built as follows:
//!
//! 1. average every (layer, head) entry at the target grid resolution;
//! 2. for the cross map, drop the start-of-text channel and apply a
//!    temperature-scaled softmax over the remaining token channels at every
//!    location;
//! 3. smooth both maps spatially with a normalized Gaussian kernel.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, InitnoError, Result};
use crate::tensor::{CsrMatrix, Matrix};

/// Tolerance for the softmax row-normalization check on raw maps.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    #[inline]
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    /// Row-major patch index of `(x, y)`, where `x` indexes rows.
    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        x * self.width + y
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.width, index % self.width)
    }
}

impl Default for Grid {
    fn default() -> Self {
        Self::new(16, 16)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Cross,
    #[serde(rename = "self")]
    SelfAttention,
}

/// One raw map: rows are query patches, columns are attended tokens (cross)
/// or attended patches (self).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionEntry {
    pub layer: usize,
    pub head: usize,
    pub map: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStack {
    pub kind: AttentionKind,
    pub grid: Grid,
    pub entries: Vec<AttentionEntry>,
}

impl AttentionStack {
    pub fn new(kind: AttentionKind, grid: Grid) -> Self {
        Self {
            kind,
            grid,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, layer: usize, head: usize, map: Matrix) {
        self.entries.push(AttentionEntry { layer, head, map });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks non-negativity and that every query row sums to one.
    pub fn check_normalized(&self) -> Result<()> {
        for e in &self.entries {
            for r in 0..e.map.rows() {
                let row = e.map.row(r);
                if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                    return Err(arg_err(format!(
                        "entry (layer {}, head {}) has a negative or non-finite weight",
                        e.layer, e.head
                    )));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Err(arg_err(format!(
                        "entry (layer {}, head {}) row {r} sums to {s}",
                        e.layer, e.head
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_shapes(&self, expected_cols: Option<usize>) -> Result<usize> {
        let first = self.entries.first().ok_or(InitnoError::EmptyStack)?;
        let cols = expected_cols.unwrap_or(first.map.cols());
        for e in &self.entries {
            if e.map.shape() != (self.grid.area(), cols) {
                return Err(shape_err(format!(
                    "entry (layer {}, head {}) has shape {:?}, expected {:?}",
                    e.layer,
                    e.head,
                    e.map.shape(),
                    (self.grid.area(), cols)
                )));
            }
        }
        Ok(cols)
    }

    fn mean(&self) -> Matrix {
        let mut acc = self.entries[0].map.clone();
        for e in &self.entries[1..] {
            acc.add_assign(&e.map);
        }
        acc.scale(1.0 / self.entries.len() as f64)
    }
}

/// Per-token spatial attention, `(H*W) x channels`, with `token_labels[c]`
/// giving the prompt position of channel `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedCrossAttentionMap {
    pub grid: Grid,
    pub values: Matrix,
    pub token_labels: Vec<usize>,
}

impl AggregatedCrossAttentionMap {
    pub fn new(grid: Grid, values: Matrix, token_labels: Vec<usize>) -> Result<Self> {
        if values.rows() != grid.area() || values.cols() != token_labels.len() {
            return Err(shape_err(format!(
                "cross map {:?} does not match grid {}x{} with {} labels",
                values.shape(),
                grid.height,
                grid.width,
                token_labels.len()
            )));
        }
        Ok(Self {
            grid,
            values,
            token_labels,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.token_labels.len()
    }

    pub fn channel_of(&self, token: usize) -> Option<usize> {
        self.token_labels.iter().position(|&t| t == token)
    }

    pub fn channel(&self, token: usize) -> Result<Vec<f64>> {
        let c = self
            .channel_of(token)
            .ok_or_else(|| arg_err(format!("token {token} not present in cross map")))?;
        Ok(self.values.column(c))
    }
}

/// Per-patch spatial attention, `(H*W) x (H*W)`; row `p` is the map of the
/// query patch `p` over all patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedSelfAttentionMap {
    pub grid: Grid,
    pub values: Matrix,
}

impl AggregatedSelfAttentionMap {
    pub fn new(grid: Grid, values: Matrix) -> Result<Self> {
        if values.shape() != (grid.area(), grid.area()) {
            return Err(shape_err(format!(
                "self map {:?} does not match grid {}x{}",
                values.shape(),
                grid.height,
                grid.width
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn map_at(&self, x: usize, y: usize) -> &[f64] {
        self.values.row(self.grid.index(x, y))
    }
}

/// Target-token positions plus the start-of-text position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenIndexSet {
    indices: Vec<usize>,
    sot_index: usize,
}

impl TokenIndexSet {
    /// Duplicate indices are dropped, keeping first occurrences in order.
    pub fn new(indices: Vec<usize>, sot_index: usize) -> Result<Self> {
        let mut uniq = Vec::with_capacity(indices.len());
        for i in indices {
            if i == sot_index {
                return Err(arg_err(format!("target token {i} coincides with the start token")));
            }
            if !uniq.contains(&i) {
                uniq.push(i);
            }
        }
        Ok(Self {
            indices: uniq,
            sot_index,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn sot_index(&self) -> usize {
        self.sot_index
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn validate(&self, n_tokens: usize) -> Result<()> {
        if self.sot_index >= n_tokens {
            return Err(arg_err(format!(
                "start token index {} out of range for {n_tokens} tokens",
                self.sot_index
            )));
        }
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= n_tokens) {
            return Err(arg_err(format!(
                "target token {bad} out of range for {n_tokens} tokens"
            )));
        }
        Ok(())
    }
}

/// Smoothing and re-weighting parameters applied at every evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingSettings {
    pub kernel_size: usize,
    pub sigma: f64,
    pub temperature: f64,
}

impl Default for SmoothingSettings {
    fn default() -> Self {
        Self {
            kernel_size: 3,
            sigma: 0.5,
            temperature: 100.0,
        }
    }
}

impl SmoothingSettings {
    pub fn validate(&self) -> Result<()> {
        validate_kernel(self.kernel_size, self.sigma)?;
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(arg_err("temperature must be positive"));
        }
        Ok(())
    }
}

pub fn aggregate_cross(stack: &AttentionStack) -> Result<AggregatedCrossAttentionMap> {
    if stack.kind != AttentionKind::Cross {
        return Err(arg_err("aggregate_cross expects a cross-attention stack"));
    }
    let n = stack.check_shapes(None)?;
    AggregatedCrossAttentionMap::new(stack.grid, stack.mean(), (0..n).collect())
}

pub fn aggregate_self(stack: &AttentionStack) -> Result<AggregatedSelfAttentionMap> {
    if stack.kind != AttentionKind::SelfAttention {
        return Err(arg_err("aggregate_self expects a self-attention stack"));
    }
    stack.check_shapes(Some(stack.grid.area()))?;
    AggregatedSelfAttentionMap::new(stack.grid, stack.mean())
}

/// Drops the start-token channel and replaces the rest by a per-location
/// softmax of `temperature * value`.
pub fn reweight_tokens(
    map: &AggregatedCrossAttentionMap,
    tokens: &TokenIndexSet,
    temperature: f64,
) -> Result<AggregatedCrossAttentionMap> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(arg_err("temperature must be positive"));
    }
    if map.n_tokens() < 2 {
        return Err(arg_err("re-weighting needs at least two token channels"));
    }
    let sot = map
        .channel_of(tokens.sot_index())
        .ok_or_else(|| arg_err(format!("start token index {} out of range", tokens.sot_index())))?;
    let keep: Vec<usize> = (0..map.n_tokens()).filter(|&c| c != sot).collect();
    let mut values = Matrix::from_fn(map.values.rows(), keep.len(), |r, c| {
        temperature * map.values.get(r, keep[c])
    });
    values = values.softmax_rows();
    let labels = keep.iter().map(|&c| map.token_labels[c]).collect();
    AggregatedCrossAttentionMap::new(map.grid, values, labels)
}

fn validate_kernel(kernel_size: usize, sigma: f64) -> Result<()> {
    if kernel_size == 0 || kernel_size.is_multiple_of(2) {
        return Err(arg_err(format!(
            "kernel size must be odd and positive, got {kernel_size}"
        )));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(arg_err(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// Normalized 1-D Gaussian weights over `kernel_size` taps. The 2-D kernel
/// is their outer product, which equals `exp(-d^2 / 2 sigma^2)` normalized
/// over the square support.
pub fn gaussian_kernel(kernel_size: usize, sigma: f64) -> Result<Vec<f64>> {
    validate_kernel(kernel_size, sigma)?;
    let radius = (kernel_size / 2) as f64;
    let raw: Vec<f64> = (0..kernel_size)
        .map(|i| {
            let d = i as f64 - radius;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Convolves every channel (column) of a `(H*W) x C` map over the grid with
/// the normalized Gaussian kernel, reflecting at the borders.
pub fn gaussian_smooth(map: &Matrix, grid: Grid, kernel_size: usize, sigma: f64) -> Result<Matrix> {
    let op = smoothing_operator(grid, kernel_size, sigma)?;
    if map.rows() != grid.area() {
        return Err(shape_err(format!(
            "map has {} rows, grid has {} cells",
            map.rows(),
            grid.area()
        )));
    }
    op.mul_dense(map)
}

/// The smoothing as a sparse `(H*W) x (H*W)` operator acting on map rows.
pub fn smoothing_operator(grid: Grid, kernel_size: usize, sigma: f64) -> Result<CsrMatrix> {
    let k = gaussian_kernel(kernel_size, sigma)?;
    if grid.area() == 0 {
        return Err(arg_err("empty grid"));
    }
    let radius = (kernel_size / 2) as isize;
    let mut rows = Vec::with_capacity(grid.area());
    for x in 0..grid.height {
        for y in 0..grid.width {
            let mut row = Vec::with_capacity(kernel_size * kernel_size);
            for (i, wx) in k.iter().enumerate() {
                let sx = reflect(x as isize + i as isize - radius, grid.height);
                for (j, wy) in k.iter().enumerate() {
                    let sy = reflect(y as isize + j as isize - radius, grid.width);
                    row.push((grid.index(sx, sy), wx * wy));
                }
            }
            rows.push(row);
        }
    }
    Ok(CsrMatrix::from_rows(grid.area(), rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cross_stack(maps: Vec<Matrix>, grid: Grid) -> AttentionStack {
        let mut s = AttentionStack::new(AttentionKind::Cross, grid);
        for (i, m) in maps.into_iter().enumerate() {
            s.push(i, 0, m);
        }
        s
    }

    #[test]
    fn aggregate_of_identical_maps_is_the_map() {
        let g = Grid::new(2, 3);
        let m = Matrix::from_fn(6, 4, |r, c| (r + c) as f64 / 10.0);
        let agg = aggregate_cross(&cross_stack(vec![m.clone(), m.clone()], g)).unwrap();
        assert!(agg.values.max_abs_diff(&m) < 1e-15);
        assert_eq!(agg.token_labels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn aggregate_of_zeros_and_ones_is_half() {
        let g = Grid::new(2, 2);
        let agg = aggregate_cross(&cross_stack(vec![Matrix::zeros(4, 3), Matrix::filled(4, 3, 1.0)], g)).unwrap();
        assert!(agg.values.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn aggregate_errors() {
        let g = Grid::new(2, 2);
        let err = aggregate_cross(&AttentionStack::new(AttentionKind::Cross, g)).unwrap_err();
        assert_eq!(err.to_string(), "no attention entries");
        let mut s = cross_stack(vec![Matrix::zeros(4, 3)], g);
        s.push(7, 1, Matrix::zeros(4, 2));
        let msg = aggregate_cross(&s).unwrap_err().to_string();
        assert!(msg.contains("layer 7, head 1"), "{msg}");
        let mut sa = AttentionStack::new(AttentionKind::SelfAttention, g);
        sa.push(0, 0, Matrix::zeros(4, 3));
        assert!(aggregate_self(&sa).is_err());
    }

    #[test]
    fn aggregate_self_single_entry_passthrough() {
        let g = Grid::new(2, 2);
        let m = Matrix::from_fn(4, 4, |r, c| ((r * 4 + c) as f64).cos().abs());
        let mut s = AttentionStack::new(AttentionKind::SelfAttention, g);
        s.push(0, 0, m.clone());
        assert_eq!(aggregate_self(&s).unwrap().values, m);
        let b = m.scale(3.0);
        s.push(0, 1, b.clone());
        let agg = aggregate_self(&s).unwrap();
        assert!(agg.values.max_abs_diff(&m.add(&b).unwrap().scale(0.5)) < 1e-15);
    }

    #[test]
    fn reweight_uniform_and_dominant() {
        let g = Grid::new(2, 2);
        let tokens = TokenIndexSet::new(vec![1, 2], 0).unwrap();
        let flat = AggregatedCrossAttentionMap::new(
            g,
            Matrix::from_fn(4, 5, |_, c| if c == 0 { 0.9 } else { 0.025 }),
            (0..5).collect(),
        )
        .unwrap();
        let rw = reweight_tokens(&flat, &tokens, 100.0).unwrap();
        assert_eq!(rw.token_labels, vec![1, 2, 3, 4]);
        assert!(rw.values.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-12));

        let peaked =
            AggregatedCrossAttentionMap::new(g, Matrix::from_fn(4, 3, |_, c| [0.5, 0.4, 0.1][c]), (0..3).collect())
                .unwrap();
        let rw = reweight_tokens(&peaked, &tokens, 100.0).unwrap();
        for r in 0..4 {
            assert!(rw.values.get(r, 0) > 1.0 - 1e-12);
        }
    }

    #[test]
    fn reweight_errors() {
        let g = Grid::new(1, 1);
        let m = AggregatedCrossAttentionMap::new(g, Matrix::filled(1, 3, 0.3), vec![0, 1, 2]).unwrap();
        let t = TokenIndexSet::new(vec![1], 0).unwrap();
        assert!(reweight_tokens(&m, &t, 0.0).is_err());
        assert!(reweight_tokens(&m, &t, -1.0).is_err());
        let far = TokenIndexSet::new(vec![1], 9).unwrap();
        assert!(reweight_tokens(&m, &far, 1.0).is_err());
        let one = AggregatedCrossAttentionMap::new(g, Matrix::filled(1, 1, 1.0), vec![0]).unwrap();
        assert!(reweight_tokens(&one, &t, 1.0).is_err());
    }

    #[test]
    fn token_set_invariants() {
        assert!(TokenIndexSet::new(vec![0, 1], 0).is_err());
        let t = TokenIndexSet::new(vec![3, 1, 3], 0).unwrap();
        assert_eq!(t.indices(), &[3, 1]);
        assert!(t.validate(4).is_ok());
        assert!(t.validate(3).is_err());
    }

    #[test]
    fn smoothing_constant_and_identity() {
        let g = Grid::new(5, 4);
        let c = Matrix::filled(20, 2, 0.7);
        let s = gaussian_smooth(&c, g, 3, 0.5).unwrap();
        assert!(s.max_abs_diff(&c) < 1e-14);
        let m = Matrix::from_fn(20, 2, |r, c| (r * 2 + c) as f64);
        assert!(gaussian_smooth(&m, g, 1, 0.5).unwrap().max_abs_diff(&m) < 1e-15);
    }

    #[test]
    fn smoothing_argument_errors() {
        let g = Grid::new(3, 3);
        let m = Matrix::zeros(9, 1);
        assert!(gaussian_smooth(&m, g, 2, 0.5).is_err());
        assert!(gaussian_smooth(&m, g, 3, 0.0).is_err());
        assert!(gaussian_smooth(&Matrix::zeros(8, 1), g, 3, 0.5).is_err());
    }

    #[test]
    fn reflect_is_half_sample_symmetric() {
        let got: Vec<usize> = (-4..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(reflect(-1, 1), 0);
        assert_eq!(reflect(5, 1), 0);
    }
}
