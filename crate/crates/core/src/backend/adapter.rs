//! Exchange records for driving an external (real) diffusion pipeline.
//!
//! The pipeline receives an [`AdapterRequest`] and answers with an
//! [`AdapterResponse`]. Arrays use the container layout: a shape plus a
//! row-major `f32` payload. Attention maps must already be resampled to the
//! scoring grid and come from the conditional branch only.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKind, AttentionStack, Grid};
use crate::error::{shape_err, InitnoError, Result};
use crate::noise::{Latent, LatentShape};
use crate::tensor::Matrix;

use super::DenoiseStepResult;

pub const ADAPTER_SCHEMA: &str = "initno.adapter/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ArrayRecord {
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Self {
        Self {
            shape,
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    fn check(&self, what: &str) -> Result<()> {
        if self.shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err(format!(
                "{what}: shape {:?} does not match payload",
                self.shape
            )));
        }
        Ok(())
    }

    fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterRequest {
    pub schema: String,
    /// `[C, H, W]`.
    pub latent: ArrayRecord,
    /// `[n_tokens, embed_dim]`.
    pub token_embeddings: ArrayRecord,
    pub timestep: usize,
    pub num_denoise_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    /// `[H, W, n_tokens]` for cross maps, `[H, W, H*W]` for self maps.
    pub map: ArrayRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterResponse {
    pub schema: String,
    pub timestep: usize,
    /// `[C, H, W]`.
    pub predicted_noise: ArrayRecord,
    pub cross_attention: Vec<AttentionRecord>,
    pub self_attention: Vec<AttentionRecord>,
    /// Decoded output of a full sampling run, when one was requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ArrayRecord>,
}

impl AdapterRequest {
    pub fn new(latent: &Latent, embeddings: &Matrix, timestep: usize, num_denoise_steps: usize) -> Self {
        Self {
            schema: ADAPTER_SCHEMA.to_owned(),
            latent: ArrayRecord::from_f64(latent.shape.dims().to_vec(), &latent.data),
            token_embeddings: ArrayRecord::from_f64(vec![embeddings.rows(), embeddings.cols()], embeddings.as_slice()),
            timestep,
            num_denoise_steps,
        }
    }
}

fn check_schema(s: &str) -> Result<()> {
    if s != ADAPTER_SCHEMA {
        return Err(InitnoError::Format(format!("unsupported adapter schema {s:?}")));
    }
    Ok(())
}

fn stack_from(
    records: &[AttentionRecord],
    kind: AttentionKind,
    grid: Grid,
    channels: Option<usize>,
) -> Result<AttentionStack> {
    let mut stack = AttentionStack::new(kind, grid);
    for r in records {
        r.map.check("attention map")?;
        let ok = match r.map.shape[..] {
            [h, w, c] => h == grid.height && w == grid.width && channels.is_none_or(|n| n == c),
            _ => false,
        };
        if !ok {
            return Err(shape_err(format!(
                "attention (layer {}, head {}) has shape {:?}, not on the {}x{} grid",
                r.layer, r.head, r.map.shape, grid.height, grid.width
            )));
        }
        let m = Matrix::from_vec(grid.area(), r.map.shape[2], r.map.to_f64())?;
        stack.push(r.layer, r.head, m);
    }
    Ok(stack)
}

impl AdapterResponse {
    /// Validates the record against the scoring grid and latent shape.
    pub fn into_step_result(self, grid: Grid, latent_shape: LatentShape) -> Result<DenoiseStepResult> {
        check_schema(&self.schema)?;
        self.predicted_noise.check("predicted_noise")?;
        if self.predicted_noise.shape != latent_shape.dims() {
            return Err(shape_err("predicted_noise does not match the latent shape"));
        }
        let cross_stack = stack_from(&self.cross_attention, AttentionKind::Cross, grid, None)?;
        let self_stack = stack_from(
            &self.self_attention,
            AttentionKind::SelfAttention,
            grid,
            Some(grid.area()),
        )?;
        cross_stack.check_normalized()?;
        self_stack.check_normalized()?;
        Ok(DenoiseStepResult {
            predicted_noise: Latent::new(latent_shape, self.predicted_noise.to_f64())?,
            cross_stack,
            self_stack,
            timestep: self.timestep,
        })
    }
}

impl AdapterRequest {
    pub fn validate(&self) -> Result<()> {
        check_schema(&self.schema)?;
        self.latent.check("latent")?;
        self.token_embeddings.check("token_embeddings")?;
        if self.latent.shape.len() != 3 || self.token_embeddings.shape.len() != 2 {
            return Err(shape_err("latent must be rank 3 and token_embeddings rank 2"));
        }
        super::check_timestep(self.timestep, self.num_denoise_steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn response(grid: Grid) -> AdapterResponse {
        let p = grid.area();
        AdapterResponse {
            schema: ADAPTER_SCHEMA.into(),
            timestep: 50,
            predicted_noise: ArrayRecord::from_f64(vec![1, 2, 2], &[0.0; 4]),
            cross_attention: vec![AttentionRecord {
                layer: 0,
                head: 0,
                map: ArrayRecord::from_f64(vec![2, 2, 3], &vec![1.0 / 3.0; p * 3]),
            }],
            self_attention: vec![AttentionRecord {
                layer: 0,
                head: 0,
                map: ArrayRecord::from_f64(vec![2, 2, 4], &vec![0.25; p * p]),
            }],
            image: None,
        }
    }

    #[test]
    fn response_parses_and_validates() {
        let grid = Grid::new(2, 2);
        let shape = LatentShape::new(1, 2, 2).unwrap();
        let json = serde_json::to_string(&response(grid)).unwrap();
        let back: AdapterResponse = serde_json::from_str(&json).unwrap();
        let step = back.into_step_result(grid, shape).unwrap();
        assert_eq!(step.cross_stack.len(), 1);
        assert_eq!(step.self_stack.entries[0].map.shape(), (4, 4));
    }

    #[test]
    fn response_rejects_wrong_grid_and_schema() {
        let shape = LatentShape::new(1, 2, 2).unwrap();
        assert!(response(Grid::new(2, 2))
            .into_step_result(Grid::new(4, 1), shape)
            .is_err());
        let mut r = response(Grid::new(2, 2));
        r.schema = "other/9".into();
        assert!(r.into_step_result(Grid::new(2, 2), shape).is_err());
        let mut r = response(Grid::new(2, 2));
        r.cross_attention[0].map.data[0] = 0.9;
        assert!(r.into_step_result(Grid::new(2, 2), shape).is_err());
        assert!(serde_json::from_str::<AdapterResponse>(r#"{"schema":"initno.adapter/1","bogus":1}"#).is_err());
    }

    #[test]
    fn request_validation() {
        let shape = LatentShape::new(1, 2, 2).unwrap();
        let req = AdapterRequest::new(&Latent::zeros(shape), &Matrix::zeros(3, 4), 50, 50);
        assert!(req.validate().is_ok());
        let mut late = req.clone();
        late.timestep = 51;
        assert!(late.validate().is_err());
    }
}
