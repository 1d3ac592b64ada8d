//! Array container: shape, JSON metadata and a row-major `f32` payload.
//!
//! Binary layout (all integers little-endian):
//!
//! | bytes            | content                                  |
//! |------------------|------------------------------------------|
//! | 8                | magic `INITNOAR`                         |
//! | 4 (`u32`)        | format version, currently 1              |
//! | 4 (`u32`)        | number of dimensions `n`                 |
//! | 8·n (`u64`)      | dimensions, outermost first              |
//! | 4 (`u32`)        | metadata length `m`                      |
//! | m                | metadata, UTF-8 JSON object              |
//! | 4·∏dims (`f32`)  | payload, row-major                       |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attention::{AggregatedCrossAttentionMap, AggregatedSelfAttentionMap};
use crate::error::{InitnoError, Result};
use crate::noise::{BaseNoise, Latent, LatentShape, NoiseDistribution};

pub const MAGIC: &[u8; 8] = b"INITNOAR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayContainer {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub metadata: Value,
}

fn fmt_err(msg: impl Into<String>) -> InitnoError {
    InitnoError::Format(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| fmt_err(format!("truncated container while reading {what}")))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl ArrayContainer {
    pub fn new(shape: Vec<usize>, data: Vec<f32>, metadata: Value) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(fmt_err(format!(
                "shape {shape:?} holds {n} values, payload has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data, metadata })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64], metadata: Value) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect(), metadata)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("JSON value serializes");
        let mut out = Vec::with_capacity(24 + 8 * self.shape.len() + meta.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(fmt_err("not an array container (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(fmt_err(format!("unsupported container version {version}")));
        }
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(usize::try_from(r.u64("shape")?).map_err(|_| fmt_err("dimension overflow"))?);
        }
        let meta_len = r.u32("metadata length")? as usize;
        let metadata: Value = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| fmt_err(format!("metadata is not JSON: {e}")))?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| fmt_err("payload size overflow"))?;
        let payload = r.take(
            n.checked_mul(4).ok_or_else(|| fmt_err("payload size overflow"))?,
            "payload",
        )?;
        if r.pos != bytes.len() {
            return Err(fmt_err("trailing bytes after payload"));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(shape, data, metadata)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    fn kind(&self) -> Option<&str> {
        self.metadata.get("kind").and_then(Value::as_str)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(fmt_err(format!("expected a {kind} container, found {other:?}"))),
        }
    }

    fn latent_shape(&self, lead: usize) -> Result<LatentShape> {
        match self.shape[lead..] {
            [c, h, w] => LatentShape::new(c, h, w),
            _ => Err(fmt_err(format!("unexpected latent rank in {:?}", self.shape))),
        }
    }
}

/// Latent as `[C, H, W]`; `extra` is merged into the metadata.
pub fn latent_to_container(latent: &Latent, extra: Value) -> Result<ArrayContainer> {
    let mut meta = json!({ "kind": "latent" });
    merge(&mut meta, extra);
    ArrayContainer::from_f64(latent.shape.dims().to_vec(), &latent.data, meta)
}

pub fn latent_from_container(c: &ArrayContainer) -> Result<Latent> {
    c.expect_kind("latent")?;
    Latent::new(c.latent_shape(0)?, c.to_f64())
}

/// Base noise as `[C, H, W]` with its seed in the metadata. The seed is
/// stored as a string so that all 64 bits survive JSON readers.
pub fn base_noise_to_container(base: &BaseNoise) -> Result<ArrayContainer> {
    ArrayContainer::from_f64(
        base.eps.shape.dims().to_vec(),
        &base.eps.data,
        json!({ "kind": "base_noise", "seed": base.seed.to_string() }),
    )
}

/// Restores the exact `f64` draw by resampling from the recorded seed.
pub fn base_noise_from_container(c: &ArrayContainer) -> Result<BaseNoise> {
    c.expect_kind("base_noise")?;
    let seed = c
        .metadata
        .get("seed")
        .and_then(Value::as_str)
        .and_then(|s| s.parse::<u64>().ok())
        .ok_or_else(|| fmt_err("base noise container lacks a seed"))?;
    let base = crate::noise::sample_standard(c.latent_shape(0)?, seed);
    let stored = c.to_f64();
    if base
        .eps
        .data
        .iter()
        .zip(&stored)
        .any(|(a, b)| (a - b).abs() > 1e-6 * a.abs().max(1.0))
    {
        return Err(fmt_err("payload does not match the recorded seed"));
    }
    Ok(base)
}

/// Distribution as `[2, C, H, W]`: `mu` then `sigma`.
pub fn distribution_to_container(dist: &NoiseDistribution) -> Result<ArrayContainer> {
    let mut data = dist.mu.clone();
    data.extend_from_slice(&dist.sigma);
    let mut shape = vec![2];
    shape.extend(dist.shape.dims());
    ArrayContainer::from_f64(shape, &data, json!({ "kind": "noise_distribution" }))
}

pub fn distribution_from_container(c: &ArrayContainer) -> Result<NoiseDistribution> {
    c.expect_kind("noise_distribution")?;
    if c.shape.first() != Some(&2) {
        return Err(fmt_err("distribution container must lead with a dimension of 2"));
    }
    let shape = c.latent_shape(1)?;
    let all = c.to_f64();
    let (mu, sigma) = all.split_at(shape.numel());
    NoiseDistribution::new(shape, mu.to_vec(), sigma.to_vec())
}

pub fn cross_map_to_container(map: &AggregatedCrossAttentionMap) -> Result<ArrayContainer> {
    ArrayContainer::from_f64(
        vec![map.grid.height, map.grid.width, map.n_tokens()],
        map.values.as_slice(),
        json!({ "kind": "cross_attention", "token_labels": map.token_labels }),
    )
}

pub fn self_map_to_container(map: &AggregatedSelfAttentionMap) -> Result<ArrayContainer> {
    ArrayContainer::from_f64(
        vec![map.grid.height, map.grid.width, map.grid.area()],
        map.values.as_slice(),
        json!({ "kind": "self_attention" }),
    )
}

fn merge(base: &mut Value, extra: Value) {
    if let (Value::Object(b), Value::Object(e)) = (base, extra) {
        for (k, v) in e {
            b.entry(k).or_insert(v);
        }
    }
}
