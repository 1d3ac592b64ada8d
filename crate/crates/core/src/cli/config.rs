//! Run configuration file (TOML). Unknown keys are rejected and omitted keys
//! take their defaults; the effective settings are written back next to the
//! results.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{Grid, TokenIndexSet};
use crate::backend::{
    embed_tokens, one_hot_embeddings, DenoiserBackend, PromptSpec, SyntheticBackend, ToyConfig, ToyDenoiser,
};
use crate::error::{arg_err, InitnoError, Result};
use crate::noise::LatentShape;
use crate::pipeline::OptimizationConfig;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Toy,
    Synthetic,
    Adapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticPreset {
    Uniform,
    Random,
    AlwaysValid,
    NeverValid,
    MeanSeeking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Vocabulary ids; entry `sot_index` is the start token.
    pub token_ids: Vec<u32>,
    pub targets: Vec<usize>,
    pub sot_index: usize,
    pub guidance_scale: f64,
    pub num_denoise_steps: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            token_ids: vec![0, 11, 12, 13],
            targets: vec![1, 3],
            sot_index: 0,
            guidance_scale: 7.5,
            num_denoise_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub preset: SyntheticPreset,
    pub seed: u64,
    pub latent_shape: LatentShape,
    pub grid: Grid,
    /// Embedding width for the `uniform`, `random` and `never_valid` presets;
    /// the others use one-hot embeddings.
    pub token_dim: usize,
    pub head_dim: usize,
    pub n_heads: usize,
    pub scale: f64,
    pub strength: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            preset: SyntheticPreset::Random,
            seed: 0,
            latent_shape: LatentShape {
                channels: 1,
                height: 8,
                width: 8,
            },
            grid: Grid::new(8, 8),
            token_dim: 8,
            head_dim: 4,
            n_heads: 2,
            scale: 0.5,
            strength: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// Where an external pipeline would be reached.
    pub endpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub backend: BackendKind,
    pub out_dir: Option<PathBuf>,
    /// Also run the sampler from the returned noise and export the result.
    pub sample: bool,
    pub prompt: PromptConfig,
    pub optimization: OptimizationConfig,
    pub toy: ToyConfig,
    pub synthetic: SyntheticConfig,
    pub adapter: AdapterConfig,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            backend: BackendKind::Toy,
            out_dir: None,
            sample: false,
            prompt: PromptConfig::default(),
            optimization: OptimizationConfig::default(),
            toy: ToyConfig::default(),
            synthetic: SyntheticConfig::default(),
            adapter: AdapterConfig::default(),
        }
    }
}

impl RunConfigFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| InitnoError::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InitnoError::Format(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| InitnoError::Format(format!("{}: {e}", path.display())))
    }

    /// Applies `key.path=value` overrides, where `value` is a TOML value
    /// (bare words are taken as strings).
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut doc = toml::Value::try_from(&self).map_err(|e| InitnoError::Format(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| arg_err(format!("override {o:?} is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut doc, key.trim(), value)?;
        }
        let text = toml::to_string(&doc).map_err(|e| InitnoError::Format(e.to_string()))?;
        Self::from_toml_str(&text).map_err(|e| InitnoError::Format(format!("after overrides: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.optimization.validate()?;
        self.prompt_spec()?;
        Ok(())
    }

    pub fn prompt_spec(&self) -> Result<PromptSpec> {
        let p = &self.prompt;
        let tokens = TokenIndexSet::new(p.targets.clone(), p.sot_index)?;
        PromptSpec::new(self.embeddings()?, tokens)?.with_guidance(p.guidance_scale, p.num_denoise_steps)
    }

    fn embeddings(&self) -> Result<Matrix> {
        let ids = &self.prompt.token_ids;
        Ok(match self.backend {
            BackendKind::Toy => embed_tokens(ids, self.toy.embed_dim),
            BackendKind::Synthetic => match self.synthetic.preset {
                SyntheticPreset::AlwaysValid | SyntheticPreset::MeanSeeking => one_hot_embeddings(ids.len()),
                _ => embed_tokens(ids, self.synthetic.token_dim),
            },
            BackendKind::Adapter => embed_tokens(ids, 1),
        })
    }

    pub fn build_backend(&self) -> Result<Box<dyn DenoiserBackend>> {
        let s = &self.synthetic;
        let n_tokens = self.prompt.token_ids.len();
        Ok(match self.backend {
            BackendKind::Toy => Box::new(ToyDenoiser::new(self.toy.clone())?),
            BackendKind::Synthetic => Box::new(match s.preset {
                SyntheticPreset::Uniform => SyntheticBackend::uniform(s.latent_shape, s.grid, s.token_dim)?,
                SyntheticPreset::Random => SyntheticBackend::random(
                    s.seed,
                    s.latent_shape,
                    s.grid,
                    s.token_dim,
                    s.head_dim,
                    s.n_heads,
                    s.scale,
                )?,
                SyntheticPreset::AlwaysValid => {
                    SyntheticBackend::always_valid(s.latent_shape, s.grid, n_tokens, &self.prompt.targets)?
                }
                SyntheticPreset::NeverValid => {
                    SyntheticBackend::never_valid(s.seed, s.latent_shape, s.grid, s.token_dim, s.scale)?
                }
                SyntheticPreset::MeanSeeking => {
                    SyntheticBackend::mean_seeking(s.latent_shape, n_tokens, &self.prompt.targets, s.strength)?
                }
            }),
            BackendKind::Adapter => {
                let at = self.adapter.endpoint.as_deref().unwrap_or("<unset>");
                return Err(arg_err(format!(
                    "adapter backend ({at}) is an exchange contract for external pipelines and cannot run in-process; \
                     see docs/adapter.md"
                )));
            }
        })
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

fn set_path(doc: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| arg_err(format!("override {key:?}: {} is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            table.insert((*part).to_owned(), value);
            return Ok(());
        }
        cur = table
            .entry((*part).to_owned())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_echo_roundtrip() {
        let cfg = RunConfigFile::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfigFile::default());
        let mut custom = cfg.clone();
        custom.optimization.tau_c = 0.15;
        custom.optimization.seed = u64::MAX;
        custom.toy.prior_std = 0.1 + 0.2;
        let back = RunConfigFile::from_toml_str(&custom.to_toml()).unwrap();
        assert_eq!(back, custom);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = RunConfigFile::from_toml_str("[optimization]\ntau_x = 0.1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("tau_x"), "{err}");
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfigFile::default()
            .with_overrides(&[
                "optimization.tau_c=0.1".into(),
                "backend=synthetic".into(),
                "synthetic.preset=\"never_valid\"".into(),
                "prompt.targets=[1, 2]".into(),
            ])
            .unwrap();
        assert_eq!(cfg.optimization.tau_c, 0.1);
        assert_eq!(cfg.backend, BackendKind::Synthetic);
        assert_eq!(cfg.synthetic.preset, SyntheticPreset::NeverValid);
        assert_eq!(cfg.prompt.targets, vec![1, 2]);
        assert!(RunConfigFile::default().with_overrides(&["nope.x=1".into()]).is_err());
    }

    #[test]
    fn threshold_validation() {
        let cfg = RunConfigFile::from_toml_str("[optimization]\ntau_c = 1.5\n").unwrap();
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("threshold out of range"));
    }

    #[test]
    fn adapter_backend_cannot_be_built() {
        let cfg = RunConfigFile {
            backend: BackendKind::Adapter,
            ..Default::default()
        };
        assert!(cfg.build_backend().is_err());
    }
}
