//! Run configuration, stored as sectioned `key = value` text (TOML).
//!
//! ```toml
//! seed = 7
//!
//! [geometry]
//! origin_x = 32.0
//! # ...
//!
//! [model]
//! stride = 8
//! channels = 32
//! ```
//!
//! Unknown keys are rejected. Every section is optional and falls back to
//! the desk-scale defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::asma::PolarGeometry;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::losses::{AuxReduction, DEFAULT_LAMBDA_AUX};
use crate::metrics::{MaeSource, DEFAULT_BIN_THRESHOLD};
use crate::model::{ModelConfig, DEFAULT_CLIP_LEN};
use crate::sparse_context::DEFAULT_THRESHOLD;
use crate::synthetic::SyntheticSpec;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "ASTR_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub stride: usize,
    pub channels: usize,
    pub layers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proj_dim: Option<usize>,
    pub clip_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            stride: m.stride,
            channels: m.channels,
            layers: m.layers,
            proj_dim: m.proj_dim,
            clip_len: DEFAULT_CLIP_LEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScbSection {
    pub threshold: f64,
}

impl Default for ScbSection {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda_aux: f64,
    pub aux_reduction: AuxReduction,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            lambda_aux: DEFAULT_LAMBDA_AUX,
            aux_reduction: AuxReduction::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub bin_threshold: f64,
    pub mae_source: MaeSource,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            bin_threshold: DEFAULT_BIN_THRESHOLD,
            mae_source: MaeSource::Continuous,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub geometry: PolarGeometry,
    pub model: ModelSection,
    pub scb: ScbSection,
    pub loss: LossSection,
    pub metrics: MetricsSection,
    pub synthetic: SyntheticSpec,
    pub paths: PathsSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            geometry: PolarGeometry::for_canvas(64, 64),
            model: ModelSection::default(),
            scb: ScbSection::default(),
            loss: LossSection::default(),
            metrics: MetricsSection::default(),
            synthetic: SyntheticSpec::default(),
            paths: PathsSection::default(),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn emit(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.emit().as_bytes())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            stride: self.model.stride,
            channels: self.model.channels,
            layers: self.model.layers,
            proj_dim: self.model.proj_dim,
            clip_len: self.model.clip_len,
            threshold: self.scb.threshold,
        }
    }

    /// Replaces the seed with `ASTR_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let section = |name: &str, r: Result<()>| {
            r.map_err(|e| Error::Config(format!("[{name}] {e}")))
        };
        section("geometry", self.geometry.validate())?;
        section("model", self.model_config().validate())?;
        section("synthetic", self.synthetic.validate())?;
        if !(self.loss.lambda_aux >= 0.0 && self.loss.lambda_aux.is_finite()) {
            return Err(Error::Config("[loss] lambda_aux must be finite and ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.metrics.bin_threshold) {
            return Err(Error::Config("[metrics] bin_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_carry_pipeline_constants() {
        let c = Config::default();
        assert_eq!(c.model.clip_len, 3);
        assert_eq!(c.loss.lambda_aux, 0.3);
        assert_eq!(c.scb.threshold, 0.5);
        c.validate().unwrap();
    }

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::parse("[model]\nstrid = 8\n").unwrap_err();
        assert!(err.to_string().contains("strid"), "{err}");
        let err = Config::parse("colour = 1\n").unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Config::parse("[model]\nstride = 6\n").is_err());
        assert!(Config::parse("[loss]\nlambda_aux = -1.0\n").is_err());
        assert!(Config::parse("[geometry]\nr_min = 80.0\n").is_err());
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let c = Config::parse("seed = 9\n[scb]\nthreshold = 0.7\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.model_config().threshold, 0.7);
        assert_eq!(c.model, ModelSection::default());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("astr.toml");
        let mut c = Config::default();
        c.paths.output = Some("out".into());
        c.save(&p).unwrap();
        assert_eq!(Config::load(&p).unwrap(), c);
    }

    proptest! {
        #[test]
        fn emit_then_parse_is_identity(
            seed in any::<u64>(),
            stride_pow in 1u32..6,
            channels in 1usize..64,
            layers in 1usize..4,
            proj in proptest::option::of(1usize..64),
            threshold in 0.0f64..1.0,
            lambda in 0.0f64..5.0,
            r_min in 0.0f64..20.0,
            span in 1.0f64..40.0,
        ) {
            let mut c = Config::default();
            c.seed = seed;
            c.model.stride = 1 << stride_pow;
            c.model.channels = channels;
            c.model.layers = layers;
            c.model.proj_dim = proj;
            c.scb.threshold = threshold;
            c.loss.lambda_aux = lambda;
            c.geometry.r_min = r_min;
            c.geometry.r_max = r_min + span;
            prop_assert_eq!(Config::parse(&c.emit()).unwrap(), c);
        }
    }
}
