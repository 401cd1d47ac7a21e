//! Run configuration as sectioned TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Seed of the train/val/test split.
    pub seed: u64,
    pub image_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            seed: 0,
            image_size: 512,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: BackboneConfig,
    pub train: TrainConfig,
    pub eval: MetricConfig,
}

/// Rewrites a TOML error so it leads with the dotted key it points at.
fn keyed_error(text: &str, err: toml::de::Error) -> Error {
    let Some(span) = err.span() else {
        return Error::Config(err.message().to_string());
    };
    let start = span.start.min(text.len());
    let line_start = text[..start].rfind('\n').map_or(0, |i| i + 1);
    let line_end = text[start..].find('\n').map_or(text.len(), |i| start + i);
    let line = text[line_start..line_end].trim();
    let mut section = String::new();
    for l in text[..line_start].lines() {
        let l = l.trim();
        if l.starts_with('[') && l.ends_with(']') {
            section = l.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
    }
    let key = match line.split_once('=') {
        Some((k, _)) => k.trim().to_string(),
        None if line.starts_with('[') => line.trim_matches(|c| c == '[' || c == ']').trim().to_string(),
        None => line.to_string(),
    };
    let dotted = if section.is_empty() || line.starts_with('[') {
        key
    } else {
        format!("{section}.{key}")
    };
    let lineno = text[..line_start].matches('\n').count() + 1;
    Error::Config(format!("`{dotted}` (line {lineno}): {}", err.message()))
}

impl RunConfig {
    /// Small-input settings for quick CPU runs: 64×64 images, batch 8,
    /// at most 30 epochs, fusion grids fitted to the feature maps.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.data.image_size = 64;
        c.train.batch_size = 8;
        c.train.max_epochs = 30;
        c.model = c.model.fitted_to(64);
        c
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| keyed_error(text, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    /// Backbone with fusion grids fitted to `data.image_size`.
    pub fn resolved_model(&self) -> BackboneConfig {
        self.model.fitted_to(self.data.image_size)
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.resolved_model();
        model.validate()?;
        self.train.validate()?;
        let size = self.data.image_size;
        let d = model.size_divisor();
        if size < crate::data::MIN_SIZE || size % d != 0 {
            return Err(Error::Config(format!(
                "data.image_size {size} must be at least {} and divisible by {d}",
                crate::data::MIN_SIZE
            )));
        }
        if model.tffm.enabled && (size >> (model.levels - 1)) < 4 {
            return Err(Error::Config(format!(
                "data.image_size {size} leaves the deepest level smaller than the minimum 4×4 fusion grid"
            )));
        }
        let e = &self.eval;
        if !(0.0..=1.0).contains(&e.threshold) || e.junction_tol < 0.0 || e.skeleton_tol < 0.0 {
            return Err(Error::Config(
                "eval.threshold must be in [0,1] and tolerances non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::EncoderPreset;
    use crate::losses::LossKind;
    use crate::tffm::GateMode;

    #[test]
    fn defaults_carry_published_values() {
        let c = RunConfig::default();
        assert_eq!(c.data.image_size, 512);
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.train.batch_size, 10);
        assert_eq!(c.train.max_epochs, 500);
        assert_eq!(c.train.patience, 10);
        assert_eq!(c.train.loss.alpha, 0.65);
        assert_eq!(c.train.loss.cldice_weight, 0.5);
        assert_eq!(c.model.tffm.grids, vec![20, 24, 28, 32, 32]);
        assert_eq!(c.model.tffm.neighbors, vec![5, 7, 9, 12, 15]);
        assert_eq!(c.model.levels, 5);
        c.validate().unwrap();
    }

    #[test]
    fn roundtrip_and_partial_files() {
        let c = RunConfig::desk();
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
        let partial = "[train]\nlr = 0.002\n[train.loss]\nloss = \"tversky\"\n[model]\nencoder = \"tiny\"\n[model.tffm]\ngate = \"force_closed\"\n";
        let p = RunConfig::from_toml_str(partial).unwrap();
        assert_eq!(p.train.lr, 0.002);
        assert_eq!(p.train.loss.loss, LossKind::Tversky);
        assert_eq!(p.train.batch_size, 10);
        assert_eq!(p.model.encoder, EncoderPreset::Tiny);
        assert_eq!(p.model.tffm.gate, GateMode::ForceClosed);
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::from_toml_str("[train]\nbatch_size = 4\nlr = \"fast\"\n").unwrap_err().to_string();
        assert!(e.contains("train.lr"), "{e}");
        let e = RunConfig::from_toml_str("[train.loss]\nalpah = 0.5\n").unwrap_err().to_string();
        assert!(e.contains("alpah"), "{e}");
        let e = RunConfig::from_toml_str("[train]\npatience = 0\n").unwrap_err().to_string();
        assert!(e.contains("train.patience"), "{e}");
        let e = RunConfig::from_toml_str("[data]\nimage_size = 100\n").unwrap_err().to_string();
        assert!(e.contains("data.image_size"), "{e}");
    }
}
