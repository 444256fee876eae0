//! Flat `key = value` run configuration (TOML syntax) with `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::ShapesConfig;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, TermMask};
use crate::networks::{ArchConfig, GeneratorOrder};
use crate::training::{SegmentorMode, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub m: usize,
    pub n_repeat: usize,
    pub epochs: usize,
    pub seed: u64,
    pub max_iterations: u64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lambda_cls: f64,
    pub lambda_seg: f64,
    pub lambda_gp: f64,
    pub segmentor_mode: SegmentorMode,
    /// Segmentor checkpoint used in `pretrained_frozen` mode.
    pub pretrained_segmentor: Option<PathBuf>,
    pub disable_segmentor: bool,
    pub disable_classifier: bool,
    pub flip: bool,
    pub snapshot_count: usize,

    pub image_size: usize,
    pub n_s: usize,
    pub n_c: usize,
    pub n_z: usize,
    pub base_channels: usize,
    pub generator_order: GeneratorOrder,
    pub leaky_slope: f64,

    /// Dataset manifest; when absent a synthetic shapes set is generated.
    pub manifest: Option<PathBuf>,
    pub template: Option<String>,
    pub attribute_names: Vec<String>,
    pub shapes_count: usize,
    pub shapes_seed: u64,

    pub out_dir: PathBuf,
    /// Checkpoint cadence in outer iterations (0: once per epoch).
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::new(ArchConfig::reference(4, 3));
        Self {
            m: t.m,
            n_repeat: t.n_repeat,
            epochs: t.epochs,
            seed: t.seed,
            max_iterations: 0,
            lr: t.lr,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            lambda_cls: t.weights.lambda_cls,
            lambda_seg: t.weights.lambda_seg,
            lambda_gp: t.weights.lambda_gp,
            segmentor_mode: SegmentorMode::Joint,
            pretrained_segmentor: None,
            disable_segmentor: false,
            disable_classifier: false,
            flip: false,
            snapshot_count: t.snapshot_count,
            image_size: 32,
            n_s: 4,
            n_c: 3,
            n_z: 64,
            base_channels: 8,
            generator_order: GeneratorOrder::StepByStep,
            leaky_slope: 0.2,
            manifest: None,
            template: None,
            attribute_names: Vec::new(),
            shapes_count: 2000,
            shapes_seed: 0,
            out_dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            image_size: self.image_size,
            n_s: self.n_s,
            n_c: self.n_c,
            n_z: self.n_z,
            base_channels: self.base_channels,
            generator_order: self.generator_order,
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            m: self.m,
            n_repeat: self.n_repeat,
            weights: LossWeights { lambda_cls: self.lambda_cls, lambda_seg: self.lambda_seg, lambda_gp: self.lambda_gp },
            lr: self.lr,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            epochs: self.epochs,
            seed: self.seed,
            segmentor_mode: self.segmentor_mode,
            ablation: TermMask { disable_classifier: self.disable_classifier, disable_segmentor: self.disable_segmentor },
            arch: self.arch(),
            flip: self.flip,
            snapshot_count: self.snapshot_count,
            max_iterations: self.max_iterations,
        }
    }

    /// Shapes generator settings implied by this run when no manifest is given.
    pub fn shapes(&self) -> ShapesConfig {
        ShapesConfig { image_size: self.image_size, count: self.shapes_count, seed: self.shapes_seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.segmentor_mode == SegmentorMode::PretrainedFrozen && self.pretrained_segmentor.is_none() {
            return Err(Error::Config("pretrained_frozen mode needs pretrained_segmentor".into()));
        }
        if self.manifest.is_none() {
            let shapes = self.shapes();
            shapes.validate()?;
            if (shapes.n_s(), shapes.n_c()) != (self.n_s, self.n_c) {
                return Err(Error::Config(format!(
                    "synthetic shapes have n_s = {} and n_c = {}, configuration says {} and {}",
                    shapes.n_s(),
                    shapes.n_c(),
                    self.n_s,
                    self.n_c
                )));
            }
        }
        Ok(())
    }
}

/// Parses one `key=value` override; the value uses TOML syntax and falls back to a
/// bare string.
pub fn parse_override(text: &str) -> Result<(String, toml::Value)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{text}' is not of the form key=value")))?;
    let key = k.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override '{text}' has an empty key")));
    }
    let raw = v.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Reads a flat config from TOML text and applies overrides in order (last wins).
pub fn parse_config<T: DeserializeOwned>(text: &str, overrides: &[String]) -> Result<T> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    for o in overrides {
        let (k, v) = parse_override(o)?;
        table.insert(k, v);
    }
    T::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_config<T: DeserializeOwned>(path: &Path, overrides: &[String]) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg: RunConfig = parse_config("epochs = 3\nlr = 0.001\n", &[]).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.m, 16);
        assert_eq!(cfg.n_repeat, 5);
        let cfg: RunConfig = parse_config(
            "epochs = 3",
            &["epochs=4".into(), "segmentor_mode=pretrained_frozen".into(), "epochs=7".into()],
        )
        .unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.segmentor_mode, SegmentorMode::PretrainedFrozen);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn invalid_inputs_are_config_errors() {
        let zero: RunConfig = parse_config("", &["m=0".into()]).unwrap();
        assert!(matches!(zero.validate(), Err(Error::Config(_))));
        assert!(matches!(parse_config::<RunConfig>("bogus = 1", &[]), Err(Error::Config(_))));
        assert!(matches!(parse_config::<RunConfig>("epochs = \"many\"", &[]), Err(Error::Config(_))));
        assert!(matches!(parse_config::<RunConfig>("epochs = ", &[]), Err(Error::Config(_))));
        assert!(parse_override("novalue").is_err());
        assert_eq!(parse_override("out_dir=runs/a").unwrap().1, toml::Value::String("runs/a".into()));
    }

    #[test]
    fn shapes_config_from_same_format() {
        let s: ShapesConfig = parse_config("count = 10\npalette = [[255, 0, 0], [0, 0, 255]]\n", &[]).unwrap();
        assert_eq!(s.count, 10);
        assert_eq!(s.n_c(), 2);
        assert_eq!(s.image_size, 32);
    }
}
