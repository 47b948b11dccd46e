//! Run configuration as flat `key = value` text.
//!
//! One setting per line; `#` starts a comment. Every key has a default, unknown
//! keys are rejected, and [`RunConfig::to_text`] renders every key in a fixed
//! order so the resolved text (and its hash) identifies a run.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Variant;
use crate::preclassify::{FcmParams, MiningParams, PreclassParams};
use crate::speckle::SceneSpec;
use crate::trainer::{TrainConfig, DEFAULT_TILE};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Seeds sample mining, weight initialization and shuffling.
    pub seed: u64,
    pub scene: SceneSpec,
    pub precls: PreclassParams,
    pub mining_cap: usize,
    pub train: TrainConfig,
    pub tile: usize,
    pub sweep_min: usize,
    pub sweep_max: usize,
    pub dump_features: bool,
    pub inputs: Inputs,
}

/// Input files. Empty means "not given".
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Inputs {
    pub t1: Option<PathBuf>,
    pub t2: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub samples: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub changemap: Option<PathBuf>,
    /// Intensity represented by PGM maxval when images are read from PGM.
    pub pgm_scale: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            scene: SceneSpec::default(),
            precls: PreclassParams::default(),
            mining_cap: MiningParams::default().cap,
            train: TrainConfig::default(),
            tile: DEFAULT_TILE,
            sweep_min: 0,
            sweep_max: 5,
            dump_features: false,
            inputs: Inputs { pgm_scale: 1.0, ..Inputs::default() },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Every key, in rendering order.
    pub const KEYS: [&'static str; 33] = [
        "seed",
        "scene.height",
        "scene.width",
        "scene.gain",
        "scene.looks",
        "scene.seed",
        "precls.coarse_clusters",
        "precls.fuzzifier",
        "precls.tol",
        "precls.max_iter",
        "mining.cap",
        "train.epochs",
        "train.batch_size",
        "train.learning_rate",
        "train.momentum",
        "train.clip_norm",
        "train.class_balance",
        "train.patch_radius",
        "model.variant",
        "model.blocks",
        "model.channels",
        "model.beta",
        "predict.tile",
        "sweep.min",
        "sweep.max",
        "features.dump",
        "input.t1",
        "input.t2",
        "input.truth",
        "input.samples",
        "input.model",
        "input.changemap",
        "input.pgm_scale",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "scene.height" => self.scene.height = parse(key, v)?,
            "scene.width" => self.scene.width = parse(key, v)?,
            "scene.gain" => self.scene.change_gain = parse(key, v)?,
            "scene.looks" => self.scene.looks = parse(key, v)?,
            "scene.seed" => self.scene.seed = parse(key, v)?,
            "precls.coarse_clusters" => self.precls.coarse_clusters = parse(key, v)?,
            "precls.fuzzifier" => self.precls.fcm.fuzzifier = parse(key, v)?,
            "precls.tol" => self.precls.fcm.tol = parse(key, v)?,
            "precls.max_iter" => self.precls.fcm.max_iter = parse(key, v)?,
            "mining.cap" => self.mining_cap = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.momentum" => self.train.momentum = parse(key, v)?,
            "train.clip_norm" => self.train.clip_norm = parse(key, v)?,
            "train.class_balance" => self.train.class_balance = parse(key, v)?,
            "train.patch_radius" => self.train.patch_radius = parse(key, v)?,
            "model.variant" => self.train.variant = Variant::parse(v)?,
            "model.blocks" => self.train.blocks = parse(key, v)?,
            "model.channels" => self.train.channels = parse(key, v)?,
            "model.beta" => self.train.beta = parse(key, v)?,
            "predict.tile" => self.tile = parse(key, v)?,
            "sweep.min" => self.sweep_min = parse(key, v)?,
            "sweep.max" => self.sweep_max = parse(key, v)?,
            "features.dump" => self.dump_features = parse(key, v)?,
            "input.t1" => self.inputs.t1 = parse_path(v),
            "input.t2" => self.inputs.t2 = parse_path(v),
            "input.truth" => self.inputs.truth = parse_path(v),
            "input.samples" => self.inputs.samples = parse_path(v),
            "input.model" => self.inputs.model = parse_path(v),
            "input.changemap" => self.inputs.changemap = parse_path(v),
            "input.pgm_scale" => self.inputs.pgm_scale = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let p = &self.precls;
        let t = &self.train;
        Some(match key {
            "seed" => self.seed.to_string(),
            "scene.height" => self.scene.height.to_string(),
            "scene.width" => self.scene.width.to_string(),
            "scene.gain" => self.scene.change_gain.to_string(),
            "scene.looks" => self.scene.looks.to_string(),
            "scene.seed" => self.scene.seed.to_string(),
            "precls.coarse_clusters" => p.coarse_clusters.to_string(),
            "precls.fuzzifier" => p.fcm.fuzzifier.to_string(),
            "precls.tol" => p.fcm.tol.to_string(),
            "precls.max_iter" => p.fcm.max_iter.to_string(),
            "mining.cap" => self.mining_cap.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.learning_rate" => t.learning_rate.to_string(),
            "train.momentum" => t.momentum.to_string(),
            "train.clip_norm" => t.clip_norm.to_string(),
            "train.class_balance" => t.class_balance.to_string(),
            "train.patch_radius" => t.patch_radius.to_string(),
            "model.variant" => t.variant.name().to_string(),
            "model.blocks" => t.blocks.to_string(),
            "model.channels" => t.channels.to_string(),
            "model.beta" => t.beta.to_string(),
            "predict.tile" => self.tile.to_string(),
            "sweep.min" => self.sweep_min.to_string(),
            "sweep.max" => self.sweep_max.to_string(),
            "features.dump" => self.dump_features.to_string(),
            "input.t1" => show_path(&self.inputs.t1),
            "input.t2" => show_path(&self.inputs.t2),
            "input.truth" => show_path(&self.inputs.truth),
            "input.samples" => show_path(&self.inputs.samples),
            "input.model" => show_path(&self.inputs.model),
            "input.changemap" => show_path(&self.inputs.changemap),
            "input.pgm_scale" => self.inputs.pgm_scale.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key, value).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Applies a single `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (key, value) =
            pair.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got {pair:?}")))?;
        self.set(key, value)
    }

    /// Resolved text: every key, one per line, in [`KEYS`](Self::KEYS) order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            s.push_str(key);
            s.push_str(" = ");
            s.push_str(&self.get(key).expect("listed key"));
            s.push('\n');
        }
        s
    }

    /// Hex SHA-256 of the resolved text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.train_config().model_config().validate()?;
        if self.tile == 0 {
            return Err(Error::Config("predict.tile must be positive".into()));
        }
        if self.mining_cap == 0 {
            return Err(Error::Config("mining.cap must be positive".into()));
        }
        if self.sweep_min > self.sweep_max {
            return Err(Error::Config("sweep.min exceeds sweep.max".into()));
        }
        if self.scene.height == 0 || self.scene.width == 0 {
            return Err(Error::Config("scene extent must be positive".into()));
        }
        if !(self.inputs.pgm_scale.is_finite() && self.inputs.pgm_scale > 0.0) {
            return Err(Error::Config("input.pgm_scale must be positive".into()));
        }
        let f = &self.precls.fcm;
        if !(f.fuzzifier > 1.0 && f.tol > 0.0 && f.max_iter > 0) {
            return Err(Error::Config("fcm needs fuzzifier > 1, tol > 0 and max_iter > 0".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn mining_params(&self) -> MiningParams {
        MiningParams {
            radius: self.train.patch_radius,
            cap: self.mining_cap,
            balance: self.train.class_balance,
            seed: self.seed,
        }
    }

    pub fn fcm_params(&self) -> &FcmParams {
        &self.precls.fcm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("train.learning_rate", "0.0025").unwrap();
        cfg.set("model.variant", "no_gffn").unwrap();
        cfg.set("input.t1", "a/b.camf").unwrap();
        cfg.set("precls.tol", "1e-7").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(RunConfig::default().hash(), cfg.hash());
    }

    #[test]
    fn every_key_renders() {
        let cfg = RunConfig::default();
        for key in RunConfig::KEYS {
            assert!(cfg.get(key).is_some(), "{key}");
        }
        assert_eq!(cfg.to_text().lines().count(), RunConfig::KEYS.len());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::from_text("# header\n\nseed = 7   # trailing\n model.blocks=2\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.blocks, 2);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(RunConfig::from_text("colour = red"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("seed"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("seed = -1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("model.variant = tiny"), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        assert!(cfg.set_pair("train.epochs").is_err());
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        for (k, v) in [
            ("train.epochs", "0"),
            ("predict.tile", "0"),
            ("sweep.min", "9"),
            ("model.channels", "7"),
            ("precls.fuzzifier", "1"),
        ] {
            let mut cfg = RunConfig::default();
            cfg.set(k, v).unwrap();
            assert!(cfg.validate().is_err(), "{k}={v}");
        }
    }
}
