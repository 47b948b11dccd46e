//! Mini-batch SGD with momentum, and full-image inference.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImagePair, Mask};
use crate::metrics::{evaluate, MetricReport};
use crate::model::{CAMixerModel, ModelConfig, Variant};
use crate::preclassify::{FeatureStack, SampleSet, INPUT_CHANNELS};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Rescale each batch gradient to at most this global L2 norm; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
    pub blocks: usize,
    pub channels: usize,
    pub beta: usize,
    pub patch_radius: usize,
    /// Mine equally many changed and unchanged samples.
    pub class_balance: bool,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            clip_norm: 0.0,
            seed: 0,
            blocks: 3,
            channels: 10,
            beta: 2,
            patch_radius: 3,
            class_balance: true,
            variant: Variant::Full,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: INPUT_CHANNELS,
            channels: self.channels,
            blocks: self.blocks,
            beta: self.beta,
            patch_radius: self.patch_radius,
            pcam: true,
            gffn: true,
            seed: self.seed,
        }
        .for_variant(self.variant)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.patch_radius == 0 {
            return Err(Error::Config("patch radius must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return Err(Error::Config("clip norm must be zero or positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: CAMixerModel,
    /// Sample-weighted mean loss per epoch.
    pub losses: Vec<f64>,
}

impl Trained {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss\n");
        for (e, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{},{l:.9}\n", e + 1));
        }
        s
    }
}

/// Gathers the given samples into an `[n, c, s, s]` batch.
fn batch_of(samples: &SampleSet, idx: &[usize]) -> Tensor {
    let side = samples.side();
    let mut data = Vec::with_capacity(idx.len() * samples.patch_len());
    for &i in idx {
        data.extend_from_slice(samples.patch(i));
    }
    Tensor::new(&[idx.len(), samples.channels, side, side], data).expect("patch layout")
}

/// Mean cross-entropy of `model` on `idx`.
pub fn batch_loss(model: &CAMixerModel, samples: &SampleSet, idx: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let x = tape.leaf(&batch_of(samples, idx));
    let logits = params.forward(&mut tape, x)?;
    let labels: Vec<usize> = idx.iter().map(|&i| samples.labels[i] as usize).collect();
    let loss = tape.cross_entropy(logits, &labels)?;
    Ok(tape.value(loss)[0])
}

/// Trains a freshly initialized model on `samples`.
pub fn train(samples: &SampleSet, cfg: &TrainConfig) -> Result<Trained> {
    let model = CAMixerModel::new(cfg.model_config())?;
    train_from(model, samples, cfg)
}

/// Continues training `model`. Each epoch visits the samples in a seeded
/// shuffled order; the update is `v = μv + g`, `p -= lr·v`.
pub fn train_from(mut model: CAMixerModel, samples: &SampleSet, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::data("no training samples"));
    }
    if samples.channels != model.config.in_channels || samples.radius != model.config.patch_radius {
        return Err(Error::data(format!(
            "samples are {}-channel radius {}, model expects {}-channel radius {}",
            samples.channels, samples.radius, model.config.in_channels, model.config.patch_radius
        )));
    }
    let mut velocity: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            tape.clear();
            let params = model.bind(&mut tape, true);
            let x = tape.constant(batch_of(samples, idx));
            let logits = params.forward(&mut tape, x)?;
            let labels: Vec<usize> = idx.iter().map(|&i| samples.labels[i] as usize).collect();
            let loss = tape.cross_entropy(logits, &labels)?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {value} at epoch {} batch {}; try a smaller learning rate (now {})",
                    epoch + 1,
                    b + 1,
                    cfg.learning_rate
                )));
            }
            tape.backward(loss)?;
            let vars = params.params();
            let scale = if cfg.clip_norm > 0.0 {
                let norm = vars
                    .iter()
                    .filter_map(|v| tape.grad(**v))
                    .flat_map(|g| g.iter())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > cfg.clip_norm {
                    cfg.clip_norm / norm
                } else {
                    1.0
                }
            } else {
                1.0
            };
            for ((p, v), var) in model.params_mut().into_iter().zip(&mut velocity).zip(vars) {
                let Some(g) = tape.grad(*var) else { continue };
                for ((w, vel), &gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                    *vel = cfg.momentum * *vel + scale * gi;
                    *w -= cfg.learning_rate * *vel;
                }
            }
            total += value * idx.len() as f64;
        }
        let mean = total / samples.len() as f64;
        log::debug!("epoch {} mean loss {mean:.6}", epoch + 1);
        losses.push(mean);
    }
    Ok(Trained { model, losses })
}

/// Binary decision image, with metrics when ground truth was supplied.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeMap {
    pub decisions: Mask,
    pub report: Option<MetricReport>,
}

impl ChangeMap {
    pub fn evaluate(mut self, truth: &Mask) -> Result<Self> {
        self.report = Some(evaluate(&self.decisions, truth)?);
        Ok(self)
    }
}

pub const DEFAULT_TILE: usize = 256;

/// Classifies every pixel of `pair` from its reflect-padded patch. Pixels are
/// processed in tiles of `tile` patches in parallel; the result does not depend
/// on the tile size. A pixel is changed when logit 1 strictly exceeds logit 0.
pub fn predict_map(model: &CAMixerModel, pair: &ImagePair, tile: usize) -> Result<ChangeMap> {
    if tile == 0 {
        return Err(Error::Config("tile size must be positive".into()));
    }
    let stack = FeatureStack::from_pair(pair)?;
    let (h, w) = pair.dims();
    let radius = model.config.patch_radius;
    let side = model.config.side();
    let starts: Vec<usize> = (0..h * w).step_by(tile).collect();
    let tiles: Vec<Vec<u8>> = starts
        .par_iter()
        .map(|&start| -> Result<Vec<u8>> {
            let end = (start + tile).min(h * w);
            let mut data = Vec::with_capacity((end - start) * INPUT_CHANNELS * side * side);
            for i in start..end {
                stack.patch_into(radius, i / w, i % w, &mut data);
            }
            let batch = Tensor::new(&[end - start, INPUT_CHANNELS, side, side], data)?;
            let logits = model.forward(&batch)?;
            logits
                .data()
                .chunks(2)
                .map(|l| {
                    if l[0].is_nan() || l[1].is_nan() {
                        Err(Error::Numeric("model produced NaN logits".into()))
                    } else {
                        Ok(u8::from(l[1] > l[0]))
                    }
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let decisions = Mask::new(h, w, tiles.concat())?;
    Ok(ChangeMap { decisions, report: None })
}
