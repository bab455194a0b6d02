//! The training loop: sample, pool, run heads, step.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_proposals, Batch, Detector, ProposalBatch, SamplerConfig};
use crate::data::{stack_images, ImageSample};
use crate::error::{Error, Result};
use crate::nn::{LrSchedule, Mode, Module, Real, Sgd};
use crate::objectives::LossBreakdown;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub images_per_step: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Random horizontal flipping of training images.
    pub flip: bool,
    /// Global gradient-norm cap; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub sampler: SamplerConfig,
    /// Draw proposals once per image (and flip) and reuse them, as with
    /// precomputed proposals; otherwise they are redrawn every step.
    pub fixed_proposals: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: LrSchedule::constant(0.01),
            momentum: 0.9,
            weight_decay: 1e-4,
            images_per_step: 2,
            iterations: 500,
            seed: 0,
            flip: true,
            max_grad_norm: Some(10.0),
            sampler: SamplerConfig::default(),
            fixed_proposals: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if self.images_per_step == 0 {
            return Err(Error::Config("images_per_step must be positive".into()));
        }
        if !(self.schedule.base_lr >= 0.0) || !self.schedule.base_lr.is_finite() {
            return Err(Error::Config(format!("base_lr must be finite and >= 0, got {}", self.schedule.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("max_grad_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Stateful single-writer training driver.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    opt: Sgd<T>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    fixed: HashMap<(usize, bool), ProposalBatch>,
    pub step: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            opt: Sgd::new(cfg.momentum, cfg.weight_decay),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            order: Vec::new(),
            cursor: 0,
            fixed: HashMap::new(),
            step: 0,
            cfg,
        })
    }

    fn next_indices(&mut self, n: usize) -> Vec<usize> {
        let k = self.cfg.images_per_step.min(n);
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// Builds the next batch: image choice, flips and proposals.
    pub fn next_batch(&mut self, data: &[ImageSample]) -> Result<Batch<T>> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let idx = self.next_indices(data.len());
        let mut images = Vec::with_capacity(idx.len());
        let mut proposals = Vec::with_capacity(idx.len());
        for i in idx {
            let flip = self.cfg.flip && self.rng.random_bool(0.5);
            let img = if flip { data[i].flipped() } else { data[i].clone() };
            let size = (img.width() as f64, img.height() as f64);
            let p = match self.fixed.get(&(i, flip)) {
                Some(p) => p.clone(),
                None => {
                    let p = sample_proposals(&img.gt(), size, &self.cfg.sampler, &mut self.rng)?;
                    if self.cfg.fixed_proposals {
                        self.fixed.insert((i, flip), p.clone());
                    }
                    p
                }
            };
            proposals.push(p);
            images.push(img);
        }
        Ok(Batch {
            images: stack_images(&images.iter().collect::<Vec<_>>())?,
            proposals,
        })
    }

    /// One optimisation step; returns the loss before the update.
    pub fn train_step(&mut self, det: &mut Detector<T>, data: &[ImageSample]) -> Result<LossBreakdown> {
        let batch = self.next_batch(data)?;
        self.step_on(det, &batch)
    }

    /// One optimisation step on a prepared batch.
    pub fn step_on(&mut self, det: &mut Detector<T>, batch: &Batch<T>) -> Result<LossBreakdown> {
        det.zero_grad();
        let loss = det.loss(batch, Mode::Train, true)?;
        if !loss.is_finite() {
            return Err(divergence(det, self.step, &loss));
        }
        let norm = grad_norm(det);
        if !norm.is_finite() {
            return Err(divergence(det, self.step, &loss));
        }
        if let Some(cap) = self.cfg.max_grad_norm {
            if norm > cap {
                let s = T::of(cap / norm);
                det.visit_mut("", &mut |_, p| {
                    if p.touched {
                        p.grad.mapv_inplace(|g| g * s);
                    }
                });
            }
        }
        let lr = self.cfg.schedule.rate_at(self.step);
        if lr != 0.0 {
            self.opt.step(det, lr);
        }
        self.step += 1;
        Ok(loss)
    }
}

/// L2 norm over the gradients of trained parameters.
pub fn grad_norm<T: Real>(det: &Detector<T>) -> f64 {
    let mut sq = 0.0;
    det.visit("", &mut |_, p| {
        if p.trainable && p.touched {
            sq += p.grad.iter().map(|g| g.f64() * g.f64()).sum::<f64>();
        }
    });
    sq.sqrt()
}

fn divergence<T: Real>(det: &Detector<T>, step: usize, loss: &LossBreakdown) -> Error {
    let mut bad = Vec::new();
    det.visit("", &mut |n, p| {
        if p.value.iter().any(|v| !v.is_finite()) {
            bad.push(format!("{n} (value)"));
        }
        if p.grad.iter().any(|v| !v.is_finite()) {
            bad.push(format!("{n} (grad)"));
        }
    });
    let dump = serde_json::json!({ "loss": loss, "non_finite": bad });
    Error::Divergence {
        step,
        detail: dump.to_string(),
    }
}

/// Runs the configured number of steps, reporting every breakdown.
pub fn train<T: Real>(
    det: &mut Detector<T>,
    data: &[ImageSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossBreakdown) -> Result<()>,
) -> Result<Vec<LossBreakdown>> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut log = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let loss = trainer.train_step(det, data)?;
        on_step(step, &loss)?;
        log.push(loss);
    }
    Ok(log)
}
