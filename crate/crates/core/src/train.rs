//! Self-supervised training: the asymmetric blind-spot objective and the PD baseline.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{adam_step, AdamConfig, GatherMap, Graph, Var};
use crate::bsn::{BlindSpot, BsnConfig, BsnModel, Trainable};
use crate::error::{Error, Result};
use crate::io::{Checkpoint, DatasetManifest};
use crate::pd::{apbsn_loss, PdFactor};
use crate::synth::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Blind spot `k_train` on the full-resolution input.
    Atbsn,
    /// `k = 1` BSN inside pixel-shuffle downsampling.
    Apbsn,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "atbsn" => Ok(Method::Atbsn),
            "apbsn" => Ok(Method::Apbsn),
            _ => Err(Error::invalid(format!("unknown method `{s}` (expected atbsn or apbsn)"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Atbsn => "atbsn",
            Method::Apbsn => "apbsn",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub patch: usize,
    pub iters: usize,
    /// Steps between learning-rate halvings.
    pub decay_every: usize,
    pub k_train: BlindSpot,
    pub method: Method,
    /// PD factor used by the baseline during training.
    pub pd_factor: PdFactor,
    pub seed: u64,
    /// Random flips and quarter turns of each crop.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 4,
            patch: 64,
            iters: 5000,
            decay_every: 1000,
            k_train: BlindSpot::from_shift(4),
            method: Method::Atbsn,
            pd_factor: PdFactor::TRAIN,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Optimizer and batch settings alone. Zero iterations is allowed and returns the
    /// initialization.
    pub fn validate_protocol(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("betas must lie in [0, 1) and eps must be positive"));
        }
        if self.batch == 0 || self.patch == 0 || self.decay_every == 0 {
            return Err(Error::invalid("batch, patch and decay_every must be at least 1"));
        }
        Ok(())
    }

    /// Checks the protocol against the model it will train.
    pub fn validate(&self, model: &BsnConfig) -> Result<()> {
        self.validate_protocol()?;
        match self.method {
            Method::Atbsn => model.check_spatial(self.patch, self.patch),
            Method::Apbsn => {
                let f = self.pd_factor.get();
                if self.patch % f != 0 {
                    return Err(Error::invalid(format!(
                        "patch {} is not divisible by PD factor {f}",
                        self.patch
                    )));
                }
                model.check_spatial(self.patch, self.patch)?;
                model.check_spatial(self.patch / f, self.patch / f)
            }
        }
    }
}

/// `lr · 0.5^⌊step / decay_every⌋`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * 0.5f64.powi((step / cfg.decay_every.max(1)) as i32)
}

/// Noisy training images. Holding only noisy data keeps self-supervised training honest.
#[derive(Clone, Debug)]
pub struct NoisySet {
    pub images: Vec<Tensor<f32>>,
    pub names: Vec<String>,
}

impl NoisySet {
    pub fn new(images: Vec<Tensor<f32>>) -> Self {
        let names = (0..images.len()).map(|i| format!("image {i}")).collect();
        NoisySet { images, names }
    }

    /// Reads the noisy side of a manifest; clean files are never opened.
    pub fn from_manifest(m: &DatasetManifest) -> Result<Self> {
        let paths = m.noisy_paths();
        Ok(NoisySet {
            images: m.load_noisy()?,
            names: paths.iter().map(|p| p.display().to_string()).collect(),
        })
    }
}

/// Draws aligned random crops from one or more image lists that share geometry.
pub struct PatchSampler {
    rng: ChaCha8Rng,
    patch: usize,
    batch: usize,
    augment: bool,
}

impl PatchSampler {
    pub fn new(seed: u64, patch: usize, batch: usize, augment: bool) -> Self {
        PatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            patch,
            batch,
            augment,
        }
    }

    /// Every image must be `[1, c, h, w]` with `h, w ≥ patch`; `sets[s][i]` must share dims
    /// across every `s`.
    pub fn check(&self, sets: &[&[Tensor<f32>]], names: &[String]) -> Result<()> {
        let first = sets.first().ok_or_else(|| Error::invalid("no image sets"))?;
        if first.is_empty() {
            return Err(Error::invalid("no training images"));
        }
        for (i, img) in first.iter().enumerate() {
            let d = img.dims();
            let name = names.get(i).map_or_else(|| format!("image {i}"), Clone::clone);
            if d.n != 1 {
                return Err(Error::invalid(format!("{name}: expected a single image, got batch {}", d.n)));
            }
            if d.h < self.patch || d.w < self.patch {
                return Err(Error::invalid(format!(
                    "{name}: {}x{} is smaller than patch {}",
                    d.h, d.w, self.patch
                )));
            }
            for s in &sets[1..] {
                let o = s.get(i).ok_or_else(|| Error::invalid(format!("{name}: no aligned partner")))?;
                if (o.dims().h, o.dims().w) != (d.h, d.w) {
                    return Err(Error::invalid(format!("{name}: aligned partner differs in size")));
                }
            }
        }
        Ok(())
    }

    /// Next crop position `(image, y, x, dihedral transform)`.
    pub fn draw(&mut self, images: &[Tensor<f32>]) -> (usize, usize, usize, usize) {
        let i = self.rng.random_range(0..images.len());
        let d = images[i].dims();
        let y = self.rng.random_range(0..=d.h - self.patch);
        let x = self.rng.random_range(0..=d.w - self.patch);
        let t = if self.augment { self.rng.random_range(0..8) } else { 0 };
        (i, y, x, t)
    }

    /// One batch per set, cropped identically.
    pub fn sample(&mut self, sets: &[&[Tensor<f32>]]) -> Result<Vec<Tensor<f32>>> {
        let mut crops: Vec<Vec<Tensor<f32>>> = vec![Vec::with_capacity(self.batch); sets.len()];
        for _ in 0..self.batch {
            let (i, y, x, t) = self.draw(sets[0]);
            for (s, set) in sets.iter().enumerate() {
                let c = set[i].crop(y, x, self.patch, self.patch)?;
                crops[s].push(dihedral(&c, t)?);
            }
        }
        crops.iter().map(|c| Tensor::stack_batch(c)).collect()
    }
}

/// Transform `t ∈ 0..8`: `t % 4` clockwise quarter turns, then a horizontal flip if `t ≥ 4`.
pub fn dihedral(x: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
    let r = GatherMap::rotate90(x.dims(), t % 4)?.apply(x);
    if t < 4 {
        return Ok(r);
    }
    let d = r.dims();
    Ok(Tensor::from_fn(d, |n, c, y, xx| r.at(n, c, y, d.w - 1 - xx)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("step,lr,loss\n");
    for r in rows {
        s.push_str(&format!("{},{:e},{}\n", r.step, r.lr, r.loss));
    }
    s
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    crate::io::write_bytes(path, trace_csv(rows).as_bytes())
}

/// Runs `iters` Adam steps on `params`, building the loss with `loss` each step.
///
/// Aborts with [`Error::Divergence`] on a non-finite loss or gradient.
pub fn optimize<M: Trainable>(
    model: &mut M,
    cfg: &TrainConfig,
    mut loss: impl FnMut(&mut Graph<f32>, &M, usize) -> Result<Var>,
    mut observe: impl FnMut(&TraceRow),
) -> Result<Vec<TraceRow>> {
    let adam = cfg.adam();
    let mut trace = Vec::with_capacity(cfg.iters);
    for step in 0..cfg.iters {
        model.params_mut().zero_grad();
        let mut g = Graph::new();
        let l = loss(&mut g, model, step)?;
        let value = g.value(l).item()? as f64;
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        let params = model.params_mut();
        g.backward(l, params)?;
        if params.iter().any(|p| !p.grad.is_finite()) {
            return Err(Error::Divergence { step, loss: value });
        }
        let lr = lr_schedule(step, cfg);
        adam_step(params, lr, &adam);
        let row = TraceRow { step, lr, loss: value };
        observe(&row);
        trace.push(row);
    }
    Ok(trace)
}

/// A trained model with its checkpoint metadata and loss trace.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: BsnModel<f32>,
    pub trace: Vec<TraceRow>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut c = Checkpoint::from_bsn(&self.model, cfg.seed);
        c.header.iteration = self.trace.len();
        c.header.training = Some(cfg.clone());
        c
    }
}

fn sampler_for(data: &NoisySet, cfg: &TrainConfig) -> Result<PatchSampler> {
    let s = PatchSampler::new(derive_seed(cfg.seed, "patches", 0), cfg.patch, cfg.batch, cfg.augment);
    s.check(&[&data.images], &data.names)?;
    Ok(s)
}

/// Minimizes `mean |F(x; s_train) − x|` over noisy crops (`cfg.method` must be `atbsn`).
pub fn train_atbsn(
    data: &NoisySet,
    model_cfg: BsnConfig,
    cfg: &TrainConfig,
    observe: impl FnMut(&TraceRow),
) -> Result<TrainOutcome> {
    if cfg.method != Method::Atbsn {
        return Err(Error::invalid("train_atbsn needs method atbsn"));
    }
    cfg.validate(&model_cfg)?;
    let mut model = BsnModel::<f32>::new(model_cfg, cfg.seed)?;
    let mut sampler = sampler_for(data, cfg)?;
    let trace = optimize(
        &mut model,
        cfg,
        |g, net, _| {
            let batch = sampler.sample(&[&data.images])?.remove(0);
            let x = g.constant(batch);
            let y = net.forward(g, x, cfg.k_train)?;
            g.l1_loss(y, x)
        },
        observe,
    )?;
    Ok(TrainOutcome { model, trace })
}

/// Minimizes the PD-wrapped `k = 1` objective (`cfg.method` must be `apbsn`).
pub fn train_apbsn(
    data: &NoisySet,
    model_cfg: BsnConfig,
    cfg: &TrainConfig,
    observe: impl FnMut(&TraceRow),
) -> Result<TrainOutcome> {
    if cfg.method != Method::Apbsn {
        return Err(Error::invalid("train_apbsn needs method apbsn"));
    }
    cfg.validate(&model_cfg)?;
    let mut model = BsnModel::<f32>::new(model_cfg, cfg.seed)?;
    let mut sampler = sampler_for(data, cfg)?;
    let trace = optimize(
        &mut model,
        cfg,
        |g, net, _| {
            let batch = sampler.sample(&[&data.images])?.remove(0);
            let x = g.constant(batch);
            apbsn_loss(net, g, x, cfg.pd_factor)
        },
        observe,
    )?;
    Ok(TrainOutcome { model, trace })
}

/// Dispatches on `cfg.method`.
pub fn train(
    data: &NoisySet,
    model_cfg: BsnConfig,
    cfg: &TrainConfig,
    observe: impl FnMut(&TraceRow),
) -> Result<TrainOutcome> {
    match cfg.method {
        Method::Atbsn => train_atbsn(data, model_cfg, cfg, observe),
        Method::Apbsn => train_apbsn(data, model_cfg, cfg, observe),
    }
}
