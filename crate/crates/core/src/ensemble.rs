//! Blind-spot self-ensemble and its distillation into the plain UNet.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bsn::{BlindSpot, BsnConfig, BsnModel, NbsnModel};
use crate::error::{Error, Result};
use crate::io::{decode_tensor, encode_tensor, read_bytes, write_bytes, Checkpoint, DistillMeta};
use crate::synth::derive_seed;
use crate::tensor::{Float, Tensor};
use crate::train::{optimize, NoisySet, PatchSampler, TraceRow, TrainConfig};

/// Blind-spot sizes to average, kept in ascending order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<BlindSpot>", into = "Vec<BlindSpot>")]
pub struct EnsembleSpec {
    k_set: Vec<BlindSpot>,
}

impl EnsembleSpec {
    pub fn new(ks: impl IntoIterator<Item = BlindSpot>) -> Result<Self> {
        let mut k_set: Vec<BlindSpot> = ks.into_iter().collect();
        if k_set.is_empty() {
            return Err(Error::invalid("ensemble needs at least one blind-spot size"));
        }
        k_set.sort_by_key(|k| k.size());
        if let Some(w) = k_set.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("blind-spot size {} listed twice", w[0])));
        }
        Ok(EnsembleSpec { k_set })
    }

    pub fn k_set(&self) -> &[BlindSpot] {
        &self.k_set
    }

    pub fn len(&self) -> usize {
        self.k_set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k_set.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.k_set.iter().map(|k| k.size()).collect()
    }
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec::new([0, 1, 3, 5].map(|k| BlindSpot::new(k).expect("valid"))).expect("valid")
    }
}

impl TryFrom<Vec<BlindSpot>> for EnsembleSpec {
    type Error = Error;

    fn try_from(v: Vec<BlindSpot>) -> Result<Self> {
        EnsembleSpec::new(v)
    }
}

impl From<EnsembleSpec> for Vec<BlindSpot> {
    fn from(s: EnsembleSpec) -> Self {
        s.k_set
    }
}

impl FromStr for EnsembleSpec {
    type Err = Error;

    /// Comma-separated sizes, e.g. `0,1,3,5`.
    fn from_str(s: &str) -> Result<Self> {
        let ks = s
            .split(',')
            .map(|t| t.trim().parse::<BlindSpot>())
            .collect::<Result<Vec<_>>>()?;
        EnsembleSpec::new(ks)
    }
}

impl fmt::Display for EnsembleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.k_set.iter().map(|k| k.size().to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Mean of single-size predictions, summed in the order given.
pub fn ensemble_in_order<T: Float>(model: &BsnModel<T>, x: &Tensor<T>, ks: &[BlindSpot]) -> Result<Tensor<T>> {
    let (first, rest) = ks
        .split_first()
        .ok_or_else(|| Error::invalid("ensemble needs at least one blind-spot size"))?;
    let mut acc = model.denoise(x, *first)?;
    for &k in rest {
        acc.add_assign(&model.denoise(x, k)?)?;
    }
    if ks.len() == 1 {
        return Ok(acc);
    }
    let inv = T::from_f64(1.0 / ks.len() as f64);
    Ok(acc.map(|v| v * inv))
}

/// Average of the model's predictions over `spec`, in ascending blind-spot order.
pub fn self_ensemble<T: Float>(model: &BsnModel<T>, x: &Tensor<T>, spec: &EnsembleSpec) -> Result<Tensor<T>> {
    ensemble_in_order(model, x, spec.k_set())
}

/// Identifies a teacher and ensemble so cached targets are never reused across teachers.
pub fn teacher_key(teacher: &BsnModel<f32>, spec: &EnsembleSpec) -> String {
    let mut h = Sha256::new();
    h.update(spec.to_string().as_bytes());
    for p in teacher.params().iter() {
        h.update(p.name.as_bytes());
        h.update(encode_tensor(&p.value));
    }
    hex16(&h.finalize())
}

fn hex16(d: &[u8]) -> String {
    d[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Cache file for an image: `<dir>/<teacher key>/<sha256(path)[..16 hex]>.atbt`.
pub fn cache_path(dir: &Path, teacher_key: &str, image_name: &str) -> PathBuf {
    let d = Sha256::digest(image_name.as_bytes());
    dir.join(teacher_key).join(format!("{}.atbt", hex16(&d)))
}

/// Ensemble targets for every image, read from or written to `cache` when given.
///
/// Images are split across `workers` threads; each target depends only on its image.
pub fn teacher_targets(
    teacher: &BsnModel<f32>,
    spec: &EnsembleSpec,
    data: &NoisySet,
    cache: Option<&Path>,
    workers: usize,
) -> Result<Vec<Tensor<f32>>> {
    let key = cache.map(|_| teacher_key(teacher, spec));
    let one = |i: usize| -> Result<Tensor<f32>> {
        let path = cache.map(|d| cache_path(d, key.as_deref().expect("key"), &data.names[i]));
        if let Some(p) = path.as_ref().filter(|p| p.is_file()) {
            let (t, _) = decode_tensor(&read_bytes(p)?)?;
            if t.dims() == data.images[i].dims() {
                return Ok(t);
            }
        }
        let t = self_ensemble(teacher, &data.images[i], spec)?;
        if let Some(p) = &path {
            write_bytes(p, &encode_tensor(&t))?;
        }
        Ok(t)
    };
    let n = data.images.len();
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(one).collect();
    }
    let mut out: Vec<Option<Result<Tensor<f32>>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let one = &one;
                s.spawn(move || (w..n).step_by(workers).map(|i| (i, one(i))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("teacher worker panicked") {
                out[i] = Some(r);
            }
        }
    });
    out.into_iter().map(|r| r.expect("every image assigned")).collect()
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub student: NbsnModel<f32>,
    pub trace: Vec<TraceRow>,
}

impl DistillOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig, teacher_cfg: BsnConfig, spec: &EnsembleSpec) -> Checkpoint {
        let mut c = Checkpoint::from_nbsn(&self.student, cfg.seed);
        c.header.iteration = self.trace.len();
        c.header.training = Some(cfg.clone());
        c.header.distill = Some(DistillMeta {
            teacher_kset: spec.sizes(),
            teacher_config: teacher_cfg,
        });
        c
    }
}

/// Trains a fresh student to minimize `mean |NBSN(x) − ensemble target|` on aligned crops.
pub fn distill(
    targets: &[Tensor<f32>],
    data: &NoisySet,
    student_cfg: BsnConfig,
    cfg: &TrainConfig,
    observe: impl FnMut(&TraceRow),
) -> Result<DistillOutcome> {
    if targets.len() != data.images.len() {
        return Err(Error::invalid(format!(
            "{} teacher targets for {} images",
            targets.len(),
            data.images.len()
        )));
    }
    cfg.validate_protocol()?;
    student_cfg.check_spatial(cfg.patch, cfg.patch)?;
    let mut student = NbsnModel::<f32>::new(student_cfg, cfg.seed)?;
    let mut sampler = PatchSampler::new(derive_seed(cfg.seed, "distill", 0), cfg.patch, cfg.batch, cfg.augment);
    sampler.check(&[&data.images, targets], &data.names)?;
    let trace = optimize(
        &mut student,
        cfg,
        |g, net, _| {
            let mut b = sampler.sample(&[&data.images, targets])?;
            let target = g.constant(b.pop().expect("two sets"));
            let x = g.constant(b.pop().expect("two sets"));
            let y = net.forward(g, x)?;
            g.l1_loss(y, target)
        },
        observe,
    )?;
    Ok(DistillOutcome { student, trace })
}
