//! Procedural clean images and spatially-correlated, optionally signal-dependent noise.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{
    load_manifest, save_manifest, write_image, BitDepth, DatasetManifest, ImageFormat, ManifestEntry, Split,
};
use crate::tensor::{Dims, Float, Tensor};

/// Smallest spatial edge `synth_clean` produces.
pub const MIN_EDGE: usize = 32;

/// Family of procedural clean images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum CleanKind {
    /// Linear ramp from 0 at the top-left corner to 1 at the bottom-right.
    Gradient,
    /// Two-tone checkerboard; `period` is the repeat length in pixels (even, ≥ 4). `None` draws one.
    Checker { period: Option<usize> },
    /// Gaussian blobs on a flat background.
    Blobs,
    /// Gradient background with blobs and a checkered inset.
    Mixed,
}

impl FromStr for CleanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let kind = match (head, arg) {
            ("gradient", None) => CleanKind::Gradient,
            ("blobs", None) => CleanKind::Blobs,
            ("mixed", None) => CleanKind::Mixed,
            ("checker", None) => CleanKind::Checker { period: None },
            ("checker", Some(p)) => {
                let p = p
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad checker period `{p}`")))?;
                CleanKind::Checker { period: Some(p) }
            }
            _ => {
                return Err(Error::invalid(format!(
                    "unknown image kind `{s}` (expected gradient, checker[:period], blobs or mixed)"
                )))
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl fmt::Display for CleanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CleanKind::Gradient => write!(f, "gradient"),
            CleanKind::Checker { period: None } => write!(f, "checker"),
            CleanKind::Checker { period: Some(p) } => write!(f, "checker:{p}"),
            CleanKind::Blobs => write!(f, "blobs"),
            CleanKind::Mixed => write!(f, "mixed"),
        }
    }
}

impl CleanKind {
    fn validate(&self) -> Result<()> {
        if let CleanKind::Checker { period: Some(p) } = *self {
            if p < 4 || p % 2 != 0 {
                return Err(Error::invalid(format!(
                    "checker period must be even and at least 4, got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic sub-seed for stream `tag`, item `index`.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn gradient_plane(h: usize, w: usize, a: f64) -> impl Fn(usize, usize) -> f64 {
    let (hy, wx) = ((h - 1) as f64, (w - 1) as f64);
    move |y, x| a * y as f64 / hy + (1.0 - a) * x as f64 / wx
}

fn checker_value(y: usize, x: usize, period: usize, lo: f64, hi: f64) -> f64 {
    let half = period / 2;
    if (y / half + x / half) % 2 == 0 {
        lo
    } else {
        hi
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    amp: Vec<f64>,
}

fn draw_blobs(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Vec<Blob> {
    let count = rng.random_range(4..=9);
    (0..count)
        .map(|_| Blob {
            cy: rng.random_range(0.0..h as f64),
            cx: rng.random_range(0.0..w as f64),
            sigma: rng.random_range(0.06..0.2) * h.min(w) as f64,
            amp: (0..c).map(|_| rng.random_range(-0.6..0.6)).collect(),
        })
        .collect()
}

fn blob_sum(blobs: &[Blob], c: usize, y: usize, x: usize) -> f64 {
    blobs
        .iter()
        .map(|b| {
            let (dy, dx) = (y as f64 - b.cy, x as f64 - b.cx);
            b.amp[c] * (-(dy * dy + dx * dx) / (2.0 * b.sigma * b.sigma)).exp()
        })
        .sum()
}

/// Deterministic image in `[0, 1]` with flat regions and sharp edges.
pub fn synth_clean<T: Float>(kind: CleanKind, dims: Dims, seed: u64) -> Result<Tensor<T>> {
    kind.validate()?;
    if dims.h < MIN_EDGE || dims.w < MIN_EDGE || dims.n == 0 || dims.c == 0 {
        return Err(Error::invalid(format!(
            "synthetic images need at least one {MIN_EDGE}x{MIN_EDGE} plane, got {:?}",
            dims.as_array()
        )));
    }
    let mut items = Vec::with_capacity(dims.n);
    for n in 0..dims.n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "clean", n as u64));
        let one = Dims::new(1, dims.c, dims.h, dims.w);
        let img = match kind {
            CleanKind::Gradient => {
                let planes: Vec<_> = (0..dims.c)
                    .map(|_| gradient_plane(dims.h, dims.w, rng.random_range(0.2..0.8)))
                    .collect();
                Tensor::from_fn(one, |_, c, y, x| T::from_f64(planes[c](y, x)))
            }
            CleanKind::Checker { period } => {
                let p = period.unwrap_or_else(|| 2 * rng.random_range(2..=8));
                let lo: Vec<f64> = (0..dims.c).map(|_| rng.random_range(0.0..0.35)).collect();
                let hi: Vec<f64> = (0..dims.c).map(|_| rng.random_range(0.65..1.0)).collect();
                Tensor::from_fn(one, |_, c, y, x| T::from_f64(checker_value(y, x, p, lo[c], hi[c])))
            }
            CleanKind::Blobs => {
                let bg: Vec<f64> = (0..dims.c).map(|_| rng.random_range(0.3..0.7)).collect();
                let blobs = draw_blobs(&mut rng, dims.h, dims.w, dims.c);
                Tensor::from_fn(one, |_, c, y, x| {
                    T::from_f64((bg[c] + blob_sum(&blobs, c, y, x)).clamp(0.0, 1.0))
                })
            }
            CleanKind::Mixed => {
                let planes: Vec<_> = (0..dims.c)
                    .map(|_| gradient_plane(dims.h, dims.w, rng.random_range(0.2..0.8)))
                    .collect();
                let blobs = draw_blobs(&mut rng, dims.h, dims.w, dims.c);
                let p = 2 * rng.random_range(8..=16);
                let (ih, iw) = (dims.h / 2, dims.w / 2);
                let y0 = rng.random_range(0..=dims.h - ih);
                let x0 = rng.random_range(0..=dims.w - iw);
                let lo: Vec<f64> = (0..dims.c).map(|_| rng.random_range(0.0..0.3)).collect();
                let hi: Vec<f64> = (0..dims.c).map(|_| rng.random_range(0.7..1.0)).collect();
                Tensor::from_fn(one, |_, c, y, x| {
                    let v = if (y0..y0 + ih).contains(&y) && (x0..x0 + iw).contains(&x) {
                        checker_value(y - y0, x - x0, p, lo[c], hi[c])
                    } else {
                        0.15 + 0.7 * planes[c](y, x) + 0.5 * blob_sum(&blobs, c, y, x)
                    };
                    T::from_f64(v.clamp(0.0, 1.0))
                })
            }
        };
        items.push(img);
    }
    Tensor::stack_batch(&items)
}

/// Odd-sized, non-negative 2-D kernel summing to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub size: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        let k = Kernel { size, weights };
        k.validate()?;
        Ok(k)
    }

    pub fn identity() -> Self {
        Kernel {
            size: 1,
            weights: vec![1.0],
        }
    }

    pub fn box_filter(size: usize) -> Result<Self> {
        Kernel::new(size, vec![1.0 / (size * size) as f64; size * size])
    }

    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::invalid(format!("kernel sigma must be positive, got {sigma}")));
        }
        let c = (size / 2) as f64;
        let mut w: Vec<f64> = (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
                (-(y * y + x * x) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        Kernel::new(size, w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size % 2 == 0 || self.weights.len() != self.size * self.size {
            return Err(Error::invalid(format!(
                "kernel must be odd-sized and square, got size {} with {} weights",
                self.size,
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("kernel weights must be finite and non-negative"));
        }
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("kernel must sum to 1, sums to {s}")));
        }
        Ok(())
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.weights[y * self.size + x]
    }

    /// Autocorrelation `Σ_p k(p) k(p + δ)` normalized so the zero lag is 1.
    pub fn autocorrelation(&self, dy: isize, dx: isize) -> f64 {
        let s = self.size as isize;
        let mut num = 0.0;
        for y in 0..s {
            for x in 0..s {
                let (yy, xx) = (y + dy, x + dx);
                if (0..s).contains(&yy) && (0..s).contains(&xx) {
                    num += self.at(y as usize, x as usize) * self.at(yy as usize, xx as usize);
                }
            }
        }
        num / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// Noise model: white Gaussian field filtered by `kernel`, scaled to std `√(a·x + σ²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub kernel: Kernel,
    pub signal_dependence: f64,
}

impl Default for NoiseSpec {
    /// σ = 25/255 with a 3×3 Gaussian kernel (σ_k = 0.8): 5×5 correlation support.
    fn default() -> Self {
        NoiseSpec {
            sigma: 25.0 / 255.0,
            kernel: Kernel::gaussian(3, 0.8).expect("valid kernel"),
            signal_dependence: 0.0,
        }
    }
}

impl NoiseSpec {
    /// Same level with a 5×5 Gaussian kernel (σ_k = 1.2): 9×9 correlation support.
    pub fn wide() -> Self {
        NoiseSpec {
            kernel: Kernel::gaussian(5, 1.2).expect("valid kernel"),
            ..Self::default()
        }
    }

    /// Pixel-independent noise of std `sigma`.
    pub fn iid(sigma: f64) -> Self {
        NoiseSpec {
            sigma,
            kernel: Kernel::identity(),
            signal_dependence: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(self.sigma >= 0.0 && self.sigma <= 1.0) {
            return Err(Error::invalid(format!("sigma must lie in [0, 1], got {}", self.sigma)));
        }
        if !(self.signal_dependence >= 0.0) || !self.signal_dependence.is_finite() {
            return Err(Error::invalid(format!(
                "signal dependence must be finite and non-negative, got {}",
                self.signal_dependence
            )));
        }
        Ok(())
    }

    pub fn correlation_support(&self) -> usize {
        2 * self.kernel.size - 1
    }
}

/// Adds noise and clamps to `[0, 1]`; returns the noisy image and the clamped fraction.
///
/// The filtered field is divided per pixel by the root of the sum of squared kernel taps that
/// fall inside the image, so its variance is 1 everywhere before scaling.
pub fn corrupt<T: Float>(clean: &Tensor<T>, spec: &NoiseSpec, seed: u64) -> Result<(Tensor<T>, f64)> {
    spec.validate()?;
    let d = clean.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white: Vec<f64> = (0..d.len()).map(|_| rng.sample(StandardNormal)).collect();
    let ks = spec.kernel.size;
    let r = (ks / 2) as isize;
    let (h, w) = (d.h as isize, d.w as isize);
    let mut out = Vec::with_capacity(d.len());
    let mut clamped = 0usize;
    for (pi, plane) in white.chunks(d.plane()).enumerate() {
        let src = &clean.data()[pi * d.plane()..(pi + 1) * d.plane()];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut energy) = (0.0, 0.0);
                for ky in 0..ks as isize {
                    for kx in 0..ks as isize {
                        let (sy, sx) = (y + ky - r, x + kx - r);
                        if (0..h).contains(&sy) && (0..w).contains(&sx) {
                            let k = spec.kernel.at(ky as usize, kx as usize);
                            acc += k * plane[(sy * w + sx) as usize];
                            energy += k * k;
                        }
                    }
                }
                let c = src[(y * w + x) as usize].as_f64();
                let std = (spec.signal_dependence * c.max(0.0) + spec.sigma * spec.sigma).sqrt();
                let v = c + acc / energy.sqrt() * std;
                let v = if v < 0.0 {
                    clamped += 1;
                    0.0
                } else if v > 1.0 {
                    clamped += 1;
                    1.0
                } else {
                    v
                };
                out.push(T::from_f64(v));
            }
        }
    }
    Ok((Tensor::from_vec(d, out)?, clamped as f64 / d.len().max(1) as f64))
}

/// Everything `generate_dataset` needs; the same spec and seed always give the same files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub train: usize,
    pub val: usize,
    pub size: usize,
    pub channels: usize,
    pub kind: CleanKind,
    pub noise: NoiseSpec,
    pub seed: u64,
    /// Also write 8-bit netpbm copies for viewing.
    pub previews: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            train: 16,
            val: 4,
            size: 64,
            channels: 3,
            kind: CleanKind::Mixed,
            noise: NoiseSpec::default(),
            seed: 0,
            previews: true,
        }
    }
}

/// Manifests of a generated dataset plus the fraction of noisy samples clamped per split.
#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub clamp_fraction: (f64, f64),
}

/// Writes `<dir>/{train,val}/{clean,noisy}_NNNN.atbt` and `<dir>/{train,val}.json`.
pub fn generate_dataset(dir: &Path, spec: &DatasetSpec) -> Result<GeneratedDataset> {
    spec.noise.validate()?;
    if spec.train == 0 {
        return Err(Error::invalid("dataset needs at least one training image"));
    }
    let dims = Dims::new(1, spec.channels, spec.size, spec.size);
    let split = |tag: Split, count: usize| -> Result<(DatasetManifest, f64)> {
        let mut entries = Vec::with_capacity(count);
        let mut clamped = 0.0;
        for i in 0..count {
            let label = format!("{tag}");
            let clean: Tensor<f32> =
                synth_clean(spec.kind, dims, derive_seed(spec.seed, &format!("clean-{label}"), i as u64))?;
            let (noisy, frac) =
                corrupt(&clean, &spec.noise, derive_seed(spec.seed, &format!("noise-{label}"), i as u64))?;
            clamped += frac;
            let rel_clean = PathBuf::from(&label).join(format!("clean_{i:04}.atbt"));
            let rel_noisy = PathBuf::from(&label).join(format!("noisy_{i:04}.atbt"));
            write_image(&dir.join(&rel_clean), &clean, ImageFormat::TensorDump)?;
            write_image(&dir.join(&rel_noisy), &noisy, ImageFormat::TensorDump)?;
            if spec.previews && matches!(spec.channels, 1 | 3) {
                let ext = if spec.channels == 3 { "ppm" } else { "pgm" };
                let fmt = ImageFormat::Pnm(BitDepth::Eight);
                write_image(&dir.join(rel_clean.with_extension(ext)), &clean, fmt)?;
                write_image(&dir.join(rel_noisy.with_extension(ext)), &noisy, fmt)?;
            }
            entries.push(ManifestEntry {
                clean: rel_clean,
                noisy: rel_noisy,
            });
        }
        let m = DatasetManifest::new(tag, spec.seed, spec.noise.clone(), entries);
        save_manifest(&dir.join(format!("{tag}.json")), &m)?;
        Ok((m, if count > 0 { clamped / count as f64 } else { 0.0 }))
    };
    let (train, ct) = split(Split::Train, spec.train)?;
    let (val, cv) = split(Split::Val, spec.val)?;
    let reload = |m: DatasetManifest, tag: Split| -> Result<DatasetManifest> {
        if m.is_empty() {
            return Ok(m);
        }
        load_manifest(&dir.join(format!("{tag}.json")))
    };
    Ok(GeneratedDataset {
        train: reload(train, Split::Train)?,
        val: reload(val, Split::Val)?,
        clamp_fraction: (ct, cv),
    })
}
