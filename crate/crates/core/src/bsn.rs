//! Four-branch half-plane blind-spot network with a per-call blind-spot size, and the plain
//! UNet (NBSN) it is distilled into.
//!
//! The trunk is a small UNet built only from receptive-field-restricted layers, so every
//! output row only sees input rows at or above it. Running it on the four 90° rotations of
//! the input, shifting each result down by `s` rows and rotating back gives four half-plane
//! feature maps whose union excludes a `(2s−1) × (2s−1)` square around every pixel. A stack
//! of 1×1 convolutions then mixes the four maps into the prediction.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Float, Tensor};

/// Blind-spot edge length `k`, either 0 (no blind spot) or odd; the feature shift is `s = (k+1)/2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct BlindSpot(usize);

impl BlindSpot {
    pub const NONE: BlindSpot = BlindSpot(0);

    pub fn new(k: usize) -> Result<Self> {
        if k != 0 && k % 2 == 0 {
            return Err(Error::invalid(format!(
                "blind-spot size must be 0 or odd, got {k}"
            )));
        }
        Ok(BlindSpot(k))
    }

    /// The blind spot produced by shifting the half-plane features `s` rows.
    pub fn from_shift(s: usize) -> Self {
        BlindSpot(if s == 0 { 0 } else { 2 * s - 1 })
    }

    pub fn size(self) -> usize {
        self.0
    }

    pub fn shift(self) -> usize {
        if self.0 == 0 {
            0
        } else {
            (self.0 + 1) / 2
        }
    }
}

impl TryFrom<usize> for BlindSpot {
    type Error = Error;

    fn try_from(k: usize) -> Result<Self> {
        BlindSpot::new(k)
    }
}

impl From<BlindSpot> for usize {
    fn from(b: BlindSpot) -> usize {
        b.0
    }
}

impl fmt::Display for BlindSpot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k={}", self.0)
    }
}

impl std::str::FromStr for BlindSpot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let k = s
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::invalid(format!("not a blind-spot size: `{s}`")))?;
        BlindSpot::new(k)
    }
}

/// Network widths and depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BsnConfig {
    pub input_channels: usize,
    pub base_channels: usize,
    pub pool_levels: usize,
    pub head_channels: usize,
}

impl Default for BsnConfig {
    fn default() -> Self {
        BsnConfig {
            input_channels: 3,
            base_channels: 32,
            pool_levels: 2,
            head_channels: 64,
        }
    }
}

impl BsnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_levels == 0
            || self.input_channels == 0
            || self.base_channels == 0
            || self.head_channels == 0
        {
            return Err(Error::invalid(format!(
                "channel counts and pool levels must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Spatial dims must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.pool_levels
    }

    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let m = self.spatial_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!(
                "spatial dims {h}x{w} must be positive multiples of {m}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
}

impl ConvLayer {
    fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
    ) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let wd = Dims::new(out_ch, in_ch, k, k);
        let w = Tensor::from_fn(wd, |_, _, _, _| T::from_f64(normal.sample(rng)));
        let w = store.add(format!("{name}.weight"), w);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(Dims::new(1, out_ch, 1, 1)));
        ConvLayer {
            w,
            b,
            in_ch,
            out_ch,
            k,
        }
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        conv_macs(self.in_ch, self.out_ch, self.k, h, w)
    }
}

/// Multiply-accumulates of one `k × k` conv producing an `h × w` map.
pub fn conv_macs(in_ch: usize, out_ch: usize, k: usize, h: usize, w: usize) -> u64 {
    (out_ch * in_ch * k * k) as u64 * (h * w) as u64
}

/// Shared UNet topology: `pool_levels + 1` resolutions, two 3×3 convs each, skips by concatenation.
#[derive(Clone, Debug)]
pub(crate) struct Trunk {
    /// `encoder[l]` runs at resolution level `l`.
    encoder: Vec<[ConvLayer; 2]>,
    /// `decoder[i]` runs at level `pool_levels − 1 − i`.
    decoder: Vec<[ConvLayer; 2]>,
}

/// Which flavour of layers the trunk uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Field {
    /// Shifted convs and pools; output row `i` only sees input rows `≤ i`.
    UpperHalfPlane,
    /// Ordinary same-padded layers.
    Full,
}

impl Trunk {
    fn new<T: Float>(
        cfg: &BsnConfig,
        out_channels: usize,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let b = cfg.base_channels;
        let mut encoder = Vec::new();
        for l in 0..=cfg.pool_levels {
            let cin = if l == 0 { cfg.input_channels } else { b };
            encoder.push([
                ConvLayer::new(store, rng, &format!("enc{l}.conv0"), cin, b, 3),
                ConvLayer::new(store, rng, &format!("enc{l}.conv1"), b, b, 3),
            ]);
        }
        let mut decoder = Vec::new();
        for l in (0..cfg.pool_levels).rev() {
            let cout = if l == 0 { out_channels } else { b };
            decoder.push([
                ConvLayer::new(store, rng, &format!("dec{l}.conv0"), 2 * b, b, 3),
                ConvLayer::new(store, rng, &format!("dec{l}.conv1"), b, cout, 3),
            ]);
        }
        Trunk { encoder, decoder }
    }

    fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        field: Field,
        linear_output: bool,
    ) -> Result<Var> {
        let conv = |g: &mut Graph<T>, h: Var, layer: &ConvLayer, act: bool| -> Result<Var> {
            let w = g.param(store, layer.w);
            let b = g.param(store, layer.b);
            let y = match field {
                Field::UpperHalfPlane => g.shifted_conv2d(h, w, Some(b))?,
                Field::Full => g.conv2d(h, w, Some(b))?,
            };
            Ok(if act { g.leaky_relu(y, LEAKY_SLOPE) } else { y })
        };
        let levels = self.encoder.len() - 1;
        let mut h = x;
        let mut skips = Vec::with_capacity(levels);
        for (l, [c0, c1]) in self.encoder.iter().enumerate() {
            if l > 0 {
                h = match field {
                    Field::UpperHalfPlane => g.shifted_avgpool2(h)?,
                    Field::Full => g.avgpool2(h)?,
                };
            }
            h = conv(g, h, c0, true)?;
            h = conv(g, h, c1, true)?;
            if l < levels {
                skips.push(h);
            }
        }
        let last = self.decoder.len() - 1;
        for (i, [c0, c1]) in self.decoder.iter().enumerate() {
            h = g.upsample_nearest2(h);
            let skip = skips.pop().expect("one skip per decoder stage");
            h = g.concat_channels(&[h, skip])?;
            h = conv(g, h, c0, true)?;
            h = conv(g, h, c1, !(linear_output && i == last))?;
        }
        Ok(h)
    }

    fn layers(&self) -> impl Iterator<Item = (usize, &ConvLayer)> {
        let levels = self.encoder.len() - 1;
        let enc = self
            .encoder
            .iter()
            .enumerate()
            .flat_map(|(l, pair)| pair.iter().map(move |c| (l, c)));
        let dec = self
            .decoder
            .iter()
            .enumerate()
            .flat_map(move |(i, pair)| pair.iter().map(move |c| (levels - 1 - i, c)));
        enc.chain(dec)
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.layers()
            .map(|(l, c)| c.macs(h >> l, w >> l))
            .sum()
    }
}

/// The image-producing conv starts with He weights scaled by `OUTPUT_GAIN` and bias
/// `OUTPUT_BIAS`, so an untrained network predicts roughly mid-grey.
pub const OUTPUT_GAIN: f64 = 0.1;
pub const OUTPUT_BIAS: f64 = 0.5;

fn init_output<T: Float>(store: &mut ParamStore<T>, layer: &ConvLayer) {
    let w = store.get_mut(layer.w);
    w.value = w.value.map(|v| v * T::from_f64(OUTPUT_GAIN));
    store.get_mut(layer.b).value.fill(T::from_f64(OUTPUT_BIAS));
}

/// Branch order of the concatenated head input, with the clockwise quarter turns
/// that bring each half-plane to the top.
pub const BRANCHES: [(&str, usize); 4] = [("up", 0), ("down", 2), ("left", 1), ("right", 3)];

/// The blind-spot network.
#[derive(Clone, Debug)]
pub struct BsnModel<T: Float> {
    cfg: BsnConfig,
    params: ParamStore<T>,
    trunk: Trunk,
    head: Vec<ConvLayer>,
}

impl<T: Float> BsnModel<T> {
    /// Deterministic He-initialised network.
    pub fn new(cfg: BsnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let b = cfg.base_channels;
        let trunk = Trunk::new(&cfg, b, &mut params, &mut rng);
        let hc = cfg.head_channels;
        let head = vec![
            ConvLayer::new(&mut params, &mut rng, "head.conv0", 4 * b, hc, 1),
            ConvLayer::new(&mut params, &mut rng, "head.conv1", hc, hc, 1),
            ConvLayer::new(&mut params, &mut rng, "head.conv2", hc, cfg.input_channels, 1),
        ];
        init_output(&mut params, &head[2]);
        Ok(BsnModel {
            cfg,
            params,
            trunk,
            head,
        })
    }

    pub fn config(&self) -> &BsnConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<Dims> {
        let d = g.dims(x);
        if d.c != self.cfg.input_channels {
            return Err(Error::invalid(format!(
                "model expects {} channels, got {}",
                self.cfg.input_channels, d.c
            )));
        }
        self.cfg.check_spatial(d.h, d.w)?;
        Ok(d)
    }

    /// Trunk output on the unrotated input, before any blind-spot shift (`f_up`).
    pub fn half_plane_features(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        self.trunk
            .forward(g, &self.params, x, Field::UpperHalfPlane, false)
    }

    fn check_shift(&self, g: &Graph<T>, x: Var, bs: BlindSpot) -> Result<Dims> {
        let d = self.check_input(g, x)?;
        let s = bs.shift();
        if s > d.h.min(d.w) {
            return Err(Error::invalid(format!(
                "shift {s} exceeds spatial dims {}x{}",
                d.h, d.w
            )));
        }
        Ok(d)
    }

    /// The four shifted half-plane feature maps in [`BRANCHES`] order, back in the input orientation.
    ///
    /// Square inputs run the four rotations as one batch; other inputs run them one by one.
    pub fn branch_features(&self, g: &mut Graph<T>, x: Var, bs: BlindSpot) -> Result<[Var; 4]> {
        let d = self.check_shift(g, x, bs)?;
        if d.h != d.w {
            return self.branch_features_sequential(g, x, bs);
        }
        let mut rotated = Vec::with_capacity(4);
        for (_, q) in BRANCHES {
            rotated.push(g.rotate90(x, q)?);
        }
        let batch = g.concat(&rotated, crate::autograd::Axis::Batch)?;
        let f = self
            .trunk
            .forward(g, &self.params, batch, Field::UpperHalfPlane, false)?;
        let f = g.shift_down(f, bs.shift())?;
        let mut out = Vec::with_capacity(4);
        for (i, (_, q)) in BRANCHES.iter().enumerate() {
            let part = g.batch_slice(f, i * d.n, d.n)?;
            out.push(g.rotate90(part, (4 - q) % 4)?);
        }
        Ok([out[0], out[1], out[2], out[3]])
    }

    /// Same result as [`BsnModel::branch_features`], one trunk pass per rotation.
    pub fn branch_features_sequential(
        &self,
        g: &mut Graph<T>,
        x: Var,
        bs: BlindSpot,
    ) -> Result<[Var; 4]> {
        self.check_shift(g, x, bs)?;
        let mut out = Vec::with_capacity(4);
        for (_, q) in BRANCHES {
            let r = g.rotate90(x, q)?;
            let f = self
                .trunk
                .forward(g, &self.params, r, Field::UpperHalfPlane, false)?;
            let f = g.shift_down(f, bs.shift())?;
            out.push(g.rotate90(f, (4 - q) % 4)?);
        }
        Ok([out[0], out[1], out[2], out[3]])
    }

    /// Applies the 1×1 head to branch features given in the order they should be concatenated.
    pub fn head(&self, g: &mut Graph<T>, branches: &[Var]) -> Result<Var> {
        let mut h = g.concat_channels(branches)?;
        let last = self.head.len() - 1;
        for (i, layer) in self.head.iter().enumerate() {
            let w = g.param(&self.params, layer.w);
            let b = g.param(&self.params, layer.b);
            h = g.conv2d(h, w, Some(b))?;
            if i < last {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(h)
    }

    /// Full prediction `F(x; s)` for blind spot `bs`. The same weights serve every `bs`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, bs: BlindSpot) -> Result<Var> {
        let branches = self.branch_features(g, x, bs)?;
        self.head(g, &branches)
    }

    /// Graph-free inference helper.
    pub fn denoise(&self, x: &Tensor<T>, bs: BlindSpot) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, xv, bs)?;
        Ok(g.value(y).clone())
    }

    /// The distillation student for this configuration, freshly initialised.
    pub fn to_nbsn(&self, seed: u64) -> Result<NbsnModel<T>> {
        NbsnModel::new(self.cfg, seed)
    }

    pub fn count_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Multiply-accumulates for one `h × w` image: four trunk passes plus the head.
    pub fn count_macs(&self, h: usize, w: usize) -> u64 {
        4 * self.trunk.macs(h, w) + self.head.iter().map(|c| c.macs(h, w)).sum::<u64>()
    }

    /// Rebuilds a model from a config and a parameter set in registration order.
    pub fn from_params(cfg: BsnConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = BsnModel::new(cfg, 0)?;
        check_param_layout(&model.params, &params)?;
        model.params = params;
        Ok(model)
    }

    pub fn cast<U: Float>(&self) -> BsnModel<U> {
        BsnModel {
            cfg: self.cfg,
            params: self.params.cast(),
            trunk: self.trunk.clone(),
            head: self.head.clone(),
        }
    }
}

/// Plain UNet with the trunk topology: no shifts, no rotations, no 1×1 head.
#[derive(Clone, Debug)]
pub struct NbsnModel<T: Float> {
    cfg: BsnConfig,
    params: ParamStore<T>,
    trunk: Trunk,
}

impl<T: Float> NbsnModel<T> {
    pub fn new(cfg: BsnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let trunk = Trunk::new(&cfg, cfg.input_channels, &mut params, &mut rng);
        init_output(&mut params, &trunk.decoder.last().expect("pool_levels ≥ 1")[1]);
        Ok(NbsnModel { cfg, params, trunk })
    }

    pub fn config(&self) -> &BsnConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let d = g.dims(x);
        if d.c != self.cfg.input_channels {
            return Err(Error::invalid(format!(
                "model expects {} channels, got {}",
                self.cfg.input_channels, d.c
            )));
        }
        self.cfg.check_spatial(d.h, d.w)?;
        self.trunk.forward(g, &self.params, x, Field::Full, true)
    }

    pub fn denoise(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn count_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn count_macs(&self, h: usize, w: usize) -> u64 {
        self.trunk.macs(h, w)
    }

    pub fn from_params(cfg: BsnConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = NbsnModel::new(cfg, 0)?;
        check_param_layout(&model.params, &params)?;
        model.params = params;
        Ok(model)
    }

    pub fn cast<U: Float>(&self) -> NbsnModel<U> {
        NbsnModel {
            cfg: self.cfg,
            params: self.params.cast(),
            trunk: self.trunk.clone(),
        }
    }
}

/// A model whose parameters an optimizer can update in place.
pub trait Trainable {
    fn params_mut(&mut self) -> &mut ParamStore<f32>;
}

impl Trainable for BsnModel<f32> {
    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }
}

impl Trainable for NbsnModel<f32> {
    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }
}

fn check_param_layout<T: Float>(expected: &ParamStore<T>, found: &ParamStore<T>) -> Result<()> {
    if expected.len() != found.len() {
        return Err(Error::shape(format!(
            "expected {} parameter tensors, found {}",
            expected.len(),
            found.len()
        )));
    }
    for (e, f) in expected.iter().zip(found.iter()) {
        if e.dims() != f.dims() || e.name != f.name {
            return Err(Error::CheckpointDims {
                name: f.name.clone(),
                found: f.dims().as_array(),
                expected: e.dims().as_array(),
            });
        }
    }
    Ok(())
}
