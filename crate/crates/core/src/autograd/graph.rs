//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape index order is already a topological
//! order; [`Graph::backward`] walks it in reverse, visiting every node once.

use std::sync::Arc;

use super::conv::{self, Padding};
use super::index::GatherMap;
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Float, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Batch,
    Channel,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Gather(Var, Arc<GatherMap>),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: Padding,
    },
    AvgPool2(Var),
    Concat(Vec<Var>, Axis),
    LeakyRelu(Var, T),
    Add(Var, Var),
    Scale(Var, T),
    L1Loss(Var, Var),
    Sum(Var),
    WeightedSum(Var, Tensor<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    track_params: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            track_params: true,
        }
    }

    /// A graph whose parameter leaves are treated as constants, for input-only gradients.
    pub fn frozen_params() -> Self {
        Graph {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> Dims {
        self.nodes[v.0].value.dims()
    }

    /// Gradient of the last backward root with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked and readable via [`Graph::grad`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf bound to a stored parameter; backward accumulates into the store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let rg = self.track_params;
        self.push(store.get(id).value.clone(), Op::Param(id), rg)
    }

    /// Applies a precomputed data-movement map.
    pub fn gather(&mut self, x: Var, map: Arc<GatherMap>) -> Result<Var> {
        if map.input != self.dims(x) {
            return Err(Error::shape(format!(
                "gather expects {:?}, got {:?}",
                map.input.as_array(),
                self.dims(x).as_array()
            )));
        }
        let value = map.apply(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(value, Op::Gather(x, map), rg))
    }

    pub fn shift_down(&mut self, x: Var, d: usize) -> Result<Var> {
        let map = GatherMap::shift_down(self.dims(x), d)?;
        self.gather(x, Arc::new(map))
    }

    pub fn rotate90(&mut self, x: Var, quarter_turns: usize) -> Result<Var> {
        let map = GatherMap::rotate90(self.dims(x), quarter_turns)?;
        self.gather(x, Arc::new(map))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let map = GatherMap::upsample_nearest2(self.dims(x));
        self.gather(x, Arc::new(map)).expect("map built from the input dims")
    }

    pub fn batch_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let map = GatherMap::batch_slice(self.dims(x), start, len)?;
        self.gather(x, Arc::new(map))
    }

    fn conv_checked(&mut self, x: Var, w: Var, b: Option<Var>, pad: Padding) -> Result<Var> {
        let (xd, wd) = (self.dims(x), self.dims(w));
        if wd.c != xd.c {
            return Err(Error::invalid(format!(
                "conv weight expects {} input channels, got {}",
                wd.c, xd.c
            )));
        }
        if wd.h != wd.w || wd.h % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel must be square with odd size, got {}x{}",
                wd.h, wd.w
            )));
        }
        if let Some(b) = b {
            if self.dims(b) != Dims::new(1, wd.n, 1, 1) {
                return Err(Error::shape(format!(
                    "bias dims {:?} do not match {} output channels",
                    self.dims(b).as_array(),
                    wd.n
                )));
            }
        }
        let value = conv::forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            pad,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv { x, w, b, pad }, rg))
    }

    /// Zero-padded, same-size cross-correlation with an odd square kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let k = self.dims(w).h;
        self.conv_checked(x, w, b, Padding::same(k))
    }

    /// Convolution whose receptive field only reaches rows at or above the output row.
    ///
    /// Pads `⌊h/2⌋` zero rows on top, applies the same-size convolution, and crops the last
    /// `⌊h/2⌋` rows; realised as a single convolution with all vertical padding on top.
    pub fn shifted_conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let k = self.dims(w).h;
        self.conv_checked(x, w, b, Padding::upward(k))
    }

    /// Non-overlapping 2×2 average pooling.
    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let d = self.dims(x);
        if d.h % 2 != 0 || d.w % 2 != 0 {
            return Err(Error::invalid(format!(
                "2x2 pooling needs even spatial dims, got {}x{}",
                d.h, d.w
            )));
        }
        let od = Dims::new(d.n, d.c, d.h / 2, d.w / 2);
        let src = self.value(x);
        let quarter = T::from_f64(0.25);
        let value = Tensor::from_fn(od, |n, c, y, x| {
            (src.at(n, c, 2 * y, 2 * x)
                + src.at(n, c, 2 * y, 2 * x + 1)
                + src.at(n, c, 2 * y + 1, 2 * x)
                + src.at(n, c, 2 * y + 1, 2 * x + 1))
                * quarter
        });
        let rg = self.rg(x);
        Ok(self.push(value, Op::AvgPool2(x), rg))
    }

    /// 2×2 average pooling after pushing one zero row in at the top.
    pub fn shifted_avgpool2(&mut self, x: Var) -> Result<Var> {
        let d = self.dims(x);
        if d.h % 2 != 0 || d.w % 2 != 0 {
            return Err(Error::invalid(format!(
                "2x2 pooling needs even spatial dims, got {}x{}",
                d.h, d.w
            )));
        }
        let s = self.shift_down(x, 1)?;
        self.avgpool2(s)
    }

    pub fn concat(&mut self, xs: &[Var], axis: Axis) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat of an empty list"))?;
        let d0 = self.dims(first);
        let mut total = 0;
        for &v in xs {
            let d = self.dims(v);
            let ok = match axis {
                Axis::Channel => (d.n, d.h, d.w) == (d0.n, d0.h, d0.w),
                Axis::Batch => (d.c, d.h, d.w) == (d0.c, d0.h, d0.w),
            };
            if !ok {
                return Err(Error::invalid(format!(
                    "concat along {axis:?}: {:?} vs {:?}",
                    d.as_array(),
                    d0.as_array()
                )));
            }
            total += match axis {
                Axis::Channel => d.c,
                Axis::Batch => d.n,
            };
        }
        let value = match axis {
            Axis::Batch => {
                let parts: Vec<Tensor<T>> = xs.iter().map(|&v| self.value(v).clone()).collect();
                Tensor::stack_batch(&parts)?
            }
            Axis::Channel => {
                let od = Dims::new(d0.n, total, d0.h, d0.w);
                let mut data = Vec::with_capacity(od.len());
                let p = d0.plane();
                for n in 0..d0.n {
                    for &v in xs {
                        let t = self.value(v);
                        let c = t.dims().c;
                        data.extend_from_slice(&t.data()[n * c * p..(n + 1) * c * p]);
                    }
                }
                Tensor::from_vec(od, data)?
            }
        };
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::Concat(xs.to_vec(), axis), rg))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        self.concat(xs, Axis::Channel)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        let value = self
            .value(x)
            .map(|v| if v >= T::zero() { v } else { s * v });
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu(x, s), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// `mean |a − b|` as a 1-element tensor.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.expect_same_dims(tb)?;
        let total: T = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let value = Tensor::scalar(total / T::from_f64(ta.len() as f64));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::L1Loss(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// `Σ weights · x` as a 1-element tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let t = self.value(x);
        t.expect_same_dims(&weights)?;
        let s = t
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, weights), rg))
    }

    /// Reverse-mode sweep from a scalar root.
    ///
    /// Parameter gradients are added to `store` (they accumulate across calls until the caller
    /// zeroes them); gradients of every reached node are readable through [`Graph::grad`].
    pub fn backward(&mut self, root: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.dims(root).len() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got dims {:?}",
                self.dims(root).as_array()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, store)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accum<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut Tensor<T>> {
        if !self.rg(v) {
            return None;
        }
        let d = self.dims(v);
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(d)))
    }

    fn propagate(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        store: &mut ParamStore<T>,
    ) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => store.get_mut(*id).grad.add_assign(g)?,
            Op::Gather(x, map) => {
                if let Some(gx) = self.accum(grads, *x) {
                    map.scatter_add(g, gx);
                }
            }
            Op::Conv { x, w, b, pad } => {
                // Each parent slot is taken out so the three accumulators can be borrowed at once.
                let mut take = |v: Var| -> Option<Tensor<T>> {
                    self.rg(v)
                        .then(|| grads[v.0].take().unwrap_or_else(|| Tensor::zeros(self.dims(v))))
                };
                let mut gx = take(*x);
                let mut gw = take(*w);
                let mut gb = b.and_then(&mut take);
                conv::backward(
                    self.value(*x),
                    self.value(*w),
                    *pad,
                    g,
                    gx.as_mut(),
                    gw.as_mut(),
                    gb.as_mut(),
                );
                for (v, t) in [(Some(*x), gx), (Some(*w), gw), (*b, gb)] {
                    if let (Some(v), Some(t)) = (v, t) {
                        grads[v.0] = Some(t);
                    }
                }
            }
            Op::AvgPool2(x) => {
                if let Some(gx) = self.accum(grads, *x) {
                    let quarter = T::from_f64(0.25);
                    let od = g.dims();
                    for n in 0..od.n {
                        for c in 0..od.c {
                            for y in 0..od.h {
                                for xx in 0..od.w {
                                    let v = g.at(n, c, y, xx) * quarter;
                                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                        let d = gx.dims();
                                        let idx = d.index(n, c, 2 * y + dy, 2 * xx + dx);
                                        gx.data_mut()[idx] += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let d0 = g.dims();
                let p = d0.plane();
                match axis {
                    Axis::Channel => {
                        let mut c_off = 0;
                        for &v in xs {
                            let c = self.dims(v).c;
                            if let Some(gv) = self.accum(grads, v) {
                                for n in 0..d0.n {
                                    let src = &g.data()[(n * d0.c + c_off) * p..(n * d0.c + c_off + c) * p];
                                    let dst = &mut gv.data_mut()[n * c * p..(n + 1) * c * p];
                                    for (d, &s) in dst.iter_mut().zip(src) {
                                        *d += s;
                                    }
                                }
                            }
                            c_off += c;
                        }
                    }
                    Axis::Batch => {
                        let mut off = 0;
                        for &v in xs {
                            let len = self.dims(v).len();
                            if let Some(gv) = self.accum(grads, v) {
                                for (d, &s) in gv.data_mut().iter_mut().zip(&g.data()[off..off + len]) {
                                    *d += s;
                                }
                            }
                            off += len;
                        }
                    }
                }
            }
            Op::LeakyRelu(x, s) => {
                let s = *s;
                let xv = self.value(*x);
                if let Some(gx) = self.accum(grads, *x) {
                    for ((d, &gi), &xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *d += if xi >= T::zero() { gi } else { s * gi };
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.accum(grads, v) {
                        gv.add_assign(g)?;
                    }
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                if let Some(gx) = self.accum(grads, *x) {
                    for (d, &gi) in gx.data_mut().iter_mut().zip(g.data()) {
                        *d += s * gi;
                    }
                }
            }
            Op::L1Loss(a, b) => {
                let go = g.item()?;
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scale = go / T::from_f64(ta.len() as f64);
                let sign = |d: T| {
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                };
                if let Some(ga) = self.accum(grads, *a) {
                    for ((o, &x), &y) in ga.data_mut().iter_mut().zip(ta.data()).zip(tb.data()) {
                        *o += sign(x - y);
                    }
                }
                if let Some(gb) = self.accum(grads, *b) {
                    for ((o, &x), &y) in gb.data_mut().iter_mut().zip(ta.data()).zip(tb.data()) {
                        *o -= sign(x - y);
                    }
                }
            }
            Op::Sum(x) => {
                let go = g.item()?;
                if let Some(gx) = self.accum(grads, *x) {
                    gx.data_mut().iter_mut().for_each(|d| *d += go);
                }
            }
            Op::WeightedSum(x, w) => {
                let go = g.item()?;
                if let Some(gx) = self.accum(grads, *x) {
                    for (d, &wi) in gx.data_mut().iter_mut().zip(w.data()) {
                        *d += go * wi;
                    }
                }
            }
        }
        Ok(())
    }
}
