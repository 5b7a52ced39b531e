use serde::Serialize;

use crate::autograd::{Graph, ParamStore};
use crate::bsn::{BlindSpot, BsnModel, NbsnModel};
use crate::error::{Error, Result};
use crate::pd::{apbsn_forward, PdFactor};
use crate::tensor::{Dims, Float, Tensor};

/// Which network the receptive field is measured through.
#[derive(Clone, Copy)]
pub enum ErfPipeline<'a, T: Float> {
    Atbsn(&'a BsnModel<T>, BlindSpot),
    Nbsn(&'a NbsnModel<T>),
    /// PD with the given factor around the `k = 1` BSN.
    Apbsn(&'a BsnModel<T>, PdFactor),
}

/// Normalized input-gradient magnitude of one output pixel.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErfMap {
    pub height: usize,
    pub width: usize,
    pub target: (usize, usize),
    /// Row-major, non-negative; sums to 1 unless the raw gradient was identically zero.
    pub grid: Vec<f64>,
}

impl ErfMap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.grid[y * self.width + x]
    }

    pub fn total(&self) -> f64 {
        self.grid.iter().sum()
    }

    /// Mass on the `k × k` square centred on the target (clipped at borders).
    pub fn mass_in_square(&self, k: usize) -> f64 {
        if k == 0 {
            return 0.0;
        }
        let r = k / 2;
        let (i, j) = self.target;
        let mut m = 0.0;
        for y in i.saturating_sub(r)..(i + r + 1).min(self.height) {
            for x in j.saturating_sub(r)..(j + r + 1).min(self.width) {
                m += self.at(y, x);
            }
        }
        m
    }

    /// Mass on pixels congruent to the target modulo `f` in both coordinates.
    pub fn mass_on_subgrid(&self, f: usize) -> f64 {
        let (i, j) = self.target;
        let mut m = 0.0;
        for y in (i % f..self.height).step_by(f) {
            for x in (j % f..self.width).step_by(f) {
                m += self.at(y, x);
            }
        }
        m
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(
            Dims::new(1, 1, self.height, self.width),
            self.grid.iter().map(|&v| v as f32).collect(),
        )
        .expect("grid matches dims")
    }
}

/// Backpropagates the channel mean of output pixel `(i, j)` of batch item 0 to the input.
pub fn erf_map<T: Float>(
    pipeline: ErfPipeline<'_, T>,
    image: &Tensor<T>,
    i: usize,
    j: usize,
) -> Result<ErfMap> {
    let d = image.dims();
    if i >= d.h || j >= d.w {
        return Err(Error::invalid(format!(
            "pixel ({i},{j}) outside {}x{} image",
            d.h, d.w
        )));
    }
    let mut g = Graph::frozen_params();
    let x = g.input(image.clone());
    let y = match pipeline {
        ErfPipeline::Atbsn(m, bs) => m.forward(&mut g, x, bs)?,
        ErfPipeline::Nbsn(m) => m.forward(&mut g, x)?,
        ErfPipeline::Apbsn(m, f) => apbsn_forward(m, &mut g, x, f)?,
    };
    let od = g.dims(y);
    let wgt = T::from_f64(1.0 / od.c as f64);
    let sel = Tensor::from_fn(od, |n, _, y, x| {
        if n == 0 && (y, x) == (i, j) {
            wgt
        } else {
            T::zero()
        }
    });
    let root = g.weighted_sum(y, sel)?;
    g.backward(root, &mut ParamStore::new())?;
    let grad = g.grad(x).expect("input is tracked");
    let mut grid = vec![0.0; d.plane()];
    for c in 0..d.c {
        for y in 0..d.h {
            for x in 0..d.w {
                grid[y * d.w + x] += grad.at(0, c, y, x).as_f64().abs();
            }
        }
    }
    let total: f64 = grid.iter().sum();
    if total > 0.0 {
        grid.iter_mut().for_each(|v| *v /= total);
    }
    Ok(ErfMap {
        height: d.h,
        width: d.w,
        target: (i, j),
        grid,
    })
}
