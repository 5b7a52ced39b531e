//! Pixel-shuffle downsampling (PD) and the PD-wrapped blind-spot baseline.
//!
//! The baseline runs the shifted-conv BSN with `k = 1` on each stride-`f` sub-image
//! independently, then scatters the predictions back to their original positions.

use std::sync::Arc;

use crate::autograd::{GatherMap, Graph, Var};
use crate::bsn::{BlindSpot, BsnModel};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Stride factor of a pixel-shuffle downsampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct PdFactor(usize);

impl PdFactor {
    pub const TRAIN: PdFactor = PdFactor(5);
    pub const INFER: PdFactor = PdFactor(2);

    pub fn new(f: usize) -> Result<Self> {
        if f == 0 {
            return Err(Error::invalid("PD factor must be at least 1"));
        }
        Ok(PdFactor(f))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl TryFrom<usize> for PdFactor {
    type Error = Error;

    fn try_from(f: usize) -> Result<Self> {
        PdFactor::new(f)
    }
}

impl From<PdFactor> for usize {
    fn from(f: PdFactor) -> usize {
        f.0
    }
}

impl std::str::FromStr for PdFactor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let f = s
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::invalid(format!("not a PD factor: `{s}`")))?;
        PdFactor::new(f)
    }
}

impl std::fmt::Display for PdFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn pd<T: Float>(x: &Tensor<T>, f: PdFactor) -> Result<Tensor<T>> {
    Ok(GatherMap::pd(x.dims(), f.0)?.apply(x))
}

pub fn pd_inverse<T: Float>(y: &Tensor<T>, f: PdFactor) -> Result<Tensor<T>> {
    Ok(GatherMap::pd_inverse(y.dims(), f.0)?.apply(y))
}

/// `PD⁻¹(B(PD(x)))` with `B` the `k = 1` BSN applied tile by tile.
pub fn apbsn_forward<T: Float>(
    model: &BsnModel<T>,
    g: &mut Graph<T>,
    x: Var,
    f: PdFactor,
) -> Result<Var> {
    let d = g.dims(x);
    let split = GatherMap::pd(d, f.0)?.then(&GatherMap::tiles_to_batch(d, f.0)?)?;
    let tiles = split.output_dims();
    model.config().check_spatial(tiles.h, tiles.w).map_err(|e| {
        Error::invalid(format!("PD factor {f} on {}x{}: {e}", d.h, d.w))
    })?;
    let merge = GatherMap::batch_to_tiles(tiles, f.0)?.then(&GatherMap::pd_inverse(d, f.0)?)?;
    let t = g.gather(x, Arc::new(split))?;
    let y = model.forward(g, t, BlindSpot::new(1)?)?;
    g.gather(y, Arc::new(merge))
}

/// Mean absolute error between the PD-wrapped prediction and the noisy input itself.
pub fn apbsn_loss<T: Float>(
    model: &BsnModel<T>,
    g: &mut Graph<T>,
    x: Var,
    f: PdFactor,
) -> Result<Var> {
    let y = apbsn_forward(model, g, x, f)?;
    g.l1_loss(y, x)
}

pub fn apbsn_denoise<T: Float>(model: &BsnModel<T>, x: &Tensor<T>, f: PdFactor) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = apbsn_forward(model, &mut g, xv, f)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn documented_tiles() {
        let d = Dims::new(1, 1, 4, 4);
        let x = Tensor::<f64>::from_fn(d, |_, _, y, x| (y * 4 + x) as f64);
        let y = pd(&x, PdFactor::new(2).unwrap()).unwrap();
        assert_eq!(y.crop(0, 0, 2, 2).unwrap().data(), &[0.0, 2.0, 8.0, 10.0]);
        assert_eq!(y.crop(0, 2, 2, 2).unwrap().data(), &[1.0, 3.0, 9.0, 11.0]);
        assert_eq!(y.crop(2, 0, 2, 2).unwrap().data(), &[4.0, 6.0, 12.0, 14.0]);
    }

    #[test]
    fn factor_zero_rejected() {
        assert!(PdFactor::new(0).is_err());
        assert!(pd(&Tensor::<f32>::zeros(Dims::new(1, 1, 6, 6)), PdFactor::new(4).unwrap()).is_err());
    }
}
