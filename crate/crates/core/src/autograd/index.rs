//! Index maps for pure data-movement ops (shifts, rotations, upsampling, pixel shuffles).
//!
//! Every such op is a gather: output element `i` copies source element `src[i]`, or is zero
//! when `src[i] == ZERO_FILL`. The gradient is the matching scatter-add, so all of these ops
//! share one exact backward.

use crate::error::{Error, Result};
use crate::tensor::{Dims, Float, Tensor};

pub(crate) const ZERO_FILL: u32 = u32::MAX;

/// Output dims plus, for every output element, the flat source offset.
#[derive(Clone, Debug)]
pub struct GatherMap {
    pub(crate) input: Dims,
    pub(crate) output: Dims,
    pub(crate) src: Vec<u32>,
}

impl GatherMap {
    fn build(input: Dims, output: Dims, f: impl Fn(usize, usize, usize, usize) -> Option<usize>) -> Self {
        let mut src = Vec::with_capacity(output.len());
        for n in 0..output.n {
            for c in 0..output.c {
                for y in 0..output.h {
                    for x in 0..output.w {
                        src.push(f(n, c, y, x).map_or(ZERO_FILL, |i| i as u32));
                    }
                }
            }
        }
        GatherMap { input, output, src }
    }

    pub fn output_dims(&self) -> Dims {
        self.output
    }

    pub fn apply<T: Float>(&self, x: &Tensor<T>) -> Tensor<T> {
        debug_assert_eq!(x.dims(), self.input);
        let xd = x.data();
        let data = self
            .src
            .iter()
            .map(|&s| if s == ZERO_FILL { T::zero() } else { xd[s as usize] })
            .collect();
        Tensor::from_vec(self.output, data).expect("gather map dims are consistent")
    }

    /// Scatter-add of an output-shaped gradient back onto the input.
    pub(crate) fn scatter_add<T: Float>(&self, grad_out: &Tensor<T>, grad_in: &mut Tensor<T>) {
        let gi = grad_in.data_mut();
        for (&s, &g) in self.src.iter().zip(grad_out.data()) {
            if s != ZERO_FILL {
                gi[s as usize] += g;
            }
        }
    }

    /// Rows move down by `d`; the top `d` rows are zero and the bottom `d` are dropped.
    pub fn shift_down(input: Dims, d: usize) -> Result<Self> {
        if d > input.h {
            return Err(Error::invalid(format!(
                "shift of {d} rows exceeds height {}",
                input.h
            )));
        }
        Ok(Self::build(input, input, |n, c, y, x| {
            (y >= d).then(|| input.index(n, c, y - d, x))
        }))
    }

    /// Clockwise rotation by `quarter_turns · 90°`; one turn maps `in[i, j]` to `out[j, H−1−i]`.
    pub fn rotate90(input: Dims, quarter_turns: usize) -> Result<Self> {
        let Dims { n, c, h, w } = input;
        Ok(match quarter_turns {
            0 => Self::build(input, input, |n, c, y, x| Some(input.index(n, c, y, x))),
            1 => Self::build(input, Dims::new(n, c, w, h), |n, c, y, x| {
                Some(input.index(n, c, h - 1 - x, y))
            }),
            2 => Self::build(input, input, |n, c, y, x| {
                Some(input.index(n, c, h - 1 - y, w - 1 - x))
            }),
            3 => Self::build(input, Dims::new(n, c, w, h), |n, c, y, x| {
                Some(input.index(n, c, x, w - 1 - y))
            }),
            q => {
                return Err(Error::invalid(format!(
                    "quarter turns must be in 0..=3, got {q}"
                )))
            }
        })
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample_nearest2(input: Dims) -> Self {
        let out = Dims::new(input.n, input.c, input.h * 2, input.w * 2);
        Self::build(input, out, |n, c, y, x| Some(input.index(n, c, y / 2, x / 2)))
    }

    fn check_divisible(input: Dims, f: usize) -> Result<()> {
        if f == 0 || input.h % f != 0 || input.w % f != 0 {
            return Err(Error::invalid(format!(
                "spatial dims {}x{} are not divisible by factor {f}",
                input.h, input.w
            )));
        }
        Ok(())
    }

    /// Pixel-shuffle downsampling: tile `(a, b)` of the output holds `x[.., a::f, b::f]`.
    pub fn pd(input: Dims, f: usize) -> Result<Self> {
        Self::check_divisible(input, f)?;
        let (th, tw) = (input.h / f, input.w / f);
        Ok(Self::build(input, input, |n, c, y, x| {
            let (a, yy, b, xx) = (y / th, y % th, x / tw, x % tw);
            Some(input.index(n, c, yy * f + a, xx * f + b))
        }))
    }

    /// Exact inverse of [`GatherMap::pd`].
    pub fn pd_inverse(input: Dims, f: usize) -> Result<Self> {
        Self::check_divisible(input, f)?;
        let (th, tw) = (input.h / f, input.w / f);
        Ok(Self::build(input, input, |n, c, y, x| {
            let (a, yy, b, xx) = (y % f, y / f, x % f, x / f);
            Some(input.index(n, c, a * th + yy, b * tw + xx))
        }))
    }

    /// Splits an `f × f` mosaic of tiles into `f²` batch items per image (row-major tile order).
    pub fn tiles_to_batch(input: Dims, f: usize) -> Result<Self> {
        Self::check_divisible(input, f)?;
        let (th, tw) = (input.h / f, input.w / f);
        let out = Dims::new(input.n * f * f, input.c, th, tw);
        Ok(Self::build(input, out, |m, c, y, x| {
            let (n, t) = (m / (f * f), m % (f * f));
            let (a, b) = (t / f, t % f);
            Some(input.index(n, c, a * th + y, b * tw + x))
        }))
    }

    /// Exact inverse of [`GatherMap::tiles_to_batch`].
    pub fn batch_to_tiles(input: Dims, f: usize) -> Result<Self> {
        if f == 0 || input.n % (f * f) != 0 {
            return Err(Error::invalid(format!(
                "batch {} is not a multiple of {f}²",
                input.n
            )));
        }
        let out = Dims::new(input.n / (f * f), input.c, input.h * f, input.w * f);
        Ok(Self::build(input, out, |n, c, y, x| {
            let (a, yy, b, xx) = (y / input.h, y % input.h, x / input.w, x % input.w);
            Some(input.index(n * f * f + a * f + b, c, yy, xx))
        }))
    }

    /// Batch items `start..start + len`.
    pub fn batch_slice(input: Dims, start: usize, len: usize) -> Result<Self> {
        if start + len > input.n || len == 0 {
            return Err(Error::invalid(format!(
                "batch slice {start}..{} out of range for batch {}",
                start + len,
                input.n
            )));
        }
        let out = Dims::new(len, input.c, input.h, input.w);
        Ok(Self::build(input, out, |n, c, y, x| {
            Some(input.index(start + n, c, y, x))
        }))
    }

    /// Composition `other ∘ self`: apply `self` first, then `other`.
    pub fn then(&self, other: &GatherMap) -> Result<Self> {
        if other.input != self.output {
            return Err(Error::shape(format!(
                "cannot compose {:?} into {:?}",
                self.output.as_array(),
                other.input.as_array()
            )));
        }
        let src = other
            .src
            .iter()
            .map(|&s| if s == ZERO_FILL { ZERO_FILL } else { self.src[s as usize] })
            .collect();
        Ok(GatherMap {
            input: self.input,
            output: other.output,
            src,
        })
    }
}
