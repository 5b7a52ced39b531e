//! 2-D convolution kernels (im2col + GEMM) with explicit per-side zero padding.

use crate::tensor::{Dims, Float, Tensor};

/// Zero padding applied to each side before a stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    /// Symmetric padding that keeps the spatial size for an odd `k × k` kernel.
    pub fn same(k: usize) -> Self {
        let p = k / 2;
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Same-size padding whose rows are all moved to the top: equivalent to padding `k/2` zero
    /// rows on top, convolving with same padding, then cropping the last `k/2` rows.
    pub fn upward(k: usize) -> Self {
        let p = k / 2;
        Padding {
            top: 2 * p,
            bottom: 0,
            left: p,
            right: p,
        }
    }

    fn is_zero(&self) -> bool {
        self.top == 0 && self.bottom == 0 && self.left == 0 && self.right == 0
    }
}

pub(crate) fn output_dims(x: Dims, w: Dims, pad: Padding) -> Dims {
    Dims::new(
        x.n,
        w.n,
        x.h + pad.top + pad.bottom + 1 - w.h,
        x.w + pad.left + pad.right + 1 - w.w,
    )
}

/// Unrolls one image `[c, h, w]` into a `[c·kh·kw, oh·ow]` matrix.
fn im2col<T: Float>(img: &[T], x: Dims, kh: usize, kw: usize, pad: Padding, out: Dims, cols: &mut [T]) {
    let (oh, ow) = (out.h, out.w);
    let p = oh * ow;
    let mut row = 0;
    for ci in 0..x.c {
        let plane = &img[ci * x.plane()..(ci + 1) * x.plane()];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                // Valid output columns: 0 <= ox + kx - left < w.
                let ox_lo = pad.left.saturating_sub(kx).min(ow);
                let ox_hi = (x.w + pad.left).saturating_sub(kx).min(ow).max(ox_lo);
                for oy in 0..oh {
                    let d = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = oy + ky;
                    if iy < pad.top || iy - pad.top >= x.h {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(iy - pad.top) * x.w..(iy - pad.top + 1) * x.w];
                    d[..ox_lo].fill(T::zero());
                    d[ox_hi..].fill(T::zero());
                    if ox_hi > ox_lo {
                        let ix_lo = ox_lo + kx - pad.left;
                        d[ox_lo..ox_hi].copy_from_slice(&src[ix_lo..ix_lo + (ox_hi - ox_lo)]);
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column matrix back onto an image gradient.
fn col2im<T: Float>(cols: &[T], x: Dims, kh: usize, kw: usize, pad: Padding, out: Dims, img: &mut [T]) {
    let (oh, ow) = (out.h, out.w);
    let p = oh * ow;
    let mut row = 0;
    for ci in 0..x.c {
        let plane = &mut img[ci * x.plane()..(ci + 1) * x.plane()];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &cols[row * p..(row + 1) * p];
                let ox_lo = pad.left.saturating_sub(kx).min(ow);
                let ox_hi = (x.w + pad.left).saturating_sub(kx).min(ow).max(ox_lo);
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < pad.top || iy - pad.top >= x.h || ox_hi == ox_lo {
                        continue;
                    }
                    let dst = &mut plane[(iy - pad.top) * x.w..(iy - pad.top + 1) * x.w];
                    let ix_lo = ox_lo + kx - pad.left;
                    let s = &src[oy * ow + ox_lo..oy * ow + ox_hi];
                    for (d, &v) in dst[ix_lo..ix_lo + s.len()].iter_mut().zip(s) {
                        *d += v;
                    }
                }
                row += 1;
            }
        }
    }
}

fn is_pointwise(w: Dims, pad: Padding) -> bool {
    w.h == 1 && w.w == 1 && pad.is_zero()
}

/// Forward cross-correlation. `w` is laid out `[out_ch, in_ch, kh, kw]`, `b` is `[1, out_ch, 1, 1]`.
pub(crate) fn forward<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, pad: Padding) -> Tensor<T> {
    let (xd, wd) = (x.dims(), w.dims());
    let od = output_dims(xd, wd, pad);
    let mut out = Tensor::zeros(od);
    let k = wd.c * wd.h * wd.w;
    let p = od.plane();
    let pointwise = is_pointwise(wd, pad);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    let in_per = xd.c * xd.plane();
    let out_per = od.c * p;
    for n in 0..xd.n {
        let img = &x.data()[n * in_per..(n + 1) * in_per];
        let colp = if pointwise {
            img.as_ptr()
        } else {
            im2col(img, xd, wd.h, wd.w, pad, od, &mut cols);
            cols.as_ptr()
        };
        let o = &mut out.data_mut()[n * out_per..(n + 1) * out_per];
        if let Some(b) = b {
            for (co, chunk) in o.chunks_mut(p).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        // out[co, p] = sum_k w[co, k] * cols[k, p]
        unsafe {
            T::gemm(
                od.c,
                k,
                p,
                T::one(),
                wd_ptr(w),
                k as isize,
                1,
                colp,
                p as isize,
                1,
                beta,
                o.as_mut_ptr(),
                p as isize,
                1,
            );
        }
    }
    out
}

fn wd_ptr<T: Float>(w: &Tensor<T>) -> *const T {
    w.data().as_ptr()
}

/// Gradients of [`forward`]. Each requested accumulator is added to, not overwritten.
pub(crate) fn backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    pad: Padding,
    grad_out: &Tensor<T>,
    mut grad_x: Option<&mut Tensor<T>>,
    mut grad_w: Option<&mut Tensor<T>>,
    mut grad_b: Option<&mut Tensor<T>>,
) {
    let (xd, wd, od) = (x.dims(), w.dims(), grad_out.dims());
    let k = wd.c * wd.h * wd.w;
    let p = od.plane();
    let pointwise = is_pointwise(wd, pad);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = if pointwise || grad_x.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    let in_per = xd.c * xd.plane();
    let out_per = od.c * p;
    for n in 0..xd.n {
        let go = &grad_out.data()[n * out_per..(n + 1) * out_per];
        if let Some(gb) = grad_b.as_deref_mut() {
            for (co, chunk) in go.chunks(p).enumerate() {
                gb.data_mut()[co] += chunk.iter().copied().sum::<T>();
            }
        }
        let img = &x.data()[n * in_per..(n + 1) * in_per];
        if let Some(gw) = grad_w.as_deref_mut() {
            let colp = if pointwise {
                img.as_ptr()
            } else {
                im2col(img, xd, wd.h, wd.w, pad, od, &mut cols);
                cols.as_ptr()
            };
            // gw[co, k] += sum_p go[co, p] * cols[k, p]
            unsafe {
                T::gemm(
                    od.c,
                    p,
                    k,
                    T::one(),
                    go.as_ptr(),
                    p as isize,
                    1,
                    colp,
                    1,
                    p as isize,
                    T::one(),
                    gw.data_mut().as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
        }
        if let Some(gx) = grad_x.as_deref_mut() {
            let gximg = &mut gx.data_mut()[n * in_per..(n + 1) * in_per];
            // dcols[k, p] = sum_co w[co, k] * go[co, p]
            let (dst, beta) = if pointwise {
                (gximg.as_mut_ptr(), T::one())
            } else {
                (dcols.as_mut_ptr(), T::zero())
            };
            unsafe {
                T::gemm(
                    k,
                    od.c,
                    p,
                    T::one(),
                    wd_ptr(w),
                    1,
                    k as isize,
                    go.as_ptr(),
                    p as isize,
                    1,
                    beta,
                    dst,
                    p as isize,
                    1,
                );
            }
            if !pointwise {
                col2im(&dcols, xd, wd.h, wd.w, pad, od, gximg);
            }
        }
    }
}

/// Direct-loop reference used only by tests.
#[cfg(test)]
pub(crate) fn naive_forward(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, pad: Padding) -> Tensor<f64> {
    let (xd, wd) = (x.dims(), w.dims());
    let od = output_dims(xd, wd, pad);
    Tensor::from_fn(od, |n, co, oy, ox| {
        let mut acc = b.map_or(0.0, |b| b.data()[co]);
        for ci in 0..xd.c {
            for ky in 0..wd.h {
                for kx in 0..wd.w {
                    let iy = (oy + ky) as isize - pad.top as isize;
                    let ix = (ox + kx) as isize - pad.left as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < xd.h && (ix as usize) < xd.w {
                        acc += w.at(co, ci, ky, kx) * x.at(n, ci, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}
