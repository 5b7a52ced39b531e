use crate::error::Result;
use crate::tensor::{Float, Tensor};

/// PSNR reported for (near-)identical images.
pub const PSNR_CAP: f64 = 100.0;

pub fn psnr<T: Float>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    a.expect_same_dims(b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const WIN: usize = 11;
const WIN_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> [f64; WIN] {
    let mut w = [0.0; WIN];
    let c = (WIN / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * WIN_SIGMA * WIN_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering of one `h × w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64; WIN]) -> Vec<f64> {
    let (oh, ow) = (h - WIN + 1, w - WIN + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WIN).map(|t| k[t] * p[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WIN).map(|t| k[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over every window position, channel and batch item, for data range 1.
///
/// Only windows fully inside the image are used, so both sides must be at least 11.
pub fn ssim<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_dims(b)?;
    let d = a.dims();
    if d.h < WIN || d.w < WIN {
        return Err(crate::Error::invalid(format!(
            "SSIM needs at least {WIN}x{WIN} images, got {}x{}",
            d.h, d.w
        )));
    }
    let k = gaussian_window();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let plane = d.plane();
    let mut total = 0.0;
    let mut count = 0usize;
    for (pa, pb) in a.data().chunks(plane).zip(b.data().chunks(plane)) {
        let x: Vec<f64> = pa.iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = pb.iter().map(|v| v.as_f64()).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] =
            [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, d.h, d.w, &k));
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean PSNR (peak 1) and SSIM of `restore(noisy)` against `clean` over a set of pairs.
pub fn mean_quality<T: Float>(
    pairs: &[(Tensor<T>, Tensor<T>)],
    mut restore: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(crate::Error::invalid("no image pairs to evaluate"));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for (clean, noisy) in pairs {
        let out = restore(noisy)?;
        p += psnr(&out, clean, 1.0)?;
        s += ssim(&out, clean)?;
    }
    let n = pairs.len() as f64;
    Ok((p / n, s / n))
}
