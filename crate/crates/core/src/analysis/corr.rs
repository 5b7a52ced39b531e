use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Float, Tensor};

/// Fewest residual samples `noise_correlation` accepts.
pub const MIN_SAMPLES: usize = 10_000;

/// Pearson correlation of noise residuals at every offset with `|δ|∞ ≤ radius`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseCorrMap {
    pub radius: usize,
    /// Row-major `(2R+1)²` grid; entry `(R + dy, R + dx)` is the offset `(dy, dx)`.
    pub grid: Vec<f64>,
}

impl NoiseCorrMap {
    pub fn edge(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn get(&self, dy: isize, dx: isize) -> f64 {
        let r = self.radius as isize;
        assert!(dy.abs() <= r && dx.abs() <= r, "offset ({dy},{dx}) outside radius {r}");
        self.grid[((dy + r) * (2 * r + 1) + dx + r) as usize]
    }

    /// Largest `|corr|` over offsets with Chebyshev norm strictly greater than `lag`.
    pub fn max_abs_beyond(&self, lag: usize) -> f64 {
        let r = self.radius as isize;
        let mut m = 0.0f64;
        for dy in -r..=r {
            for dx in -r..=r {
                if dy.unsigned_abs().max(dx.unsigned_abs()) > lag {
                    m = m.max(self.get(dy, dx).abs());
                }
            }
        }
        m
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let e = self.edge();
        Tensor::from_vec(Dims::new(1, 1, e, e), self.grid.iter().map(|&v| v as f32).collect())
            .expect("grid is (2R+1)²")
    }
}

/// Sums needed for one offset, accumulated over every valid position.
#[derive(Default)]
struct Moments {
    n: usize,
    a: f64,
    b: f64,
    aa: f64,
    bb: f64,
    ab: f64,
}

fn offset_moments(res: &[Tensor<f64>], dy: isize, dx: isize) -> Moments {
    let mut m = Moments::default();
    // Two passes: means first, then centred products.
    for r in res {
        for_each_pair(r, dy, dx, |a, b| {
            m.n += 1;
            m.a += a;
            m.b += b;
        });
    }
    let (ma, mb) = (m.a / m.n as f64, m.b / m.n as f64);
    for r in res {
        for_each_pair(r, dy, dx, |a, b| {
            let (ca, cb) = (a - ma, b - mb);
            m.aa += ca * ca;
            m.bb += cb * cb;
            m.ab += ca * cb;
        });
    }
    m
}

fn for_each_pair(r: &Tensor<f64>, dy: isize, dx: isize, mut f: impl FnMut(f64, f64)) {
    let d = r.dims();
    let (h, w) = (d.h as isize, d.w as isize);
    let y0 = (-dy).max(0);
    let y1 = (h - dy).min(h);
    let x0 = (-dx).max(0);
    let x1 = (w - dx).min(w);
    for n in 0..d.n {
        for c in 0..d.c {
            for y in y0..y1 {
                for x in x0..x1 {
                    let a = r.at(n, c, y as usize, x as usize);
                    let b = r.at(n, c, (y + dy) as usize, (x + dx) as usize);
                    f(a, b);
                }
            }
        }
    }
}

/// Residual correlation map pooled over all pairs, batch items and channels.
///
/// Positions whose offset partner falls outside the image are skipped.
pub fn noise_correlation<T: Float>(pairs: &[(Tensor<T>, Tensor<T>)], radius: usize) -> Result<NoiseCorrMap> {
    if pairs.is_empty() {
        return Err(Error::invalid("noise correlation needs at least one image pair"));
    }
    let mut res = Vec::with_capacity(pairs.len());
    for (i, (clean, noisy)) in pairs.iter().enumerate() {
        clean
            .expect_same_dims(noisy)
            .map_err(|e| Error::invalid(format!("pair {i}: {e}")))?;
        let d = clean.dims();
        if radius >= d.h || radius >= d.w {
            return Err(Error::invalid(format!(
                "radius {radius} does not fit pair {i} of size {}x{}",
                d.h, d.w
            )));
        }
        res.push(noisy.zip_map(clean, |n, c| n - c)?.cast::<f64>());
    }
    let total: usize = res.iter().map(|r| r.len()).sum();
    if total < MIN_SAMPLES {
        return Err(Error::invalid(format!(
            "{total} residual samples, at least {MIN_SAMPLES} required"
        )));
    }
    let e = 2 * radius + 1;
    let r = radius as isize;
    let mut grid = vec![0.0; e * e];
    let idx = |dy: isize, dx: isize| ((dy + r) * e as isize + dx + r) as usize;
    // Correlation is symmetric under swapping the two samples, so only half the offsets
    // are evaluated and mirrored.
    for dy in 0..=r {
        for dx in -r..=r {
            if dy == 0 && dx < 0 {
                continue;
            }
            let v = if (dy, dx) == (0, 0) {
                let m = offset_moments(&res, 0, 0);
                if m.aa <= 0.0 {
                    return Err(Error::invalid("residual has zero variance"));
                }
                1.0
            } else {
                let m = offset_moments(&res, dy, dx);
                if m.aa <= 0.0 || m.bb <= 0.0 {
                    return Err(Error::invalid(format!(
                        "residual has zero variance at offset ({dy},{dx})"
                    )));
                }
                (m.ab / (m.aa * m.bb).sqrt()).clamp(-1.0, 1.0)
            };
            grid[idx(dy, dx)] = v;
            grid[idx(-dy, -dx)] = v;
        }
    }
    Ok(NoiseCorrMap { radius, grid })
}
