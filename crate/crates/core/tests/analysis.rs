use atbsn_core::analysis::{
    erf_map, mean_quality, noise_correlation, psnr, ssim, ErfPipeline, MIN_SAMPLES, PSNR_CAP,
};
use atbsn_core::pd::PdFactor;
use atbsn_core::synth::{corrupt, Kernel, NoiseSpec};
use atbsn_core::{BlindSpot, BsnConfig, BsnModel, Dims, NbsnModel, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(d: Dims, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(d, |_, _, _, _| rng.random_range(0.0..1.0))
}

/// Mid-grey images with low-level noise: no clamping, so the residual is the raw field.
fn pairs(spec: &NoiseSpec, n: usize, side: usize, seed: u64) -> Vec<(Tensor<f64>, Tensor<f64>)> {
    (0..n)
        .map(|i| {
            let clean = Tensor::full(Dims::new(1, 1, side, side), 0.5);
            let (noisy, clamp) = corrupt(&clean, spec, seed + i as u64).unwrap();
            assert_eq!(clamp, 0.0);
            (clean, noisy)
        })
        .collect()
}

#[test]
fn iid_noise_is_uncorrelated() {
    let map = noise_correlation(&pairs(&NoiseSpec::iid(0.05), 4, 128, 10), 4).unwrap();
    assert_eq!(map.get(0, 0), 1.0);
    assert!(map.max_abs_beyond(0) <= 0.02, "{}", map.max_abs_beyond(0));
}

#[test]
fn box_kernel_matches_analytic_autocorrelation() {
    let spec = NoiseSpec {
        sigma: 0.05,
        kernel: Kernel::box_filter(3).unwrap(),
        signal_dependence: 0.0,
    };
    let map = noise_correlation(&pairs(&spec, 4, 128, 20), 4).unwrap();
    for dy in -4isize..=4 {
        for dx in -4isize..=4 {
            let overlap = |d: isize| (3 - d.abs()).max(0) as f64;
            let expect = overlap(dy) * overlap(dx) / 9.0;
            let got = map.get(dy, dx);
            assert!((got - expect).abs() <= 0.03, "({dy},{dx}): {got} vs {expect}");
        }
    }
}

#[test]
fn map_is_point_symmetric_and_bounded() {
    let map = noise_correlation(&pairs(&NoiseSpec::default(), 2, 80, 30), 3).unwrap();
    assert_eq!(map.edge(), 7);
    for dy in -3isize..=3 {
        for dx in -3isize..=3 {
            assert_eq!(map.get(dy, dx), map.get(-dy, -dx));
            assert!(map.get(dy, dx).abs() <= 1.0);
        }
    }
}

#[test]
fn correlation_input_errors() {
    let empty: Vec<(Tensor<f64>, Tensor<f64>)> = Vec::new();
    assert!(noise_correlation(&empty, 1).is_err());
    let small = pairs(&NoiseSpec::iid(0.05), 1, 64, 0);
    assert!(small[0].0.len() < MIN_SAMPLES);
    assert!(noise_correlation(&small, 1).is_err());
    let flat = vec![(Tensor::full(Dims::new(1, 1, 128, 128), 0.5), Tensor::full(Dims::new(1, 1, 128, 128), 0.5))];
    assert!(noise_correlation(&flat, 1).is_err());
    let mismatch = vec![(Tensor::full(Dims::new(1, 1, 128, 128), 0.5), Tensor::full(Dims::new(1, 1, 128, 120), 0.5))];
    assert!(noise_correlation(&mismatch, 1).is_err());
    let big = pairs(&NoiseSpec::iid(0.05), 1, 128, 0);
    assert!(noise_correlation(&big, 128).is_err());
}

#[test]
fn psnr_hand_values() {
    let d = Dims::new(1, 1, 4, 4);
    let a = Tensor::<f64>::zeros(d);
    let b = Tensor::full(d, 0.5);
    assert!((psnr(&a, &b, 1.0).unwrap() - 6.020_599_913_279_624).abs() < 1e-9);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
    assert!(psnr(&a, &Tensor::zeros(Dims::new(1, 1, 4, 5)), 1.0).is_err());
}

/// Direct 2-D windowed statistics at every valid position.
fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let d = a.dims();
    let mut w = [[0.0f64; 11]; 11];
    let mut s = 0.0;
    for (y, row) in w.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            let r2 = ((y as f64 - 5.0).powi(2) + (x as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5);
            *v = (-r2).exp();
            s += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (mut total, mut count) = (0.0, 0);
    for n in 0..d.n {
        for c in 0..d.c {
            for oy in 0..=d.h - 11 {
                for ox in 0..=d.w - 11 {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for (ty, row) in w.iter().enumerate() {
                        for (tx, &wt) in row.iter().enumerate() {
                            let p = a.at(n, c, oy + ty, ox + tx);
                            let q = b.at(n, c, oy + ty, ox + tx);
                            let wt = wt / s;
                            mx += wt * p;
                            my += wt * q;
                            xx += wt * p * p;
                            yy += wt * q * q;
                            xy += wt * p * q;
                        }
                    }
                    let (vx, vy, cv) = (xx - mx * mx, yy - my * my, xy - mx * my);
                    total += (2.0 * mx * my + c1) * (2.0 * cv + c2)
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
    }
    total / count as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn ssim_matches_direct_oracle(seed in any::<u64>(), h in 11usize..20, w in 11usize..20) {
        let a = random(Dims::new(1, 2, h, w), seed);
        let b = a.zip_map(&random(Dims::new(1, 2, h, w), seed ^ 1), |p, q| 0.7 * p + 0.3 * q).unwrap();
        let got = ssim(&a, &b).unwrap();
        prop_assert!((got - ssim_oracle(&a, &b)).abs() < 1e-9);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_matches_closed_form(seed in any::<u64>()) {
        let a = random(Dims::new(1, 1, 8, 8), seed);
        let b = random(Dims::new(1, 1, 8, 8), !seed);
        let mse: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / 64.0;
        prop_assert!((psnr(&a, &b, 1.0).unwrap() + 10.0 * mse.log10()).abs() < 1e-9);
    }
}

#[test]
fn ssim_rejects_small_images_and_mean_quality_averages() {
    let a = random(Dims::new(1, 1, 10, 16), 1);
    assert!(ssim(&a, &a).is_err());
    let p = vec![
        (random(Dims::new(1, 1, 16, 16), 2), random(Dims::new(1, 1, 16, 16), 3)),
        (random(Dims::new(1, 1, 16, 16), 4), random(Dims::new(1, 1, 16, 16), 5)),
    ];
    let (mp, ms) = mean_quality(&p, |x| Ok(x.clone())).unwrap();
    let ep = (psnr(&p[0].1, &p[0].0, 1.0).unwrap() + psnr(&p[1].1, &p[1].0, 1.0).unwrap()) / 2.0;
    let es = (ssim(&p[0].1, &p[0].0).unwrap() + ssim(&p[1].1, &p[1].0).unwrap()) / 2.0;
    assert!((mp - ep).abs() < 1e-12 && (ms - es).abs() < 1e-12);
    assert!(mean_quality::<f64>(&[], |x| Ok(x.clone())).is_err());
}

fn cfg() -> BsnConfig {
    BsnConfig {
        input_channels: 3,
        base_channels: 8,
        pool_levels: 2,
        head_channels: 8,
    }
}

#[test]
fn blind_spot_erf_is_empty_inside_the_square() {
    let model = BsnModel::<f64>::new(cfg(), 11).unwrap();
    let x = random(Dims::new(1, 3, 24, 24), 12);
    for k in [1, 3, 7] {
        let map = erf_map(ErfPipeline::Atbsn(&model, BlindSpot::new(k).unwrap()), &x, 12, 11).unwrap();
        assert_eq!(map.mass_in_square(k), 0.0, "k = {k}");
        assert!(map.mass_in_square(k + 2) > 0.0, "k = {k}");
        assert!((map.total() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn plain_unet_erf_includes_the_centre() {
    let model = NbsnModel::<f64>::new(cfg(), 13).unwrap();
    let x = random(Dims::new(1, 3, 24, 24), 14);
    let map = erf_map(ErfPipeline::Nbsn(&model), &x, 12, 12).unwrap();
    assert!(map.at(12, 12) > 0.0);
}

#[test]
fn pd_erf_lives_on_the_subgrid() {
    let model = BsnModel::<f64>::new(cfg(), 15).unwrap();
    let x = random(Dims::new(1, 3, 40, 40), 16);
    let map = erf_map(ErfPipeline::Apbsn(&model, PdFactor::new(5).unwrap()), &x, 22, 18).unwrap();
    assert!(map.mass_on_subgrid(5) >= 0.95);
    assert_eq!(map.at(22, 18), 0.0);
    assert!(erf_map(ErfPipeline::Nbsn(&NbsnModel::<f64>::new(cfg(), 1).unwrap()), &x, 40, 0).is_err());
}
