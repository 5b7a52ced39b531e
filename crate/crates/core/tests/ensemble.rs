use atbsn_core::ensemble::{
    cache_path, distill, ensemble_in_order, self_ensemble, teacher_key, teacher_targets, EnsembleSpec,
};
use atbsn_core::train::{NoisySet, TrainConfig};
use atbsn_core::{BlindSpot, BsnConfig, BsnModel, Dims, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(d: Dims, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(d, |_, _, _, _| rng.random_range(0.0..1.0))
}

fn cfg() -> BsnConfig {
    BsnConfig {
        input_channels: 1,
        base_channels: 4,
        pool_levels: 2,
        head_channels: 8,
    }
}

fn ks(v: &[usize]) -> Vec<BlindSpot> {
    v.iter().map(|&k| BlindSpot::new(k).unwrap()).collect()
}

#[test]
fn spec_parsing_and_validation() {
    let s: EnsembleSpec = "5, 0,3,1".parse().unwrap();
    assert_eq!(s.sizes(), [0, 1, 3, 5]);
    assert_eq!(s, EnsembleSpec::default());
    assert_eq!(s.to_string(), "0,1,3,5");
    assert!("1,1".parse::<EnsembleSpec>().is_err());
    assert!("".parse::<EnsembleSpec>().is_err());
    assert!("2".parse::<EnsembleSpec>().is_err());
    assert!(EnsembleSpec::new(Vec::new()).is_err());
    let json = serde_json::to_string(&s).unwrap();
    assert_eq!(serde_json::from_str::<EnsembleSpec>(&json).unwrap(), s);
    assert!(serde_json::from_str::<EnsembleSpec>("[3,3]").is_err());
}

#[test]
fn singleton_is_the_plain_prediction() {
    let m = BsnModel::<f32>::new(cfg(), 1).unwrap();
    let x = random(Dims::new(1, 1, 16, 16), 2);
    let s = EnsembleSpec::new(ks(&[3])).unwrap();
    assert_eq!(self_ensemble(&m, &x, &s).unwrap(), m.denoise(&x, BlindSpot::new(3).unwrap()).unwrap());
}

#[test]
fn ensemble_is_the_mean_and_order_barely_matters() {
    let m = BsnModel::<f32>::new(cfg(), 3).unwrap();
    let x = random(Dims::new(1, 1, 16, 16), 4);
    let spec = EnsembleSpec::default();
    let e = self_ensemble(&m, &x, &spec).unwrap();
    let singles: Vec<Tensor<f64>> = spec
        .k_set()
        .iter()
        .map(|&k| m.denoise(&x, k).unwrap().cast())
        .collect();
    let mean = Tensor::from_fn(x.dims(), |n, c, y, xx| singles.iter().map(|t| t.at(n, c, y, xx)).sum::<f64>() / 4.0);
    assert!(e.cast::<f64>().max_abs_diff(&mean).unwrap() < 1e-6);
    for order in [[5, 3, 1, 0], [1, 5, 0, 3], [3, 0, 5, 1]] {
        let p = ensemble_in_order(&m, &x, &ks(&order)).unwrap();
        assert!(p.max_abs_diff(&e).unwrap() <= 1e-6);
    }
}

#[test]
fn teacher_targets_cache_and_threads_agree() {
    let m = BsnModel::<f32>::new(cfg(), 5).unwrap();
    let data = NoisySet::new((0..3).map(|i| random(Dims::new(1, 1, 16, 16), 10 + i)).collect());
    let spec = EnsembleSpec::new(ks(&[0, 1])).unwrap();
    let plain = teacher_targets(&m, &spec, &data, None, 1).unwrap();
    let threaded = teacher_targets(&m, &spec, &data, None, 3).unwrap();
    assert_eq!(plain, threaded);
    let dir = tempfile::tempdir().unwrap();
    let cached = teacher_targets(&m, &spec, &data, Some(dir.path()), 2).unwrap();
    assert_eq!(cached, plain);
    let key = teacher_key(&m, &spec);
    let path = cache_path(dir.path(), &key, &data.names[1]);
    assert!(path.is_file());
    let again = teacher_targets(&m, &spec, &data, Some(dir.path()), 1).unwrap();
    assert_eq!(again, plain);

    let other = BsnModel::<f32>::new(cfg(), 6).unwrap();
    assert_ne!(teacher_key(&other, &spec), key);
    assert_ne!(teacher_key(&m, &EnsembleSpec::default()), key);
    assert_ne!(cache_path(dir.path(), &key, "a"), cache_path(dir.path(), &key, "b"));
}

#[test]
fn distillation_reduces_its_loss() {
    let teacher = BsnModel::<f32>::new(cfg(), 7).unwrap();
    let data = NoisySet::new((0..2).map(|i| random(Dims::new(1, 1, 24, 24), 20 + i)).collect());
    let spec = EnsembleSpec::new(ks(&[1])).unwrap();
    let targets = teacher_targets(&teacher, &spec, &data, None, 1).unwrap();
    let tc = TrainConfig {
        lr: 3e-3,
        batch: 2,
        patch: 16,
        iters: 40,
        decay_every: 100,
        seed: 8,
        ..TrainConfig::default()
    };
    let out = distill(&targets, &data, cfg(), &tc, |_| {}).unwrap();
    let head: f64 = out.trace[..5].iter().map(|r| r.loss).sum::<f64>() / 5.0;
    let tail: f64 = out.trace[35..].iter().map(|r| r.loss).sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");
    let again = distill(&targets, &data, cfg(), &tc, |_| {}).unwrap();
    assert_eq!(out.trace, again.trace);
    let ck = out.checkpoint(&tc, cfg(), &spec);
    assert_eq!(ck.header.distill.as_ref().unwrap().teacher_kset, [1]);
    assert!(distill(&targets[..1], &data, cfg(), &tc, |_| {}).is_err());
}
