use std::path::{Path, PathBuf};

use atbsn_core::analysis::{erf_map, mean_quality, noise_correlation, psnr, ssim, ErfPipeline};
use atbsn_core::ensemble::{distill, self_ensemble, teacher_targets};
use atbsn_core::io::{
    load_checkpoint, load_manifest, read_image, save_checkpoint, write_bytes, write_heatmap, write_image,
    Checkpoint, ImageFormat, ModelKind,
};
use atbsn_core::pd::apbsn_denoise;
use atbsn_core::synth::{corrupt, derive_seed, generate_dataset, synth_clean, CleanKind, NoiseSpec};
use atbsn_core::train::{train, write_trace_csv, NoisySet, TraceRow, TrainConfig};
use atbsn_core::{BlindSpot, BsnConfig, BsnModel, Dims, Error, NbsnModel, Result, Tensor};
use serde_json::json;

use crate::cli::*;
use crate::config::{announce, workers, RunConfig};

pub struct Ctx {
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub config: RunConfig,
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        seed: cli.seed,
        out_dir: cli.out_dir,
        config: RunConfig::load(cli.config.as_deref())?,
    };
    match cli.command {
        Command::GenData(a) => gen_data(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Denoise(a) => denoise(&ctx, a),
        Command::Ensemble(a) => ensemble(&ctx, a),
        Command::Distill(a) => distill_cmd(&ctx, a),
        Command::ProfileNoise(a) => profile_noise(&ctx, a),
        Command::Erf(a) => erf(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Complexity(a) => complexity(&ctx, a),
        Command::Sweep(a) => sweep(&ctx, a),
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Writes an image; netpbm targets are clamped to `[0, 1]` first and the count is reported.
fn save_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let fmt = ImageFormat::from_path(path);
    if let ImageFormat::Pnm(_) = fmt {
        let clamped = image.data().iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
        if clamped > 0 {
            eprintln!("clamping {clamped} values to [0, 1] for {}", path.display());
        }
        return write_image(path, &image.map(|v| v.clamp(0.0, 1.0)), fmt);
    }
    write_image(path, image, fmt)
}

fn progress(label: String, iters: usize) -> impl FnMut(&TraceRow) {
    let every = (iters / 10).max(1);
    move |r: &TraceRow| {
        if r.step % every == 0 || r.step + 1 == iters {
            eprintln!("{label}step {:>6}  lr {:.3e}  loss {:.6}", r.step, r.lr, r.loss);
        }
    }
}

fn gen_data(ctx: &Ctx, a: GenDataArgs) -> Result<()> {
    let mut spec = ctx.config.data.clone();
    if let Some(v) = a.train {
        spec.train = v;
    }
    if let Some(v) = a.val {
        spec.val = v;
    }
    if let Some(v) = a.size {
        spec.size = v;
    }
    if let Some(v) = a.channels {
        spec.channels = v;
    }
    if let Some(v) = a.kind {
        spec.kind = v;
    }
    if let Some(p) = a.noise {
        let sigma = spec.noise.sigma;
        spec.noise = match p {
            NoisePreset::Default => NoiseSpec::default(),
            NoisePreset::Wide => NoiseSpec::wide(),
            NoisePreset::Iid => NoiseSpec::iid(sigma),
        };
        spec.noise.sigma = sigma;
    }
    if let Some(v) = a.sigma {
        spec.noise.sigma = v;
    }
    if let Some(v) = a.signal_dependence {
        spec.noise.signal_dependence = v;
    }
    if a.no_previews {
        spec.previews = false;
    }
    if let Some(s) = ctx.seed {
        spec.seed = s;
    }
    announce("gen-data", spec.seed, &json!({ "data": spec, "out_dir": ctx.out_dir }));
    let ds = generate_dataset(&ctx.out_dir, &spec)?;
    println!(
        "wrote {} train and {} val pairs to {}",
        ds.train.len(),
        ds.val.len(),
        ctx.out_dir.display()
    );
    println!(
        "clamped fraction: train {:.6}, val {:.6}",
        ds.clamp_fraction.0, ds.clamp_fraction.1
    );
    Ok(())
}

fn noisy_set(path: &Path) -> Result<NoisySet> {
    NoisySet::from_manifest(&load_manifest(path)?)
}

fn channels_of(data: &NoisySet) -> Result<usize> {
    data.images
        .first()
        .map(|t| t.dims().c)
        .ok_or_else(|| invalid("manifest lists no images"))
}

fn train_cmd(ctx: &Ctx, a: TrainCmd) -> Result<()> {
    let data = noisy_set(&a.data)?;
    let mut model = a.model.apply(ctx.config.model);
    model.input_channels = channels_of(&data)?;
    let mut cfg = a.train.apply(ctx.config.train.clone(), ctx.seed);
    if let Some(m) = a.method {
        cfg.method = m;
    }
    if let Some(k) = a.k_train {
        cfg.k_train = k;
    }
    if let Some(f) = a.pd_train {
        cfg.pd_factor = f;
    }
    let out = a.out.unwrap_or_else(|| ctx.out("model.ckpt"));
    announce(
        "train",
        cfg.seed,
        &json!({ "model": model, "train": cfg, "data": a.data, "out": out }),
    );
    let outcome = train(&data, model, &cfg, progress(String::new(), cfg.iters))?;
    let mut ck = outcome.checkpoint(&cfg);
    ck.header.train_data = Some(a.data.display().to_string());
    save_checkpoint(&out, &ck)?;
    let trace = out.with_extension("trace.csv");
    write_trace_csv(&trace, &outcome.trace)?;
    println!("checkpoint {}", out.display());
    println!("loss trace {}", trace.display());
    Ok(())
}

enum Loaded {
    Bsn(BsnModel<f32>),
    Nbsn(NbsnModel<f32>),
}

fn load_model(path: &Path) -> Result<(Loaded, Checkpoint)> {
    let ck = load_checkpoint(path)?;
    let m = match ck.header.kind {
        ModelKind::Bsn => Loaded::Bsn(ck.bsn()?),
        ModelKind::Nbsn => Loaded::Nbsn(ck.nbsn()?),
    };
    Ok((m, ck))
}

fn load_bsn(path: &Path) -> Result<BsnModel<f32>> {
    match load_model(path)?.0 {
        Loaded::Bsn(m) => Ok(m),
        Loaded::Nbsn(_) => Err(invalid(format!(
            "{} holds a plain UNet; this command needs a blind-spot checkpoint",
            path.display()
        ))),
    }
}

fn denoise(ctx: &Ctx, a: DenoiseArgs) -> Result<()> {
    let (model, ck) = load_model(&a.ckpt)?;
    let x = read_image(&a.input)?;
    let seed = ctx.seed.unwrap_or(ck.header.init_seed);
    let y = match &model {
        Loaded::Bsn(m) => {
            let (method, detail) = match a.method {
                InferMethod::Atbsn => ("atbsn", json!({ "k": a.k.size() })),
                InferMethod::Apbsn => ("apbsn", json!({ "pd_infer": a.pd_infer.get() })),
            };
            announce(
                "denoise",
                seed,
                &json!({ "ckpt": a.ckpt, "in": a.input, "out": a.out, "method": method, "settings": detail }),
            );
            match a.method {
                InferMethod::Atbsn => m.denoise(&x, a.k)?,
                InferMethod::Apbsn => apbsn_denoise(m, &x, a.pd_infer)?,
            }
        }
        Loaded::Nbsn(m) => {
            if a.method == InferMethod::Apbsn {
                return Err(invalid("the PD pipeline needs a blind-spot checkpoint"));
            }
            announce(
                "denoise",
                seed,
                &json!({ "ckpt": a.ckpt, "in": a.input, "out": a.out, "method": "nbsn" }),
            );
            m.denoise(&x)?
        }
    };
    save_image(&a.out, &y)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn ensemble(ctx: &Ctx, a: EnsembleArgs) -> Result<()> {
    let model = load_bsn(&a.ckpt)?;
    let spec = a.kset.unwrap_or_else(|| ctx.config.kset.clone());
    let seed = ctx.seed.unwrap_or(0);
    announce(
        "ensemble",
        seed,
        &json!({ "ckpt": a.ckpt, "in": a.input, "out": a.out, "kset": spec }),
    );
    let y = self_ensemble(&model, &read_image(&a.input)?, &spec)?;
    save_image(&a.out, &y)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn distill_cmd(ctx: &Ctx, a: DistillArgs) -> Result<()> {
    let (teacher, ck) = match load_model(&a.teacher)? {
        (Loaded::Bsn(m), ck) => (m, ck),
        _ => return Err(invalid("the teacher must be a blind-spot checkpoint")),
    };
    let data_path = match (&a.data, &ck.header.train_data) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => {
            return Err(invalid(
                "teacher checkpoint records no training manifest; pass --data",
            ))
        }
    };
    let data = noisy_set(&data_path)?;
    let spec = a.kset.unwrap_or_else(|| ctx.config.kset.clone());
    let student_cfg = a.model.apply(*teacher.config());
    let cfg = a.train.apply(ctx.config.train.clone(), ctx.seed);
    let cache = (!a.no_cache).then(|| a.cache.clone().unwrap_or_else(|| ctx.out("teacher_cache")));
    let n_workers = workers(a.workers)?;
    let out = a.out.clone().unwrap_or_else(|| ctx.out("student.ckpt"));
    announce(
        "distill",
        cfg.seed,
        &json!({
            "teacher": a.teacher, "kset": spec, "data": data_path, "student": student_cfg,
            "train": cfg, "cache": cache, "workers": n_workers, "out": out,
        }),
    );
    let targets = teacher_targets(&teacher, &spec, &data, cache.as_deref(), n_workers)?;
    let outcome = distill(&targets, &data, student_cfg, &cfg, progress(String::new(), cfg.iters))?;
    let mut sck = outcome.checkpoint(&cfg, *teacher.config(), &spec);
    sck.header.train_data = Some(data_path.display().to_string());
    save_checkpoint(&out, &sck)?;
    let trace = out.with_extension("trace.csv");
    write_trace_csv(&trace, &outcome.trace)?;
    println!("student checkpoint {}", out.display());
    println!("loss trace {}", trace.display());
    Ok(())
}

fn profile_noise(ctx: &Ctx, a: ProfileNoiseArgs) -> Result<()> {
    let pairs = load_manifest(&a.data)?.load_pairs()?;
    announce(
        "profile-noise",
        ctx.seed.unwrap_or(0),
        &json!({ "data": a.data, "radius": a.radius }),
    );
    let map = noise_correlation(&pairs, a.radius)?;
    let r = a.radius as isize;
    let mut csv = String::from("dy");
    for dx in -r..=r {
        csv.push_str(&format!(",dx={dx}"));
    }
    csv.push('\n');
    for dy in -r..=r {
        csv.push_str(&dy.to_string());
        for dx in -r..=r {
            csv.push_str(&format!(",{:.6}", map.get(dy, dx)));
        }
        csv.push('\n');
    }
    let csv_path = ctx.out("noise_corr.csv");
    write_bytes(&csv_path, csv.as_bytes())?;
    let e = map.edge();
    write_heatmap(&ctx.out("noise_corr.pgm"), &map.grid, e, e)?;
    print!("{csv}");
    if a.radius >= 1 {
        println!("lag-1 correlation: horizontal {:.4}, vertical {:.4}", map.get(0, 1), map.get(1, 0));
    }
    for lag in 0..a.radius {
        println!("max |corr| beyond lag {lag}: {:.4}", map.max_abs_beyond(lag));
    }
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn parse_pixel(s: &str) -> Result<(usize, usize)> {
    let bad = || invalid(format!("--pixel expects `row,col`, got `{s}`"));
    let (y, x) = s.split_once(',').ok_or_else(bad)?;
    Ok((
        y.trim().parse().map_err(|_| bad())?,
        x.trim().parse().map_err(|_| bad())?,
    ))
}

fn erf(ctx: &Ctx, a: ErfArgs) -> Result<()> {
    let (model, ck) = load_model(&a.ckpt)?;
    let seed = ctx.seed.unwrap_or(0);
    let c = ck.header.config.input_channels;
    let image = match &a.input {
        Some(p) => read_image(p)?,
        None => {
            let clean: Tensor<f32> =
                synth_clean(CleanKind::Mixed, Dims::new(1, c, a.size, a.size), derive_seed(seed, "erf-clean", 0))?;
            corrupt(&clean, &NoiseSpec::default(), derive_seed(seed, "erf-noise", 0))?.0
        }
    };
    let d = image.dims();
    let (i, j) = match &a.pixel {
        Some(s) => parse_pixel(s)?,
        None => (d.h / 2, d.w / 2),
    };
    let (method, pipeline) = match (a.method, &model) {
        (ErfMethod::Atbsn, Loaded::Bsn(m)) => (json!({"atbsn": {"k": a.k.size()}}), ErfPipeline::Atbsn(m, a.k)),
        (ErfMethod::Apbsn, Loaded::Bsn(m)) => (json!({"apbsn": {"pd": a.pd.get()}}), ErfPipeline::Apbsn(m, a.pd)),
        (ErfMethod::Nbsn, Loaded::Nbsn(m)) => (json!("nbsn"), ErfPipeline::Nbsn(m)),
        (ErfMethod::Nbsn, Loaded::Bsn(_)) => return Err(invalid("--method nbsn needs a plain UNet checkpoint")),
        (_, Loaded::Nbsn(_)) => return Err(invalid("--method atbsn/apbsn needs a blind-spot checkpoint")),
    };
    announce(
        "erf",
        seed,
        &json!({ "ckpt": a.ckpt, "method": method, "in": a.input, "size": [d.h, d.w], "pixel": [i, j] }),
    );
    let map = erf_map(pipeline, &image, i, j)?;
    let mut csv = String::new();
    for y in 0..map.height {
        let row: Vec<String> = (0..map.width).map(|x| format!("{:e}", map.at(y, x))).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    write_bytes(&ctx.out("erf.csv"), csv.as_bytes())?;
    write_heatmap(&ctx.out("erf.pgm"), &map.grid, map.height, map.width)?;
    println!("centre weight: {:e}", map.at(i, j));
    match a.method {
        ErfMethod::Atbsn => println!("mass inside the {0}x{0} square: {1:e}", a.k.size(), map.mass_in_square(a.k.size())),
        ErfMethod::Apbsn => println!("mass on the stride-{} subgrid: {:.6}", a.pd.get(), map.mass_on_subgrid(a.pd.get())),
        ErfMethod::Nbsn => {}
    }
    println!("wrote {} and {}", ctx.out("erf.csv").display(), ctx.out("erf.pgm").display());
    Ok(())
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let m = load_manifest(&a.data)?;
    let pairs = m.load_pairs()?;
    let names = m.noisy_paths();
    let spec = a.kset.clone().unwrap_or_else(|| ctx.config.kset.clone());
    let model = match (&a.ckpt, a.method) {
        (_, EvalMethod::Noisy) => None,
        (Some(p), _) => Some(load_model(p)?.0),
        (None, _) => return Err(invalid("--ckpt is required unless --method noisy")),
    };
    let settings = match a.method {
        EvalMethod::Noisy => json!("noisy"),
        EvalMethod::Atbsn => json!({"atbsn": {"k": a.k.size()}}),
        EvalMethod::Apbsn => json!({"apbsn": {"pd_infer": a.pd_infer.get()}}),
        EvalMethod::Ensemble => json!({"ensemble": {"kset": spec}}),
        EvalMethod::Nbsn => json!("nbsn"),
    };
    let csv_path = a.csv.clone().unwrap_or_else(|| ctx.out("eval.csv"));
    announce(
        "eval",
        ctx.seed.unwrap_or(0),
        &json!({ "data": a.data, "ckpt": a.ckpt, "method": settings, "csv": csv_path }),
    );
    let restore = |x: &Tensor<f32>| -> Result<Tensor<f32>> {
        match (a.method, &model) {
            (EvalMethod::Noisy, _) => Ok(x.clone()),
            (EvalMethod::Atbsn, Some(Loaded::Bsn(m))) => m.denoise(x, a.k),
            (EvalMethod::Apbsn, Some(Loaded::Bsn(m))) => apbsn_denoise(m, x, a.pd_infer),
            (EvalMethod::Ensemble, Some(Loaded::Bsn(m))) => self_ensemble(m, x, &spec),
            (EvalMethod::Nbsn, Some(Loaded::Nbsn(m))) => m.denoise(x),
            (EvalMethod::Nbsn, _) => Err(invalid("--method nbsn needs a plain UNet checkpoint")),
            _ => Err(invalid("this method needs a blind-spot checkpoint")),
        }
    };
    let mut csv = String::from("image,psnr,ssim\n");
    let (mut sp, mut ss) = (0.0, 0.0);
    for ((clean, noisy), name) in pairs.iter().zip(&names) {
        let y = restore(noisy)?;
        let (p, s) = (psnr(&y, clean, 1.0)?, ssim(&y, clean)?);
        sp += p;
        ss += s;
        csv.push_str(&format!("{},{p:.6},{s:.6}\n", name.display()));
    }
    let n = pairs.len() as f64;
    csv.push_str(&format!("mean,{:.6},{:.6}\n", sp / n, ss / n));
    write_bytes(&csv_path, csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn complexity(ctx: &Ctx, a: ComplexityArgs) -> Result<()> {
    let mut cfg = a.model.apply(ctx.config.model);
    if let Some(c) = a.channels {
        cfg.input_channels = c;
    }
    let spec = a.kset.clone().unwrap_or_else(|| ctx.config.kset.clone());
    announce(
        "complexity",
        ctx.seed.unwrap_or(0),
        &json!({ "model": cfg, "size": a.size, "kset": spec }),
    );
    cfg.check_spatial(a.size, a.size)?;
    let bsn = BsnModel::<f32>::new(cfg, 0)?;
    let nbsn = NbsnModel::<f32>::new(cfg, 0)?;
    let (bm, nm) = (bsn.count_macs(a.size, a.size), nbsn.count_macs(a.size, a.size));
    let passes = spec.len() as u64;
    let mut csv = String::from("model,passes,params,macs\n");
    csv.push_str(&format!("bsn,1,{},{bm}\n", bsn.count_params()));
    csv.push_str(&format!("bsn-ensemble,{passes},{},{}\n", bsn.count_params(), passes * bm));
    csv.push_str(&format!("nbsn,1,{},{nm}\n", nbsn.count_params()));
    let path = ctx.out("complexity.csv");
    write_bytes(&path, csv.as_bytes())?;
    print!("{csv}");
    println!("single-pass MAC ratio bsn/nbsn: {:.3}", bm as f64 / nm as f64);
    println!("ensemble/nbsn MAC ratio: {:.3}", (passes * bm) as f64 / nm as f64);
    Ok(())
}

/// One trained row of the sweep: PSNR at every inference size.
fn sweep_row(
    ka: BlindSpot,
    data: &NoisySet,
    val: &[(Tensor<f32>, Tensor<f32>)],
    model: BsnConfig,
    base: &TrainConfig,
    kb: &[BlindSpot],
    dir: &Path,
) -> Result<Vec<f64>> {
    let cfg = TrainConfig {
        k_train: ka,
        ..base.clone()
    };
    let outcome = train(data, model, &cfg, progress(format!("[k_a={}] ", ka.size()), cfg.iters))?;
    let ckpt = dir.join(format!("ka{}.ckpt", ka.size()));
    save_checkpoint(&ckpt, &outcome.checkpoint(&cfg))?;
    write_trace_csv(&ckpt.with_extension("trace.csv"), &outcome.trace)?;
    kb.iter()
        .map(|&k| Ok(mean_quality(val, |x| outcome.model.denoise(x, k))?.0))
        .collect()
}

fn sweep(ctx: &Ctx, a: SweepArgs) -> Result<()> {
    if a.ka.is_empty() || a.kb.is_empty() {
        return Err(invalid("--ka and --kb need at least one size each"));
    }
    let data = noisy_set(&a.data)?;
    let val = load_manifest(&a.val)?.load_pairs()?;
    let mut model = a.model.apply(ctx.config.model);
    model.input_channels = channels_of(&data)?;
    let cfg = a.train.apply(ctx.config.train.clone(), ctx.seed);
    cfg.validate(&model)?;
    let n_workers = workers(a.workers)?.min(a.ka.len());
    let dir = ctx.out("sweep");
    announce(
        "sweep",
        cfg.seed,
        &json!({
            "data": a.data, "val": a.val, "ka": a.ka, "kb": a.kb, "model": model,
            "train": cfg, "workers": n_workers, "out": dir,
        }),
    );
    let jobs = a.ka.len();
    let mut rows: Vec<Option<Result<Vec<f64>>>> = (0..jobs).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..n_workers)
            .map(|w| {
                let (data, val, cfg, a, dir) = (&data, &val, &cfg, &a, &dir);
                s.spawn(move || {
                    (w..jobs)
                        .step_by(n_workers)
                        .map(|j| (j, sweep_row(a.ka[j], data, val, model, cfg, &a.kb, dir)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (j, r) in h.join().expect("sweep worker panicked") {
                rows[j] = Some(r);
            }
        }
    });
    let mut csv = String::from("k_a");
    for k in &a.kb {
        csv.push_str(&format!(",k_b={}", k.size()));
    }
    csv.push('\n');
    for (ka, row) in a.ka.iter().zip(rows) {
        let row = row.expect("every job ran")?;
        csv.push_str(&ka.size().to_string());
        for p in row {
            csv.push_str(&format!(",{p:.4}"));
        }
        csv.push('\n');
    }
    let path = ctx.out("sweep.csv");
    write_bytes(&path, csv.as_bytes())?;
    print!("{csv}");
    println!("wrote {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_parsing() {
        assert_eq!(parse_pixel("3, 14").unwrap(), (3, 14));
        assert!(parse_pixel("3").is_err());
        assert!(parse_pixel("a,b").is_err());
    }
}
