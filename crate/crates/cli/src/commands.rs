//! Subcommand implementations. Each one opens its own run directory and
//! writes only there.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use jointok_core::autograd::{DType, Scalar, Tensor};
use jointok_core::config::parse_override;
use jointok_core::evaluator::{collapse_report, eval_generation, eval_reconstruction, generate_images, RealReference};
use jointok_core::generator::SampleOptions;
use jointok_core::ordering::TokenOrder;
use jointok_core::{
    load_checkpoint_expecting, resolve, run_ordering_experiment, save_checkpoint, Dataset, FeatureExtractor, GuidanceSpec,
    OrderingOptions, RawCheckpoint, TrainConfig, TrainState,
};
use serde_json::json;

use crate::plot;
use crate::run::{dataset_fingerprint, read_metrics, unix_now, RunDir, RunManifest, METRICS};

pub const LAST_CKPT: &str = "last.ckpt";
const ABORT_CKPT: &str = "abort.ckpt";

pub fn code_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

fn manifest(subcommand: &str, config: &TrainConfig, fingerprint: String, args: &[String], extra: serde_json::Value) -> RunManifest {
    RunManifest {
        subcommand: subcommand.into(),
        config: config.clone(),
        seed: config.seed,
        code_version: code_version(),
        dataset_fingerprint: fingerprint,
        started_unix: unix_now(),
        finished_unix: None,
        status: "running".into(),
        args: args.to_vec(),
        extra,
    }
}

pub fn default_name(subcommand: &str) -> String {
    format!("{subcommand}-{}-{}", unix_now(), std::process::id())
}

/// Loads the configured corpus and splits it deterministically into `(train, val)`.
pub fn load_data<T: Scalar>(cfg: &TrainConfig) -> Result<(Dataset<T>, Dataset<T>)> {
    let (data, val_size) = if cfg.dataset == "synthetic" {
        (Dataset::synthetic(cfg.dataset_size, cfg.image_size, cfg.num_classes, cfg.seed), cfg.val_size())
    } else {
        let d = Dataset::from_dir(Path::new(&cfg.dataset), cfg.image_size)?;
        if d.num_classes > cfg.num_classes {
            bail!("dataset has {} classes but num_classes is {}", d.num_classes, cfg.num_classes);
        }
        if d.channels != cfg.channels {
            bail!("dataset has {} channels but channels is {}", d.channels, cfg.channels);
        }
        let n = ((d.len() as f64) * cfg.val_fraction).round() as usize;
        (d, n)
    };
    Ok(data.split(val_size, cfg.seed)?)
}

pub struct TrainArgs {
    pub preset: String,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub name: Option<String>,
    pub checkpoint_every: usize,
    pub resume: Option<PathBuf>,
}

pub fn train(root: &Path, a: &TrainArgs, argv: &[String]) -> Result<PathBuf> {
    if let Some(dir) = &a.resume {
        if a.config.is_some() || !a.overrides.is_empty() {
            bail!("--resume takes the configuration from the run manifest; drop --config/--set/--steps");
        }
        let run = RunDir::reopen(dir)?;
        let cfg = run.manifest.config.clone();
        return match cfg.precision.dtype() {
            DType::F32 => resume::<f32>(run, &cfg, a.checkpoint_every),
            DType::F64 => resume::<f64>(run, &cfg, a.checkpoint_every),
        };
    }
    let file = match &a.config {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?),
        None => None,
    };
    let overrides = a.overrides.iter().map(|o| parse_override(o)).collect::<jointok_core::Result<Vec<_>>>()?;
    let cfg = resolve(&a.preset, file.as_deref(), &overrides)?;
    let name = a.name.clone().unwrap_or_else(|| default_name("train"));
    match cfg.precision.dtype() {
        DType::F32 => fresh::<f32>(root, &name, cfg, a.checkpoint_every, argv),
        DType::F64 => fresh::<f64>(root, &name, cfg, a.checkpoint_every, argv),
    }
}

fn fresh<T: Scalar>(root: &Path, name: &str, cfg: TrainConfig, every: usize, argv: &[String]) -> Result<PathBuf> {
    let (train, val) = load_data::<T>(&cfg)?;
    let fp = dataset_fingerprint(&[&train, &val]);
    let mut run = RunDir::create(root, name, manifest("train", &cfg, fp, argv, json!({})))?;
    fs::write(run.file("config.toml"), cfg.to_toml())?;
    let state = TrainState::<T>::new(cfg)?;
    train_loop(&mut run, state, &train, every)?;
    Ok(run.path.clone())
}

fn resume<T: Scalar>(mut run: RunDir, cfg: &TrainConfig, every: usize) -> Result<PathBuf> {
    let (train, val) = load_data::<T>(cfg)?;
    if dataset_fingerprint(&[&train, &val]) != run.manifest.dataset_fingerprint {
        bail!("dataset changed since the run started");
    }
    let state = load_checkpoint_expecting::<T>(&run.file(LAST_CKPT), cfg)?;
    // drop records logged after the checkpoint was taken
    let log = run.file(METRICS);
    if log.exists() {
        let text = fs::read_to_string(&log)?;
        let before = |line: &str| {
            serde_json::from_str::<serde_json::Value>(line).ok().and_then(|r| r["step"].as_u64()).is_some_and(|s| (s as usize) < state.step)
        };
        // keep the original text; re-serializing parsed floats is not bit-exact
        let kept: String = text.lines().filter(|l| before(l)).map(|l| format!("{l}\n")).collect();
        fs::write(&log, kept)?;
    }
    run.manifest.status = "running".into();
    run.manifest.finished_unix = None;
    run.write_manifest()?;
    train_loop(&mut run, state, &train, every)?;
    Ok(run.path.clone())
}

fn train_loop<T: Scalar>(run: &mut RunDir, mut state: TrainState<T>, train: &Dataset<T>, every: usize) -> Result<()> {
    let total = state.total_steps();
    while state.step < total {
        let chunk = if every > 0 { every - state.step % every } else { total };
        let n = chunk.min(total - state.step);
        let outcome = state.train(train, n, |step, bundle| {
            let mut rec = serde_json::Map::new();
            rec.insert("step".into(), json!(step));
            for (k, v) in bundle.to_record() {
                rec.insert(k, json!(v));
            }
            run.log(&serde_json::Value::Object(rec)).map_err(|e| jointok_core::Error::io(METRICS, std::io::Error::other(e.to_string())))
        });
        if let Err(e) = outcome {
            save_checkpoint(&state, &run.file(ABORT_CKPT))?;
            run.finish("failed")?;
            return Err(e.into());
        }
        if every > 0 && state.step % every == 0 {
            save_checkpoint(&state, &run.file(&format!("step_{:06}.ckpt", state.step)))?;
        }
        save_checkpoint(&state, &run.file(LAST_CKPT))?;
        run.flush()?;
    }
    run.finish("completed")?;
    eprintln!("trained {} steps into {}", state.step, run.path.display());
    Ok(())
}

/// Loads a checkpoint at its stored precision and runs `$f::<T>(state, args..)`.
macro_rules! with_state {
    ($path:expr, $f:ident ( $($arg:expr),* )) => {{
        let raw = RawCheckpoint::read($path)?;
        match raw.dtype()? {
            DType::F32 => $f::<f32>(raw.into_state(None)?, $($arg),*),
            DType::F64 => $f::<f64>(raw.into_state(None)?, $($arg),*),
        }
    }};
}

fn ckpt_extra(ckpt: &Path, step: usize) -> serde_json::Value {
    let path = fs::canonicalize(ckpt).unwrap_or_else(|_| ckpt.to_path_buf());
    json!({ "checkpoint": path, "checkpoint_step": step })
}

fn merge(mut base: serde_json::Value, more: serde_json::Value) -> serde_json::Value {
    if let (Some(b), serde_json::Value::Object(m)) = (base.as_object_mut(), more) {
        b.extend(m);
    }
    base
}

pub struct SampleArgs {
    pub ckpt: PathBuf,
    pub classes: Vec<usize>,
    pub guidance: String,
    pub seed: u64,
    pub temperature: f64,
    pub greedy: bool,
    pub aux_ckpt: Option<PathBuf>,
    pub name: Option<String>,
}

fn sample_options(seed: u64, temperature: f64, greedy: bool) -> SampleOptions {
    SampleOptions { temperature, greedy, seed, use_cache: true }
}

/// Auxiliary generator for auto-guidance: an explicit checkpoint or the state's own.
fn load_aux<T: Scalar>(path: Option<&Path>, cfg: &TrainConfig) -> Result<Option<TrainState<T>>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let state = RawCheckpoint::read(p)?.into_state::<T>(None)?;
            if state.cfg.num_tokens != cfg.num_tokens || state.cfg.codebook_size != cfg.codebook_size {
                bail!("auxiliary checkpoint {} uses a different token grid", p.display());
            }
            Ok(Some(state))
        }
    }
}

pub fn sample(root: &Path, a: &SampleArgs, argv: &[String]) -> Result<PathBuf> {
    let spec = GuidanceSpec::parse(&a.guidance)?;
    if a.aux_ckpt.is_some() && !matches!(spec, GuidanceSpec::Auto(_)) {
        bail!("--aux-ckpt only applies to auto guidance");
    }
    with_state!(&a.ckpt, sample_impl(root, a, spec, argv))
}

fn sample_impl<T: Scalar>(state: TrainState<T>, root: &Path, a: &SampleArgs, spec: GuidanceSpec, argv: &[String]) -> Result<PathBuf> {
    let cfg = &state.cfg;
    if a.classes.is_empty() {
        bail!("--classes must name at least one class");
    }
    if let Some(&c) = a.classes.iter().find(|&&c| c >= cfg.num_classes) {
        bail!("class {c} out of range for {} classes", cfg.num_classes);
    }
    let aux_state = load_aux::<T>(a.aux_ckpt.as_deref(), cfg)?;
    let aux = match &aux_state {
        Some(s) => Some(s.ar_view(true)),
        None => state.aux_view(true),
    };
    let guidance = spec.resolve(aux)?;
    let extra = merge(
        ckpt_extra(&a.ckpt, state.step),
        json!({ "classes": a.classes, "guidance": a.guidance, "sample_seed": a.seed, "temperature": a.temperature, "greedy": a.greedy }),
    );
    let name = a.name.clone().unwrap_or_else(|| default_name("sample"));
    let mut run = RunDir::create(root, &name, manifest("sample", cfg, "none".into(), argv, extra))?;
    let opts = sample_options(a.seed, a.temperature, a.greedy);
    let (images, ids) = generate_images(&state.tokenizer_view(true), &state.ar_view(true), &guidance, &a.classes, &opts)?;
    let l = cfg.num_tokens;
    let seqs: Vec<&[usize]> = ids.chunks(l).collect();
    run.write_json("ids.json", &json!({ "classes": a.classes, "ids": seqs }))?;
    let cols = (a.classes.len() as f64).sqrt().ceil() as usize;
    plot::save(&plot::image_grid(&images, cols, 4), &run.file("samples.png"))?;
    run.finish("completed")?;
    Ok(run.path.clone())
}

pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub guidance: Option<String>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub aux_ckpt: Option<PathBuf>,
    pub name: Option<String>,
}

pub fn eval(root: &Path, a: &EvalArgs, argv: &[String]) -> Result<PathBuf> {
    with_state!(&a.ckpt, eval_impl(root, a, argv))
}

fn eval_impl<T: Scalar>(state: TrainState<T>, root: &Path, a: &EvalArgs, argv: &[String]) -> Result<PathBuf> {
    let cfg = &state.cfg;
    let guidance_text = a.guidance.clone().unwrap_or_else(|| format!("cfg:{}", cfg.cfg_scale));
    let spec = GuidanceSpec::parse(&guidance_text)?;
    let samples = a.samples.unwrap_or(cfg.eval_samples);
    let seed = a.seed.unwrap_or(cfg.seed);
    let (train, val) = load_data::<T>(cfg)?;
    let aux_state = load_aux::<T>(a.aux_ckpt.as_deref(), cfg)?;
    let aux = match &aux_state {
        Some(s) => Some(s.ar_view(true)),
        None => state.aux_view(true),
    };
    let guidance = spec.resolve(aux)?;
    let extra = merge(ckpt_extra(&a.ckpt, state.step), json!({ "guidance": guidance_text, "samples": samples, "eval_seed": seed }));
    let name = a.name.clone().unwrap_or_else(|| default_name("eval"));
    let mut run = RunDir::create(root, &name, manifest("eval", cfg, dataset_fingerprint(&[&train, &val]), argv, extra))?;

    let extractor = FeatureExtractor::<T>::new(cfg.channels);
    let tok = state.tokenizer_view(true);
    let recon = eval_reconstruction(&tok, &val, &extractor)?;
    let generation = if samples > extractor.dim() && train.len() > extractor.dim() {
        let reference = RealReference::new(&extractor, &train)?;
        let opts = sample_options(seed, 1.0, false);
        let m = eval_generation(&tok, &state.ar_view(true), &guidance, samples, cfg.num_classes, &opts, &extractor, &reference)?;
        serde_json::to_value(m)?
    } else {
        let (n, d) = (train.len(), extractor.dim());
        eprintln!("skipping generation metrics: {samples} samples against {n} training images cannot estimate a {d}x{d} feature covariance");
        serde_json::Value::Null
    };
    run.write_json("metrics.json", &json!({ "step": state.step, "reconstruction": recon, "generation": generation }))?;
    run.finish("completed")?;
    Ok(run.path.clone())
}

pub struct DiagnoseArgs {
    pub ckpt: PathBuf,
    pub name: Option<String>,
}

pub fn diagnose(root: &Path, a: &DiagnoseArgs, argv: &[String]) -> Result<PathBuf> {
    with_state!(&a.ckpt, diagnose_impl(root, a, argv))
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn diagnose_impl<T: Scalar>(state: TrainState<T>, root: &Path, a: &DiagnoseArgs, argv: &[String]) -> Result<PathBuf> {
    let cfg = &state.cfg;
    let (train, val) = load_data::<T>(cfg)?;
    let extra = ckpt_extra(&a.ckpt, state.step);
    let name = a.name.clone().unwrap_or_else(|| default_name("diagnose"));
    let mut run = RunDir::create(root, &name, manifest("diagnose", cfg, dataset_fingerprint(&[&train, &val]), argv, extra))?;

    let tok = state.tokenizer_view(true);
    let mut ids = Vec::with_capacity(val.len() * cfg.num_tokens);
    let mut latents = Vec::new();
    for batch in val.chunks(64) {
        let enc = tok.encode(&batch.pixels)?;
        ids.extend(enc.ids);
        let d = enc.z.dim(2);
        let rows = enc.z.numel() / d;
        latents.push(enc.z.reshape(vec![rows, d]));
    }
    let refs: Vec<&Tensor<T>> = latents.iter().collect();
    let z = Tensor::concat(&refs, 0);
    let report = collapse_report(&ids, tok.codebook_tensor(), Some(&z))?;
    run.write_json("collapse.json", &report)?;

    write_csv(&run.file("frequency.csv"), "code,count", report.histogram.iter().enumerate().map(|(i, c)| format!("{i},{c}")))?;
    let freq: Vec<f64> = report.histogram.iter().map(|&c| c as f64).collect();
    plot::save(&plot::bar_chart(&freq), &run.file("frequency.png"))?;

    let pca_rows = report
        .codebook_pca
        .iter()
        .map(|p| ("codebook", p))
        .chain(report.latent_pca.iter().map(|p| ("latent", p)))
        .map(|(kind, p)| format!("{kind},{},{},{}", p[0], p[1], p[2]));
    write_csv(&run.file("pca.csv"), "kind,pc1,pc2,pc3", pca_rows)?;
    let xy = |pts: &[[f64; 3]]| pts.iter().map(|p| (p[0], p[1])).collect::<Vec<_>>();
    plot::save(&plot::scatter(&[xy(&report.latent_pca), xy(&report.codebook_pca)]), &run.file("pca.png"))?;

    // loss curves come from the training run that produced the checkpoint
    let log = a.ckpt.parent().map(|p| p.join(METRICS));
    if let Some(log) = log.filter(|p| p.exists()) {
        let records = read_metrics(&log)?;
        let mut keys: Vec<String> = records.iter().flat_map(|r| r.keys().filter(|k| k.starts_with("loss/") || *k == "total").cloned()).collect();
        keys.sort();
        keys.dedup();
        let mut series = Vec::new();
        let mut rows = Vec::new();
        for k in &keys {
            let pts: Vec<(f64, f64)> = records
                .iter()
                .filter_map(|r| Some((r.get("step")?.as_f64()?, r.get(k)?.as_f64()?)))
                .collect();
            rows.extend(pts.iter().map(|(s, v)| format!("{s},{k},{v}")));
            series.push(pts);
        }
        write_csv(&run.file("loss_curves.csv"), "step,term,value", rows.into_iter())?;
        plot::save(&plot::line_plot(&series), &run.file("loss_curves.png"))?;
    } else {
        eprintln!("no metric log next to {}; skipping loss curves", a.ckpt.display());
    }
    eprintln!("code usage {:.3}, top-1 share {:.3} over {} tokens", report.usage, report.top1_share, report.total_tokens);
    run.finish("completed")?;
    Ok(run.path.clone())
}

pub struct OrderingArgs {
    pub ckpt: PathBuf,
    pub order: String,
    pub steps: Option<usize>,
    pub samples: Option<usize>,
    pub name: Option<String>,
}

pub fn ordering(root: &Path, a: &OrderingArgs, argv: &[String]) -> Result<PathBuf> {
    let order = TokenOrder::parse(&a.order)?;
    with_state!(&a.ckpt, ordering_impl(root, a, order, argv))
}

fn ordering_impl<T: Scalar>(state: TrainState<T>, root: &Path, a: &OrderingArgs, order: TokenOrder, argv: &[String]) -> Result<PathBuf> {
    let cfg = &state.cfg;
    let (train, val) = load_data::<T>(cfg)?;
    let mut opts = OrderingOptions::from_config(cfg, a.steps.unwrap_or(cfg.total_steps()));
    if let Some(n) = a.samples {
        opts.num_samples = n;
    }
    let perm = order.permutation(cfg.num_tokens);
    let extra = merge(ckpt_extra(&a.ckpt, state.step), json!({ "order": order.id(), "permutation": perm, "options": opts }));
    let name = a.name.clone().unwrap_or_else(|| default_name("ordering"));
    let mut run = RunDir::create(root, &name, manifest("ordering", cfg, dataset_fingerprint(&[&train, &val]), argv, extra))?;
    let extractor = FeatureExtractor::<T>::new(cfg.channels);
    let reference = RealReference::new(&extractor, &train)?;
    let report = run_ordering_experiment(&state, &train, &val, order, &opts, &extractor, &reference)?;
    run.write_json("ordering.json", &report)?;
    run.finish("completed")?;
    Ok(run.path.clone())
}
