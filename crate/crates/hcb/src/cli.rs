use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hcb::cache::{build_cache, PatchCache};
use hcb::checkpoint;
use hcb::config::RunConfig;
use hcb::experiment::{self, head_name, read_json, write_json, TrainJob};
use hcb::ingest::{ingest_dataset, NamePattern};
use hcb::{imageio, Error as HcbError};
use hcb_core::balance::{realize_plan, SamplingPlan};
use hcb_core::hcbnet::{count_params, HeadKind, NetworkSpec};
use hcb_core::manifest::{apply_filters, hierarchy_stats, make_folds, FoldPlan, ImageRecord, Manifest};
use hcb_core::pipeline::predict_image;
use hcb_core::synth::{render, SynthSpec};
use rayon::prelude::*;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "hcb", about = "Hierarchical classifier-block camera brand and model identification", disable_version_flag = true)]
struct Cli {
    /// Print the version as JSON and exit
    #[arg(long)]
    version: bool,
    /// JSON run configuration; unknown keys are rejected
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "HCB_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "HCB_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
    /// Worker threads; 1 is bitwise reproducible, 0 uses every core
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a manifest from an image directory
    Scan(ScanArgs),
    /// Plan leave-one-device-out folds
    Folds(FoldsArgs),
    /// Rank tiles and cache the best patches of every image
    Extract(ExtractArgs),
    /// Print the per-level patch quotas of a fold
    Balance(BalanceArgs),
    /// Generate the synthetic camera dataset
    Synth(SynthArgs),
    /// Train one network per fold
    Train(TrainArgs),
    /// Evaluate fold checkpoints on their held-out devices
    Eval(EvalArgs),
    /// Classify images with a checkpoint
    Predict(PredictArgs),
    /// Count trainable parameters of a network spec
    CountParams(CountArgs),
}

#[derive(Args)]
struct ScanArgs {
    #[arg(long)]
    root: Option<PathBuf>,
    /// File-name regex with brand, model, device and id groups
    #[arg(long)]
    pattern: Option<String>,
    /// Keep every model, including single-device ones, and skip merges
    #[arg(long)]
    no_filters: bool,
}

#[derive(Args)]
struct FoldsArgs {
    #[arg(long)]
    n_folds: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long)]
    patch_count: Option<usize>,
    /// Homogeneity band as LOW,HIGH
    #[arg(long)]
    thresholds: Option<String>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args)]
struct BalanceArgs {
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long)]
    k: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    /// `default` or a JSON spec file
    #[arg(long, default_value = "default")]
    spec: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Hierarchical,
    Flat,
    Both,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    /// Folds to train (repeatable); all by default
    #[arg(long)]
    fold: Vec<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    k: Option<u64>,
    #[arg(long)]
    val_k: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    #[arg(long)]
    fold: Vec<usize>,
    /// Patches voted per image
    #[arg(long)]
    patches: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    patches: Option<usize>,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct CountArgs {
    /// `paper`, `toy` or a NetworkSpec JSON file
    #[arg(long, default_value = "paper")]
    spec: String,
    #[arg(long, value_enum, default_value = "hierarchical")]
    head: HeadArg,
}

/// Bad invocation or configuration: exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(e: &anyhow::Error) -> (u8, &'static str) {
    for cause in e.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return (1, "usage");
        }
        if let Some(h) = cause.downcast_ref::<HcbError>() {
            return match h {
                HcbError::Config(_) => (1, "usage"),
                h if h.is_divergence() => (3, "divergence"),
                _ => (2, "data"),
            };
        }
        if let Some(hcb_core::Error::Divergence { .. }) = cause.downcast_ref::<hcb_core::Error>() {
            return (3, "divergence");
        }
    }
    (2, "data")
}

/// The error chain joined by `: `, skipping causes a parent already quotes.
fn message(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

pub fn run(args: Vec<std::ffi::OsString>) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if cli.version {
        println!("{}", json!({ "name": "hcb", "version": hcb::VERSION }));
        return 0;
    }
    let result = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| usage(format!("--threads: {e}")))
        .and_then(|pool| pool.install(|| dispatch(&cli)));
    match result {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            let (code, kind) = exit_code(&e);
            eprintln!("{}", json!({ "error": { "code": code, "kind": kind, "message": message(&e) } }));
            code
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &cli.output_dir {
        cfg.paths.output_dir = o.clone();
    }
    if let Some(c) = &cli.cache_dir {
        cfg.paths.cache_dir = Some(c.clone());
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> anyhow::Result<Value> {
    let Some(command) = &cli.command else {
        return Err(usage("a subcommand is required; see --help"));
    };
    let mut cfg = load_config(cli)?;
    let (name, mut summary) = match command {
        Command::Scan(a) => ("scan", scan(&cfg, a)?),
        Command::Folds(a) => ("folds", folds(&mut cfg, a)?),
        Command::Extract(a) => ("extract", extract(&mut cfg, a)?),
        Command::Balance(a) => ("balance", balance(&cfg, a)?),
        Command::Synth(a) => ("synth", synth(&cfg, a)?),
        Command::Train(a) => ("train", train(&mut cfg, a)?),
        Command::Eval(a) => ("eval", eval(&mut cfg, a)?),
        Command::Predict(a) => ("predict", predict(&cfg, a)?),
        Command::CountParams(a) => ("count-params", count(a)?),
    };
    summary["command"] = json!(name);
    Ok(summary)
}

fn load_manifest(cfg: &RunConfig) -> anyhow::Result<Manifest> {
    let path = cfg.manifest_file();
    if !path.exists() {
        bail!("{} not found; run `scan` or `synth` first", path.display());
    }
    Ok(read_json(&path)?)
}

/// Reads the saved fold plan, or plans and saves one from the config.
fn load_or_make_folds(cfg: &RunConfig, manifest: &Manifest) -> anyhow::Result<FoldPlan> {
    let path = cfg.folds_file();
    if path.exists() {
        return Ok(read_json(&path)?);
    }
    let plan = make_folds(manifest, cfg.folds.n_folds, cfg.folds.val_fraction, cfg.folds.seed)?;
    write_json(&path, &plan)?;
    Ok(plan)
}

/// Opens the patch cache, extracting it first if it does not exist yet.
fn open_or_build_cache(cfg: &RunConfig, manifest: &Manifest) -> anyhow::Result<PatchCache> {
    let path = cfg.cache_file();
    if !path.exists() {
        eprintln!("{}", json!({ "note": "building patch cache", "path": path }));
        build_cache(&path, manifest, cfg.dataset_root(), &cfg.patches, cfg.patch_count)?;
    }
    Ok(PatchCache::open(&path)?)
}

fn heads(cfg: &RunConfig, arg: Option<HeadArg>) -> Vec<HeadKind> {
    match arg {
        None => cfg.heads.clone(),
        Some(HeadArg::Hierarchical) => vec![HeadKind::Hierarchical],
        Some(HeadArg::Flat) => vec![HeadKind::Flat],
        Some(HeadArg::Both) => vec![HeadKind::Hierarchical, HeadKind::Flat],
    }
}

fn fold_list(plan: &FoldPlan, chosen: &[usize]) -> anyhow::Result<Vec<usize>> {
    if chosen.is_empty() {
        return Ok(plan.folds.keys().copied().collect());
    }
    for &f in chosen {
        plan.fold(f)?;
    }
    let mut v = chosen.to_vec();
    v.sort_unstable();
    v.dedup();
    Ok(v)
}

fn scan(cfg: &RunConfig, a: &ScanArgs) -> anyhow::Result<Value> {
    let root = a.root.clone().or_else(|| cfg.paths.dataset_root.clone()).ok_or_else(|| usage("scan needs --root"))?;
    let pattern = NamePattern::new(a.pattern.as_deref().unwrap_or(&cfg.name_pattern)).map_err(|e| usage(e.to_string()))?;
    let ingested = ingest_dataset(&root, &pattern, cfg.patches.size as u32)?;
    let raw = hierarchy_stats(&ingested.manifest);
    let manifest = if cfg.apply_filters && !a.no_filters {
        apply_filters(&ingested.manifest, &cfg.filters)
    } else {
        ingested.manifest
    };
    let stats = hierarchy_stats(&manifest);
    write_json(&cfg.manifest_file(), &manifest)?;
    write_json(&cfg.output_dir().join("scan_skips.json"), &ingested.skips)?;
    Ok(json!({
        "root": root,
        "records": manifest.len(),
        "brands": stats.brands,
        "models": stats.total_models,
        "devices": stats.total_devices,
        "before_filters": { "models": raw.total_models, "devices": raw.total_devices, "images": raw.total_images },
        "skipped": ingested.skips.skipped.len(),
        "manifest": cfg.manifest_file(),
    }))
}

fn folds(cfg: &mut RunConfig, a: &FoldsArgs) -> anyhow::Result<Value> {
    let manifest = load_manifest(cfg)?;
    let s = &mut cfg.folds;
    s.n_folds = a.n_folds.unwrap_or(s.n_folds);
    s.val_fraction = a.val_fraction.unwrap_or(s.val_fraction);
    s.seed = a.seed.unwrap_or(s.seed);
    let plan = make_folds(&manifest, s.n_folds, s.val_fraction, s.seed)?;
    write_json(&cfg.folds_file(), &plan)?;
    let per_fold: Vec<Value> = plan
        .folds
        .iter()
        .map(|(f, fold)| {
            let split = fold.split(&manifest);
            json!({ "fold": f, "held_out_devices": fold.held_out.len(), "train": split.train.len(),
                    "validation": split.validation.len(), "test": split.test.len() })
        })
        .collect();
    Ok(json!({ "n_folds": plan.n_folds, "seed": plan.seed, "folds": per_fold, "path": cfg.folds_file() }))
}

fn parse_thresholds(s: &str) -> anyhow::Result<(f64, f64)> {
    let (lo, hi) = s.split_once(',').ok_or_else(|| usage("--thresholds expects LOW,HIGH"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|_| usage(format!("bad threshold {v:?}")));
    Ok((p(lo)?, p(hi)?))
}

fn extract(cfg: &mut RunConfig, a: &ExtractArgs) -> anyhow::Result<Value> {
    if let Some(t) = &a.thresholds {
        (cfg.patches.low, cfg.patches.high) = parse_thresholds(t)?;
    }
    cfg.patches.size = a.size.unwrap_or(cfg.patches.size);
    cfg.patches.stride = a.stride.unwrap_or(cfg.patches.stride);
    cfg.patch_count = a.patch_count.unwrap_or(cfg.patch_count);
    if let Some(r) = &a.root {
        cfg.paths.dataset_root = Some(r.clone());
    }
    cfg.validate()?;
    let manifest = load_manifest(cfg)?;
    let path = cfg.cache_file();
    let index = build_cache(&path, &manifest, cfg.dataset_root(), &cfg.patches, cfg.patch_count)?;
    let c = index.counts();
    Ok(json!({
        "images": index.images.len(),
        "patches": index.n_patches(),
        "homogeneous": c.homogeneous,
        "non_homogeneous": c.non_homogeneous,
        "saturated": c.saturated,
        "config": cfg.patches,
        "cache": path,
    }))
}

fn balance(cfg: &RunConfig, a: &BalanceArgs) -> anyhow::Result<Value> {
    let manifest = load_manifest(cfg)?;
    let plan = load_or_make_folds(cfg, &manifest)?;
    let fold = plan.fold(a.fold)?;
    let train: Vec<ImageRecord> = fold.split(&manifest).train.into_iter().cloned().collect();
    let k = a.k.unwrap_or(cfg.train.k);
    let quotas = SamplingPlan::for_records(&train, k)?;
    write_json(&cfg.output_dir().join("balance").join(format!("fold{}.json", a.fold)), &quotas)?;
    let mut summary = json!({
        "fold": a.fold,
        "k": k,
        "n_b": quotas.n_b,
        "brands": quotas.brands,
        "images": quotas.images.len(),
        "planned_total": quotas.total_quota(),
    });
    let cache = cfg.cache_file();
    if cache.exists() {
        let avail = PatchCache::open(&cache)?.index().availability();
        let realized = realize_plan(&quotas, &avail, 0)?;
        summary["realized_total"] = json!(realized.total());
        summary["deficit"] = json!(realized.deficits.values().sum::<u64>());
    }
    Ok(summary)
}

fn synth(cfg: &RunConfig, a: &SynthArgs) -> anyhow::Result<Value> {
    let spec: SynthSpec = if a.spec == "default" {
        SynthSpec::default()
    } else {
        let text = std::fs::read_to_string(&a.spec).with_context(|| format!("reading {}", a.spec))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", a.spec)))?
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let out = cfg.output_dir();
    let images_dir = out.join("synth").join("images");
    std::fs::create_dir_all(&images_dir).with_context(|| format!("creating {}", images_dir.display()))?;
    let per_model = spec.devices_per_model * spec.images_per_device;
    let records: Vec<ImageRecord> = spec.records();
    records.par_iter().enumerate().try_for_each(|(i, r)| -> anyhow::Result<()> {
        let img = render(&spec, i / per_model, (i / spec.images_per_device) % spec.devices_per_model, i % spec.images_per_device);
        imageio::save_png(&images_dir.join(&r.path), &img)?;
        Ok(())
    })?;
    let rel = |p: &str| format!("synth/images/{p}");
    let manifest = Manifest::new(records.into_iter().map(|r| ImageRecord { path: rel(&r.path), ..r }).collect())?;
    write_json(&cfg.manifest_file(), &manifest)?;
    write_json(&out.join("synth").join("spec.json"), &spec)?;
    let stats = hierarchy_stats(&manifest);
    Ok(json!({
        "images": manifest.len(),
        "brands": stats.brands,
        "models": stats.total_models,
        "devices": stats.total_devices,
        "dataset_root": out,
        "manifest": cfg.manifest_file(),
    }))
}

fn train(cfg: &mut RunConfig, a: &TrainArgs) -> anyhow::Result<Value> {
    let t = &mut cfg.train;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.k = a.k.unwrap_or(t.k);
    t.val_k = a.val_k.unwrap_or(t.val_k);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.lr0 = a.lr0.unwrap_or(t.lr0);
    t.alpha = a.alpha.unwrap_or(t.alpha);
    t.seed = a.seed.unwrap_or(t.seed);
    cfg.validate()?;
    let manifest = load_manifest(cfg)?;
    let plan = load_or_make_folds(cfg, &manifest)?;
    let cache = open_or_build_cache(cfg, &manifest)?;
    let folds = fold_list(&plan, &a.fold)?;
    let out = cfg.output_dir();
    let mut per_head = BTreeMap::new();
    for head in heads(cfg, a.head) {
        let spec = cfg.network_spec(manifest.hierarchy(), head)?;
        let size = cache.index().config.size;
        if spec.input[1] != size || spec.input[2] != size {
            return Err(usage(format!("network input {:?} does not match cached {size}×{size} patches", spec.input)));
        }
        let job = TrainJob {
            manifest: &manifest,
            plan: &plan,
            spec: &spec,
            source: &cache,
            cfg: &cfg.train,
            config_hash: cfg.fingerprint(),
        };
        let log = |h: HeadKind, f: usize, e: &hcb_core::pipeline::EpochLog| {
            eprintln!("{}", json!({ "head": head_name(h), "fold": f, "epoch": e }));
        };
        let runs = experiment::train_folds(out, &job, &folds, &log)?;
        for r in &runs {
            let lines: String = r.history.iter().map(|e| format!("{}\n", json!(e))).collect();
            experiment::write_file(&out.join("logs").join(format!("{}_fold{}.jsonl", head_name(head), r.fold)), lines.as_bytes())?;
        }
        write_json(&out.join("runs").join(format!("{}.json", head_name(head))), &runs)?;
        let brief: Vec<Value> = runs
            .iter()
            .map(|r| json!({ "fold": r.fold, "epoch": r.epoch, "val_accuracy": r.val_accuracy,
                             "train_patches": r.train_patches, "checkpoint": r.checkpoint }))
            .collect();
        per_head.insert(head_name(head), json!({ "params": spec.param_count()?, "folds": brief }));
    }
    Ok(json!({ "config_hash": cfg.fingerprint(), "seed": cfg.train.seed, "version": hcb::VERSION, "heads": per_head }))
}

fn eval(cfg: &mut RunConfig, a: &EvalArgs) -> anyhow::Result<Value> {
    let manifest = load_manifest(cfg)?;
    let plan = load_or_make_folds(cfg, &manifest)?;
    let cache = open_or_build_cache(cfg, &manifest)?;
    let folds = fold_list(&plan, &a.fold)?;
    let p = a.patches.unwrap_or(cfg.train.patches_per_image_eval);
    let out = cfg.output_dir();
    let mut reports = Vec::new();
    for head in heads(cfg, a.head) {
        reports.push(experiment::evaluate_head(out, &manifest, &plan, &cache, head, &folds, p)?);
    }
    let table = experiment::write_table(out, &reports.iter().collect::<Vec<_>>())?;
    eprint!("{table}");
    let per_head: BTreeMap<&str, Value> = reports
        .iter()
        .map(|r| {
            let accs: Vec<f64> = r.folds.iter().map(|f| f.accuracy).collect();
            (head_name(r.head), json!({ "folds": accs, "mean": r.mean, "std_sample": r.std_sample,
                                         "std_population": r.std_population, "images": r.rows.len() }))
        })
        .collect();
    Ok(json!({ "patches_per_image": p, "heads": per_head, "table": out.join("reports").join("table.txt") }))
}

fn predict(cfg: &RunConfig, a: &PredictArgs) -> anyhow::Result<Value> {
    let (net, meta) = checkpoint::load(&a.checkpoint)?;
    let p = a.patches.unwrap_or(cfg.train.patches_per_image_eval);
    let spec = net.spec();
    let predictions: Vec<Value> = a
        .images
        .par_iter()
        .map(|path| {
            let img = imageio::load_rgb8(path)?;
            let d = predict_image(&net, &img, p, &cfg.patches)?;
            let b = &spec.hierarchy[d.brand];
            Ok(json!({ "image": path, "brand": b.brand, "model": b.models[d.model], "brand_tally": d.brand_tally,
                       "model_tally": d.model_tally, "n_patches": d.n_patches }))
        })
        .collect::<anyhow::Result<_>>()?;
    write_json(&cfg.output_dir().join("predictions.json"), &predictions)?;
    Ok(json!({ "checkpoint": a.checkpoint, "epoch": meta.epoch, "predictions": predictions }))
}

fn count(a: &CountArgs) -> anyhow::Result<Value> {
    let head = match a.head {
        HeadArg::Flat => HeadKind::Flat,
        HeadArg::Hierarchical => HeadKind::Hierarchical,
        HeadArg::Both => return Err(usage("count-params takes a single head")),
    };
    let spec = match a.spec.as_str() {
        "paper" => NetworkSpec::paper_default().with_head(head),
        "toy" => NetworkSpec::toy(SynthSpec::default().hierarchy(), head),
        path => {
            let text = std::fs::read_to_string(Path::new(path)).with_context(|| format!("reading {path}"))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{path}: {e}")))?
        }
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let net = hcb_core::hcbnet::build_network::<f32>(&spec, 0)?;
    let n = count_params(&net);
    if n != spec.param_count()? {
        return Err(anyhow!("parameter count mismatch"));
    }
    Ok(json!({ "params": n, "head": head_name(spec.head), "brands": spec.hierarchy.len(), "models": spec.n_models() }))
}
