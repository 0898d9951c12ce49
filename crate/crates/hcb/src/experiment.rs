//! Per-fold training, checkpointing and evaluation.

use std::path::{Path, PathBuf};

use hcb_core::hcbnet::{build_network, HeadKind, NetworkSpec};
use hcb_core::manifest::{FoldPlan, Manifest};
use hcb_core::pipeline::{build_fold_data, evaluate_fold, train_fold, EpochLog, PatchSource, PredictionReport};
use hcb_core::rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::{Error, Result};

pub fn head_name(head: HeadKind) -> &'static str {
    match head {
        HeadKind::Hierarchical => "hierarchical",
        HeadKind::Flat => "flat",
    }
}

pub fn checkpoint_path(out: &Path, head: HeadKind, fold: usize) -> PathBuf {
    out.join("checkpoints").join(format!("{}_fold{fold}.hcbk", head_name(head)))
}

pub fn report_path(out: &Path, head: HeadKind, ext: &str) -> PathBuf {
    out.join("reports").join(format!("{}.{ext}", head_name(head)))
}

/// Initialization seed of a fold's network; shared by both heads.
pub fn init_seed(seed: u64, fold: usize) -> u64 {
    rng::derive_str(seed, &format!("init/fold{fold}"))
}

/// Runs `f` on a pool of `threads` workers (0 picks the core count).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRun {
    pub head: HeadKind,
    pub fold: usize,
    pub epoch: usize,
    pub lr: f64,
    pub val_accuracy: f64,
    pub train_patches: usize,
    pub validation_patches: usize,
    pub deficit: u64,
    pub history: Vec<EpochLog>,
    pub checkpoint: PathBuf,
}

/// Everything a training run needs besides the output directory.
pub struct TrainJob<'a, S> {
    pub manifest: &'a Manifest,
    pub plan: &'a FoldPlan,
    pub spec: &'a NetworkSpec,
    pub source: &'a S,
    pub cfg: &'a hcb_core::pipeline::TrainConfig,
    pub config_hash: String,
}

/// Trains every fold in `folds` (in parallel across folds) and saves each
/// best-epoch checkpoint under `out`. Each fold is sequential internally,
/// so results do not depend on the worker count.
pub fn train_folds<S: PatchSource + Sync>(
    out: &Path,
    job: &TrainJob<'_, S>,
    folds: &[usize],
    log: &(dyn Fn(HeadKind, usize, &EpochLog) + Sync),
) -> Result<Vec<FoldRun>> {
    let head = job.spec.head;
    folds
        .par_iter()
        .map(|&f| {
            let fold = job.plan.fold(f)?;
            let data = build_fold_data(f, fold, job.manifest, job.spec, job.source, job.cfg)?;
            let net = build_network::<f32>(job.spec, init_seed(job.cfg.seed, f))?;
            let outcome = train_fold(net, &data, job.source, job.cfg, &mut |e| log(head, f, e))?;
            let path = checkpoint_path(out, head, f);
            let meta = CheckpointMeta::for_network(
                &outcome.network,
                outcome.epoch,
                outcome.lr,
                outcome.val_accuracy,
                job.config_hash.clone(),
            );
            checkpoint::save(&path, &outcome.network, &meta)?;
            Ok(FoldRun {
                head,
                fold: f,
                epoch: outcome.epoch,
                lr: outcome.lr,
                val_accuracy: outcome.val_accuracy,
                train_patches: data.train.len(),
                validation_patches: data.validation.len(),
                deficit: data.deficits,
                history: outcome.history,
                checkpoint: path,
            })
        })
        .collect()
}

/// Loads each fold's checkpoint, votes on its held-out images with up to
/// `p` patches, and writes the JSON and CSV reports.
pub fn evaluate_head<S: PatchSource + Sync>(
    out: &Path,
    manifest: &Manifest,
    plan: &FoldPlan,
    source: &S,
    head: HeadKind,
    folds: &[usize],
    p: usize,
) -> Result<PredictionReport> {
    let per_fold: Vec<Vec<_>> = folds
        .par_iter()
        .map(|&f| {
            let fold = plan.fold(f)?;
            let (net, _) = checkpoint::load(&checkpoint_path(out, head, f))?;
            if net.spec().head != head {
                return Err(Error::Config(format!("checkpoint for fold {f} has a {} head", head_name(net.spec().head))));
            }
            Ok(evaluate_fold(&net, f, fold, manifest, source, p)?)
        })
        .collect::<Result<_>>()?;
    let report = PredictionReport::from_rows(head, per_fold.into_iter().flatten().collect(), folds)?;
    write_report(out, &report)?;
    Ok(report)
}

pub fn write_report(out: &Path, report: &PredictionReport) -> Result<()> {
    let json = report_path(out, report.head, "json");
    write_file(&json, &serde_json::to_vec_pretty(report).expect("report serializes"))?;
    write_file(&report_path(out, report.head, "csv"), report.to_csv().as_bytes())
}

/// Writes the fold table of every report to `reports/table.txt`.
pub fn write_table(out: &Path, reports: &[&PredictionReport]) -> Result<String> {
    let named: Vec<(&str, &PredictionReport)> = reports.iter().map(|r| (head_name(r.head), *r)).collect();
    let table = PredictionReport::table(&named);
    write_file(&out.join("reports").join("table.txt"), table.as_bytes())?;
    Ok(table)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    std::fs::write(path, bytes).map_err(Error::io(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, &serde_json::to_vec_pretty(value).expect("value serializes"))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    serde_json::from_slice(&bytes).map_err(Error::json(path))
}
