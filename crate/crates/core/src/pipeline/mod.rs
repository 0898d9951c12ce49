//! Per-fold training with best-epoch selection, and image-level evaluation by
//! patch majority voting.

mod report;
mod vote;

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{lr_schedule, Graph, LossKind, Sgd};
use crate::balance::{realize_plan, PatchAvailability, SamplingPlan};
use crate::hcbnet::{HeadKind, Mode, Network, NetworkSpec, SampleLabel};
use crate::manifest::{DeviceKey, Fold, ImageRecord, Manifest};
use crate::{rng, Error, Result, Tensor};

pub use report::{fold_stats, FoldAccuracy, ImageRow, PredictionReport};
pub use vote::{argmax, decide, infer_patches, predict_image, tally, ImageDecision, PatchOutput, Tally};

fn default_val_k() -> u64 {
    26_000
}

fn default_true() -> bool {
    true
}

/// Training hyperparameters. Defaults are the full-scale values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub lr_gamma: f64,
    pub weight_decay: f64,
    /// Weight of the model-level loss.
    pub alpha: f64,
    /// Global training patch budget per fold.
    pub k: u64,
    /// Patch budget of the validation stream, balanced the same way.
    #[serde(default = "default_val_k")]
    pub val_k: u64,
    pub patches_per_image_eval: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Apply weight decay to biases and batchnorm affine parameters too.
    #[serde(default = "default_true")]
    pub decay_bias_and_norm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 512,
            lr0: 0.1,
            momentum: 0.9,
            lr_gamma: 0.9,
            weight_decay: 0.005,
            alpha: 1.0,
            k: 260_000,
            val_k: default_val_k(),
            patches_per_image_eval: 200,
            seed: 0,
            loss: LossKind::BceOverSoftmax,
            decay_bias_and_norm: true,
        }
    }
}

impl TrainConfig {
    // negated comparisons so that NaN fails too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(alloc::format!("{what} must be positive")));
        if self.epochs == 0 {
            return bad("epochs");
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return bad("lr0");
        }
        if !(self.lr_gamma > 0.0) || !self.lr_gamma.is_finite() {
            return bad("lr_gamma");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay and alpha must be non-negative".into()));
        }
        if self.k == 0 || self.val_k == 0 {
            return bad("k");
        }
        if self.patches_per_image_eval == 0 {
            return bad("patches_per_image_eval");
        }
        Ok(())
    }

    fn sgd(&self) -> Sgd {
        Sgd { momentum: self.momentum, weight_decay: self.weight_decay, decay_bias_and_norm: self.decay_bias_and_norm }
    }
}

/// One training or validation patch with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRef {
    pub image: String,
    pub device: DeviceKey,
    /// Position in the image's tile ranking.
    pub rank: usize,
    pub label: SampleLabel,
}

/// Supplies ranked, mean-subtracted patches as `3×S×S` planes.
pub trait PatchSource: PatchAvailability {
    fn load(&self, image: &str, rank: usize, out: &mut [f32]) -> Result<()>;
}

/// Balanced training and validation streams of one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldData {
    pub fold: usize,
    pub held_out: Vec<DeviceKey>,
    pub train: Vec<PatchRef>,
    pub validation: Vec<PatchRef>,
    /// Per-image quota shortfalls of the training stream.
    pub deficits: u64,
}

fn label_for(spec: &NetworkSpec, r: &ImageRecord) -> Result<SampleLabel> {
    let (brand, model) = spec
        .label_of(&r.brand, &r.model)
        .ok_or_else(|| Error::UnknownBrand(r.model_key()))?;
    Ok(SampleLabel { brand, model })
}

fn stream(
    spec: &NetworkSpec,
    records: &[&ImageRecord],
    k: u64,
    source: &impl PatchSource,
    seed: u64,
) -> Result<(Vec<PatchRef>, u64)> {
    if records.is_empty() {
        return Ok((Vec::new(), 0));
    }
    let owned: Vec<ImageRecord> = records.iter().map(|r| (*r).clone()).collect();
    let plan = SamplingPlan::for_records(&owned, k)?;
    let sample = realize_plan(&plan, source, seed)?;
    let by_path: alloc::collections::BTreeMap<&str, &ImageRecord> =
        records.iter().map(|r| (r.path.as_str(), *r)).collect();
    let mut refs = Vec::with_capacity(sample.total());
    for (image, ranks) in &sample.entries {
        let r = by_path[image.as_str()];
        let label = label_for(spec, r)?;
        for &rank in ranks {
            refs.push(PatchRef { image: image.clone(), device: r.device_key(), rank, label });
        }
    }
    Ok((refs, sample.deficits.values().sum()))
}

/// Builds the fold's balanced streams from its training and validation images.
pub fn build_fold_data(
    fold_index: usize,
    fold: &Fold,
    manifest: &Manifest,
    spec: &NetworkSpec,
    source: &impl PatchSource,
    cfg: &TrainConfig,
) -> Result<FoldData> {
    let split = fold.split(manifest);
    if split.train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let seed = rng::derive(cfg.seed, fold_index as u64);
    let (train, deficits) = stream(spec, &split.train, cfg.k, source, seed)?;
    let (validation, _) = stream(spec, &split.validation, cfg.val_k, source, seed)?;
    let data = FoldData { fold: fold_index, held_out: fold.held_out.clone(), train, validation, deficits };
    check_isolation(&data)?;
    Ok(data)
}

/// Fails if any training or validation patch comes from a held-out device.
pub fn check_isolation(data: &FoldData) -> Result<()> {
    for p in data.train.iter().chain(&data.validation) {
        if data.held_out.contains(&p.device) {
            return Err(Error::Leakage(alloc::format!("{} (fold {})", p.image, data.fold)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
}

/// Best-epoch network and the training history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network<f32>,
    pub epoch: usize,
    pub lr: f64,
    pub val_accuracy: f64,
    pub history: Vec<EpochLog>,
}

fn patch_len(spec: &NetworkSpec) -> usize {
    spec.input.iter().product()
}

fn load_batch(spec: &NetworkSpec, source: &impl PatchSource, refs: &[&PatchRef]) -> Result<Tensor<f32>> {
    let len = patch_len(spec);
    let mut values = vec![0.0f32; refs.len() * len];
    for (r, out) in refs.iter().zip(values.chunks_exact_mut(len)) {
        source.load(&r.image, r.rank, out)?;
    }
    let [c, h, w] = spec.input;
    Tensor::new(&[refs.len(), c, h, w], values)
}

fn train_step(
    net: &mut Network<f32>,
    x: Tensor<f32>,
    labels: &[SampleLabel],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    let (grads, upd, loss) = {
        let mut g = Graph::new(net.params());
        let xn = g.input(x)?;
        let (loss, upd) = match net.spec().head {
            HeadKind::Hierarchical => {
                let (out, upd) = net.forward_hierarchical(&mut g, xn, Mode::Train)?;
                (net.loss_total(&mut g, &out, labels, cfg.alpha, cfg.loss)?.total, upd)
            }
            HeadKind::Flat => {
                let (logits, upd) = net.forward_flat(&mut g, xn, Mode::Train)?;
                (net.loss_flat(&mut g, logits, labels, cfg.loss)?, upd)
            }
        };
        let value = g.value(loss).item() as f64;
        (g.backward(loss)?, upd, value)
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    cfg.sgd().step(net.params_mut(), &grads, lr)?;
    net.apply_bn_updates(upd);
    Ok(loss)
}

/// Fraction of patches whose predicted `(brand, model)` is exact.
pub fn patch_accuracy(
    net: &Network<f32>,
    refs: &[PatchRef],
    source: &impl PatchSource,
    batch: usize,
) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::InvalidConfig("empty validation stream".into()));
    }
    let mut correct = 0usize;
    for chunk in refs.chunks(batch.max(1)) {
        let idx: Vec<&PatchRef> = chunk.iter().collect();
        let x = load_batch(net.spec(), source, &idx)?;
        for (out, r) in infer_patches(net, x)?.iter().zip(chunk) {
            if out.prediction(net.spec()) == (r.label.brand, r.label.model) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / refs.len() as f64)
}

/// Runs `cfg.epochs` epochs of SGD over the shuffled training stream and
/// returns the epoch with the highest patch-level validation accuracy (the
/// earliest on ties). `log` sees every finished epoch.
pub fn train_fold(
    mut net: Network<f32>,
    data: &FoldData,
    source: &impl PatchSource,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.len() < 2 {
        return Err(Error::EmptyTrainingSet);
    }
    check_isolation(data)?;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best: Option<TrainOutcome> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.lr0, cfg.lr_gamma);
        let mut r = rng::rng_for(cfg.seed, &alloc::format!("fold{}/epoch{epoch}", data.fold));
        order.shuffle(&mut r);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            // a lone sample cannot be batch-normalized in train mode
            if chunk.len() < 2 {
                continue;
            }
            let refs: Vec<&PatchRef> = chunk.iter().map(|&i| &data.train[i]).collect();
            let labels: Vec<SampleLabel> = refs.iter().map(|r| r.label).collect();
            let x = load_batch(net.spec(), source, &refs)?;
            let loss = train_step(&mut net, x, &labels, cfg, lr)
                .map_err(|e| Error::Divergence { step, source: Box::new(e) })?;
            loss_sum += loss;
            steps += 1;
            step += 1;
        }
        let val_accuracy = patch_accuracy(&net, &data.validation, source, cfg.batch_size).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Divergence { step, source: Box::new(e) },
            other => other,
        })?;
        let entry = EpochLog { epoch, lr, steps, mean_loss: loss_sum / steps.max(1) as f64, val_accuracy };
        log(&entry);
        history.push(entry);
        if best.as_ref().is_none_or(|b| val_accuracy > b.val_accuracy) {
            best = Some(TrainOutcome { network: net.clone(), epoch, lr, val_accuracy, history: Vec::new() });
        }
    }
    let mut out = best.expect("at least one epoch");
    out.history = history;
    Ok(out)
}

/// Votes every test image of the fold with up to `p` ranked patches.
pub fn evaluate_fold(
    net: &Network<f32>,
    fold_index: usize,
    fold: &Fold,
    manifest: &Manifest,
    source: &impl PatchSource,
    p: usize,
) -> Result<Vec<ImageRow>> {
    if p == 0 {
        return Err(Error::ZeroPatchCount);
    }
    let spec = net.spec();
    let split = fold.split(manifest);
    let len = patch_len(spec);
    let mut rows = Vec::with_capacity(split.test.len());
    for r in split.test {
        let truth = label_for(spec, r)?;
        let avail = source.available(&r.path).ok_or_else(|| Error::MissingFromCache(r.path.clone()))?;
        let n = avail.min(p);
        if n == 0 {
            return Err(Error::MissingFromCache(r.path.clone()));
        }
        let mut values = vec![0.0f32; n * len];
        for (rank, out) in values.chunks_exact_mut(len).enumerate() {
            source.load(&r.path, rank, out)?;
        }
        let [c, h, w] = spec.input;
        let mut outputs = Vec::with_capacity(n);
        for chunk in values.chunks(len * 64) {
            let x = Tensor::new(&[chunk.len() / len, c, h, w], chunk.to_vec())?;
            outputs.extend(infer_patches(net, x)?);
        }
        let d = decide(spec, &outputs)?;
        rows.push(ImageRow::new(spec, fold_index, r, truth, &d));
    }
    Ok(rows)
}

/// Image-level report over every fold of `folds`, one network per fold.
pub fn evaluate_folds(
    nets: &alloc::collections::BTreeMap<usize, Network<f32>>,
    folds: &crate::manifest::FoldPlan,
    manifest: &Manifest,
    source: &impl PatchSource,
    p: usize,
) -> Result<PredictionReport> {
    let mut rows = Vec::new();
    let mut head = None;
    for (&i, fold) in &folds.folds {
        let net = nets.get(&i).ok_or(Error::MissingFold(i))?;
        head.get_or_insert(net.spec().head);
        rows.extend(evaluate_fold(net, i, fold, manifest, source, p)?);
    }
    let indices: Vec<usize> = folds.folds.keys().copied().collect();
    PredictionReport::from_rows(head.unwrap_or(HeadKind::Hierarchical), rows, &indices)
}

#[cfg(test)]
mod tests;
