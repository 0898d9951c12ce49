use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::hcbnet::{HeadKind, Network, NetworkSpec};
use crate::image::{Image, Pixel};
use crate::patchex::{select_patches, PatchConfig};
use crate::{Error, Result, Tensor};

/// Probabilities produced for one patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PatchOutput {
    Hierarchical {
        brand_probs: Vec<f64>,
        /// Per brand; `None` for single-model brands.
        model_probs: Vec<Option<Vec<f64>>>,
    },
    Flat {
        probs: Vec<f64>,
    },
}

impl PatchOutput {
    /// Patch-level `(brand, model)` decision.
    pub fn prediction(&self, spec: &NetworkSpec) -> (usize, usize) {
        match self {
            PatchOutput::Hierarchical { brand_probs, model_probs } => {
                let b = argmax(brand_probs);
                let m = model_probs.get(b).and_then(|m| m.as_deref()).map_or(0, argmax);
                (b, m)
            }
            PatchOutput::Flat { probs } => spec.unflatten(argmax(probs)),
        }
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Vote counts and summed probabilities per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub counts: Vec<usize>,
    pub prob_sums: Vec<f64>,
}

impl Tally {
    /// Most votes; ties go to the larger summed probability, then to the
    /// lower index.
    pub fn winner(&self) -> usize {
        let mut best = 0;
        for i in 1..self.counts.len() {
            let (c, b) = (self.counts[i], self.counts[best]);
            if c > b || (c == b && self.prob_sums[i] > self.prob_sums[best]) {
                best = i;
            }
        }
        best
    }
}

/// Tallies per-row argmax votes over `k` classes. Probabilities are summed
/// in sorted order so the result does not depend on row order.
pub fn tally<'a>(rows: impl IntoIterator<Item = &'a [f64]>, k: usize) -> Tally {
    let mut counts = vec![0usize; k];
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); k];
    for row in rows {
        counts[argmax(row)] += 1;
        for (c, &p) in row.iter().enumerate().take(k) {
            per_class[c].push(p);
        }
    }
    let prob_sums = per_class
        .into_iter()
        .map(|mut v| {
            v.sort_by(f64::total_cmp);
            v.iter().sum()
        })
        .collect();
    Tally { counts, prob_sums }
}

/// Image-level decision from patch votes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDecision {
    pub brand: usize,
    pub model: usize,
    pub brand_tally: Vec<usize>,
    /// Votes among the predicted brand's models.
    pub model_tally: Vec<usize>,
    pub n_patches: usize,
}

/// Majority vote over patches. Hierarchical: vote the brand, then vote the
/// model among that brand's model-branch argmaxes over the same patches.
/// Flat: vote over all models and report the winner's brand.
pub fn decide(spec: &NetworkSpec, outputs: &[PatchOutput]) -> Result<ImageDecision> {
    if outputs.is_empty() {
        return Err(Error::ZeroPatchCount);
    }
    let k = spec.hierarchy.len();
    match spec.head {
        HeadKind::Hierarchical => {
            let mut brand_rows = Vec::with_capacity(outputs.len());
            for o in outputs {
                match o {
                    PatchOutput::Hierarchical { brand_probs, .. } if brand_probs.len() == k => {
                        brand_rows.push(brand_probs.as_slice())
                    }
                    _ => return Err(mismatch(o)),
                }
            }
            let bt = tally(brand_rows, k);
            let brand = bt.winner();
            let n_models = spec.hierarchy[brand].models.len();
            let (model, model_tally) = if n_models > 1 {
                let mut rows = Vec::with_capacity(outputs.len());
                for o in outputs {
                    match o {
                        PatchOutput::Hierarchical { model_probs, .. } => match model_probs.get(brand) {
                            Some(Some(m)) if m.len() == n_models => rows.push(m.as_slice()),
                            _ => return Err(mismatch(o)),
                        },
                        _ => return Err(mismatch(o)),
                    }
                }
                let mt = tally(rows, n_models);
                (mt.winner(), mt.counts)
            } else {
                (0, vec![bt.counts[brand]])
            };
            Ok(ImageDecision { brand, model, brand_tally: bt.counts, model_tally, n_patches: outputs.len() })
        }
        HeadKind::Flat => {
            let m = spec.n_models();
            let mut rows = Vec::with_capacity(outputs.len());
            for o in outputs {
                match o {
                    PatchOutput::Flat { probs } if probs.len() == m => rows.push(probs.as_slice()),
                    _ => return Err(mismatch(o)),
                }
            }
            let t = tally(rows, m);
            let (brand, model) = spec.unflatten(t.winner());
            let mut brand_tally = vec![0; k];
            for (i, &c) in t.counts.iter().enumerate() {
                brand_tally[spec.unflatten(i).0] += c;
            }
            let start = spec.flat_index(brand, 0);
            let model_tally = t.counts[start..start + spec.hierarchy[brand].models.len()].to_vec();
            Ok(ImageDecision { brand, model, brand_tally, model_tally, n_patches: outputs.len() })
        }
    }
}

fn mismatch(o: &PatchOutput) -> Error {
    Error::ShapeMismatch { op: "decide", detail: alloc::format!("patch output does not fit the network: {o:?}") }
}

fn rows_f64(t: &Tensor<f32>) -> impl Iterator<Item = Vec<f64>> + '_ {
    let k = t.shape()[1];
    t.values().chunks_exact(k).map(|r| r.iter().map(|&v| v as f64).collect())
}

/// Eval-mode probabilities for a `N×3×S×S` batch of preprocessed patches.
pub fn infer_patches(net: &Network<f32>, x: Tensor<f32>) -> Result<Vec<PatchOutput>> {
    let spec = net.spec();
    match spec.head {
        HeadKind::Hierarchical => {
            let out = net.infer_hierarchical(x)?;
            let mut per_brand: Vec<Option<Vec<Vec<f64>>>> = spec
                .hierarchy
                .iter()
                .map(|b| out.model_probs.get(&b.brand).map(|t| rows_f64(t).collect()))
                .collect();
            let brand_rows: Vec<Vec<f64>> = rows_f64(&out.brand_probs).collect();
            let n = brand_rows.len();
            let mut outputs = Vec::with_capacity(n);
            for (i, brand_probs) in brand_rows.into_iter().enumerate().rev() {
                let model_probs = per_brand.iter_mut().map(|m| m.as_mut().map(|rows| rows.remove(i))).collect();
                outputs.push(PatchOutput::Hierarchical { brand_probs, model_probs });
            }
            outputs.reverse();
            Ok(outputs)
        }
        HeadKind::Flat => {
            let (_, p) = net.infer_flat(x)?;
            Ok(rows_f64(&p).map(|probs| PatchOutput::Flat { probs }).collect())
        }
    }
}

/// Selects up to `p` ranked patches of `img` and votes on them.
pub fn predict_image<P: Pixel>(
    net: &Network<f32>,
    img: &Image<P>,
    p: usize,
    cfg: &PatchConfig,
) -> Result<ImageDecision> {
    let sel = select_patches(img, p, 0, cfg)?;
    let [c, h, w] = net.spec().input;
    if sel.patches.first().is_some_and(|q| q.size != h || q.size != w) {
        return Err(Error::ShapeMismatch {
            op: "predict_image",
            detail: alloc::format!("patch size {} for a {h}×{w} network", cfg.size),
        });
    }
    let mut outputs = Vec::with_capacity(sel.patches.len());
    for chunk in sel.patches.chunks(64) {
        let mut values = Vec::with_capacity(chunk.len() * c * h * w);
        for q in chunk {
            values.extend_from_slice(&q.values);
        }
        outputs.extend(infer_patches(net, Tensor::new(&[chunk.len(), c, h, w], values)?)?);
    }
    decide(net.spec(), &outputs)
}
