use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use super::vote::ImageDecision;
use crate::hcbnet::{HeadKind, NetworkSpec, SampleLabel};
use crate::manifest::ImageRecord;
use crate::{Error, Result};

/// One evaluated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub fold: usize,
    pub image: String,
    pub true_brand: String,
    pub true_model: String,
    pub pred_brand: String,
    pub pred_model: String,
    pub brand_tally: Vec<usize>,
    pub model_tally: Vec<usize>,
    pub n_patches: usize,
    pub brand_correct: bool,
    /// Brand and model both right.
    pub correct: bool,
}

impl ImageRow {
    pub fn new(spec: &NetworkSpec, fold: usize, r: &ImageRecord, truth: SampleLabel, d: &ImageDecision) -> Self {
        let pb = &spec.hierarchy[d.brand];
        Self {
            fold,
            image: r.path.clone(),
            true_brand: r.brand.clone(),
            true_model: r.model.clone(),
            pred_brand: pb.brand.clone(),
            pred_model: pb.models[d.model].clone(),
            brand_tally: d.brand_tally.clone(),
            model_tally: d.model_tally.clone(),
            n_patches: d.n_patches,
            brand_correct: d.brand == truth.brand,
            correct: d.brand == truth.brand && d.model == truth.model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAccuracy {
    pub fold: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub brand_accuracy: f64,
}

/// Image-level results of every fold plus aggregates. Both standard
/// deviations are reported; `std_population` divides by the fold count,
/// `std_sample` by one less.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub head: HeadKind,
    pub rows: Vec<ImageRow>,
    pub folds: Vec<FoldAccuracy>,
    pub mean: f64,
    pub std_sample: f64,
    pub std_population: f64,
}

/// `(mean, sample std, population std)`; the sample std of a single value is 0.
pub fn fold_stats(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let sample = if values.len() > 1 { libm::sqrt(ss / (n - 1.0)) } else { 0.0 };
    (mean, sample, libm::sqrt(ss / n))
}

impl PredictionReport {
    /// Aggregates rows into per-fold accuracies. Every index in `folds` must
    /// have at least one row.
    pub fn from_rows(head: HeadKind, rows: Vec<ImageRow>, folds: &[usize]) -> Result<Self> {
        let mut per: BTreeMap<usize, (usize, usize, usize)> = folds.iter().map(|&f| (f, (0, 0, 0))).collect();
        for r in &rows {
            let e = per.get_mut(&r.fold).ok_or_else(|| Error::InvalidFolds(alloc::format!("row for unknown fold {}", r.fold)))?;
            e.0 += r.correct as usize;
            e.1 += r.brand_correct as usize;
            e.2 += 1;
        }
        let mut out = Vec::with_capacity(per.len());
        for (fold, (correct, brand, total)) in per {
            if total == 0 {
                return Err(Error::MissingFold(fold));
            }
            out.push(FoldAccuracy {
                fold,
                correct,
                total,
                accuracy: correct as f64 / total as f64,
                brand_accuracy: brand as f64 / total as f64,
            });
        }
        let accs: Vec<f64> = out.iter().map(|f| f.accuracy).collect();
        let (mean, std_sample, std_population) = fold_stats(&accs);
        Ok(Self { head, rows, folds: out, mean, std_sample, std_population })
    }

    /// One line per image, comma separated, with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "fold,image,true_brand,true_model,pred_brand,pred_model,brand_tally,model_tally,n_patches,brand_correct,correct\n",
        );
        let join = |v: &[usize]| v.iter().map(|c| alloc::format!("{c}")).collect::<Vec<_>>().join(";");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.fold,
                csv_field(&r.image),
                csv_field(&r.true_brand),
                csv_field(&r.true_model),
                csv_field(&r.pred_brand),
                csv_field(&r.pred_model),
                join(&r.brand_tally),
                join(&r.model_tally),
                r.n_patches,
                r.brand_correct,
                r.correct
            );
        }
        s
    }

    /// Fold-by-fold accuracy table with an average column, one row per report.
    pub fn table(reports: &[(&str, &PredictionReport)]) -> String {
        let folds: Vec<usize> = reports.first().map(|r| r.1.folds.iter().map(|f| f.fold).collect()).unwrap_or_default();
        let width = reports.iter().map(|r| r.0.len()).max().unwrap_or(6).max(6);
        let mut s = String::new();
        let _ = write!(s, "{:<width$}", "method");
        for f in &folds {
            let _ = write!(s, " | {:>8}", alloc::format!("fold-{}", f + 1));
        }
        let _ = writeln!(s, " | {:>17}", "average");
        for (name, r) in reports {
            let _ = write!(s, "{name:<width$}");
            for f in &r.folds {
                let _ = write!(s, " | {:>8.4}", f.accuracy);
            }
            let _ = writeln!(s, " | {:>8.4} ± {:.4}", r.mean, r.std_population);
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        alloc::format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.into()
    }
}
