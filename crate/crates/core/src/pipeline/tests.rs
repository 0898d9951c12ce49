use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::*;
use crate::hcbnet::{build_network, BrandSpec};
use crate::manifest::make_folds;

const S: usize = 128;

struct MemSource(BTreeMap<String, Vec<Vec<f32>>>);

impl PatchAvailability for MemSource {
    fn available(&self, image: &str) -> Option<usize> {
        self.0.get(image).map(Vec::len)
    }
}

impl PatchSource for MemSource {
    fn load(&self, image: &str, rank: usize, out: &mut [f32]) -> Result<()> {
        let p = self.0.get(image).and_then(|v| v.get(rank)).ok_or_else(|| Error::MissingFromCache(image.into()))?;
        out.copy_from_slice(p);
        Ok(())
    }
}

fn hierarchy() -> Vec<BrandSpec> {
    vec![
        BrandSpec { brand: "Alpha".into(), models: vec!["A1".into(), "A2".into()] },
        BrandSpec { brand: "Beta".into(), models: vec!["B1".into()] },
    ]
}

/// Two devices per model, `per_device` images, `tiles` patches each; the
/// patches carry a weak per-model checkerboard phase.
fn fixture(per_device: usize, tiles: usize) -> (Manifest, MemSource) {
    let mut records = Vec::new();
    let mut patches = BTreeMap::new();
    let mut r = rng::rng(3);
    for (mi, (b, m)) in [("Alpha", "A1"), ("Alpha", "A2"), ("Beta", "B1")].iter().enumerate() {
        for d in 0..2u32 {
            for i in 0..per_device {
                let path = alloc::format!("{b}_{m}_{d}_{i}.png");
                records.push(ImageRecord {
                    path: path.clone(),
                    brand: b.to_string(),
                    model: m.to_string(),
                    device_index: d,
                    image_id: i.to_string(),
                    width: 256,
                    height: 256,
                });
                let ps = (0..tiles)
                    .map(|_| {
                        (0..3 * S * S)
                            .map(|j| {
                                let (y, x) = ((j / S) % S, j % S);
                                let sig = if (y + x + mi) % 3 == 0 { 0.02 } else { -0.01 };
                                sig + r.random_range(-0.005f32..0.005)
                            })
                            .collect()
                    })
                    .collect();
                patches.insert(path, ps);
            }
        }
    }
    (Manifest::new(records).unwrap(), MemSource(patches))
}

fn small_cfg() -> TrainConfig {
    TrainConfig { epochs: 1, batch_size: 16, lr0: 0.01, k: 64, val_k: 12, patches_per_image_eval: 4, seed: 5, ..Default::default() }
}

#[test]
fn defaults_are_full_scale() {
    let c = TrainConfig::default();
    assert_eq!((c.epochs, c.batch_size, c.k, c.patches_per_image_eval), (40, 512, 260_000, 200));
    assert_eq!((c.lr0, c.momentum, c.lr_gamma, c.weight_decay, c.alpha), (0.1, 0.9, 0.9, 0.005, 1.0));
    c.validate().unwrap();
}

#[test]
fn invalid_configs() {
    for c in [
        TrainConfig { epochs: 0, ..Default::default() },
        TrainConfig { batch_size: 1, ..Default::default() },
        TrainConfig { lr0: 0.0, ..Default::default() },
        TrainConfig { momentum: 1.0, ..Default::default() },
        TrainConfig { k: 0, ..Default::default() },
        TrainConfig { alpha: -1.0, ..Default::default() },
    ] {
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))), "{c:?}");
    }
}

#[test]
fn fold_data_is_isolated_and_balanced() {
    let (m, src) = fixture(4, 8);
    let folds = make_folds(&m, 2, 0.25, 1).unwrap();
    let spec = NetworkSpec::toy(hierarchy(), HeadKind::Hierarchical);
    for (&i, fold) in &folds.folds {
        let data = build_fold_data(i, fold, &m, &spec, &src, &small_cfg()).unwrap();
        assert!(!data.train.is_empty() && !data.validation.is_empty());
        for p in data.train.iter().chain(&data.validation) {
            assert!(!fold.held_out.contains(&p.device));
        }
        // every image contributes min(round(k / (n_i·n_d·n_m·n_b)), tiles)
        let split = fold.split(&m);
        for r in &split.train {
            let n_m = if r.brand == "Alpha" { 2.0 } else { 1.0 };
            let n_i = split.train.iter().filter(|o| o.model_key() == r.model_key()).count() as f64;
            let quota = libm::floor(64.0 / (n_i * n_m * 2.0) + 0.5) as usize;
            let got = data.train.iter().filter(|p| p.image == r.path).count();
            assert_eq!(got, quota.min(8), "{}", r.path);
        }
    }
}

#[test]
fn leakage_is_detected() {
    let (m, src) = fixture(2, 4);
    let folds = make_folds(&m, 2, 0.25, 1).unwrap();
    let spec = NetworkSpec::toy(hierarchy(), HeadKind::Hierarchical);
    let fold = folds.fold(0).unwrap();
    let mut data = build_fold_data(0, fold, &m, &spec, &src, &small_cfg()).unwrap();
    let leaked = fold.held_out[0].clone();
    data.train[0].device = leaked;
    assert!(matches!(check_isolation(&data), Err(Error::Leakage(_))));
}

#[test]
fn one_epoch_smoke_and_determinism() {
    let (m, src) = fixture(5, 8);
    let folds = make_folds(&m, 2, 0.2, 1).unwrap();
    let spec = NetworkSpec::toy(hierarchy(), HeadKind::Hierarchical);
    let data = build_fold_data(0, folds.fold(0).unwrap(), &m, &spec, &src, &small_cfg()).unwrap();
    assert_eq!(data.train.len(), 64);
    let run = || {
        let net = build_network::<f32>(&spec, 9).unwrap();
        let mut seen = Vec::new();
        let out = train_fold(net, &data, &src, &small_cfg(), &mut |e| seen.push(e.clone())).unwrap();
        (out, seen)
    };
    let (a, seen) = run();
    assert_eq!(a.epoch, 0);
    assert!(a.history[0].mean_loss.is_finite());
    assert_eq!(a.history[0].steps, 4);
    assert_eq!(seen, a.history);
    let (b, _) = run();
    assert_eq!(a.history[0].mean_loss.to_bits(), b.history[0].mean_loss.to_bits());
    assert_eq!(a.network.params(), b.network.params());
}

#[test]
fn best_epoch_has_max_validation_accuracy() {
    let (m, src) = fixture(3, 6);
    let folds = make_folds(&m, 2, 0.34, 1).unwrap();
    let spec = NetworkSpec::toy(hierarchy(), HeadKind::Flat);
    let cfg = TrainConfig { epochs: 3, k: 48, ..small_cfg() };
    let data = build_fold_data(1, folds.fold(1).unwrap(), &m, &spec, &src, &cfg).unwrap();
    let out = train_fold(build_network::<f32>(&spec, 1).unwrap(), &data, &src, &cfg, &mut |_| {}).unwrap();
    for e in &out.history {
        assert!(out.val_accuracy >= e.val_accuracy);
        if e.val_accuracy == out.val_accuracy {
            assert!(out.epoch <= e.epoch);
        }
    }
    assert_eq!(out.history[out.epoch].val_accuracy, out.val_accuracy);
    assert_eq!(out.lr, lr_schedule(out.epoch, cfg.lr0, cfg.lr_gamma));
}

#[test]
fn divergence_reports_step() {
    let (m, src) = fixture(2, 4);
    let folds = make_folds(&m, 2, 0.25, 1).unwrap();
    let spec = NetworkSpec::toy(hierarchy(), HeadKind::Hierarchical);
    let cfg = TrainConfig { lr0: 1e30, ..small_cfg() };
    let data = build_fold_data(0, folds.fold(0).unwrap(), &m, &spec, &src, &cfg).unwrap();
    let err = train_fold(build_network::<f32>(&spec, 1).unwrap(), &data, &src, &cfg, &mut |_| {}).unwrap_err();
    match err {
        Error::Divergence { step, .. } => assert!(step >= 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn empty_training_set() {
    let spec = NetworkSpec::toy(hierarchy(), HeadKind::Hierarchical);
    let data = FoldData { fold: 0, held_out: Vec::new(), train: Vec::new(), validation: Vec::new(), deficits: 0 };
    let (_, src) = fixture(1, 1);
    assert_eq!(
        train_fold(build_network::<f32>(&spec, 1).unwrap(), &data, &src, &small_cfg(), &mut |_| {}).unwrap_err(),
        Error::EmptyTrainingSet
    );
}

#[test]
fn evaluate_folds_counts_images() {
    let (m, src) = fixture(2, 3);
    let folds = make_folds(&m, 2, 0.25, 1).unwrap();
    let spec = NetworkSpec::toy(hierarchy(), HeadKind::Hierarchical);
    let mut nets = BTreeMap::new();
    nets.insert(0, build_network::<f32>(&spec, 1).unwrap());
    assert_eq!(evaluate_folds(&nets, &folds, &m, &src, 3).unwrap_err(), Error::MissingFold(1));
    nets.insert(1, build_network::<f32>(&spec, 2).unwrap());
    let rep = evaluate_folds(&nets, &folds, &m, &src, 3).unwrap();
    // one held-out device per model, two images each
    assert_eq!(rep.rows.len(), 2 * 3 * 2);
    for f in &rep.folds {
        let rows: Vec<_> = rep.rows.iter().filter(|r| r.fold == f.fold).collect();
        assert_eq!(f.total, rows.len());
        assert_eq!(f.correct, rows.iter().filter(|r| r.correct).count());
        assert!(rows.iter().all(|r| r.n_patches == 3 && r.brand_tally.iter().sum::<usize>() == 3));
    }
}

#[test]
fn unanimous_vote() {
    let spec = NetworkSpec::toy(
        (0..5).map(|b| BrandSpec { brand: alloc::format!("B{b}"), models: vec!["m".into()] }).collect(),
        HeadKind::Hierarchical,
    );
    let row = PatchOutput::Hierarchical { brand_probs: vec![0.1, 0.1, 0.1, 0.6, 0.1], model_probs: vec![None; 5] };
    let d = decide(&spec, &vec![row; 200]).unwrap();
    assert_eq!((d.brand, d.model), (3, 0));
    assert_eq!(d.brand_tally[3], 200);
    assert_eq!(d.model_tally, vec![200]);
}

#[test]
fn tie_goes_to_larger_probability_sum() {
    let t = Tally { counts: vec![100, 100], prob_sums: vec![152.1, 147.9] };
    assert_eq!(t.winner(), 0);
    let t = Tally { counts: vec![100, 100], prob_sums: vec![147.9, 152.1] };
    assert_eq!(t.winner(), 1);
    let t = Tally { counts: vec![7, 7, 7], prob_sums: vec![1.0, 2.0, 2.0] };
    assert_eq!(t.winner(), 1);
    // from rows: one vote each, the second row is more confident
    let rows: [&[f64]; 2] = [&[0.55, 0.45], &[0.1, 0.9]];
    let t = tally(rows, 2);
    assert_eq!(t.counts, vec![1, 1]);
    assert_eq!(t.winner(), 1);
}

#[test]
fn model_vote_within_predicted_brand() {
    let spec = NetworkSpec::toy(hierarchy(), HeadKind::Hierarchical);
    let out = |b: [f64; 2], m: [f64; 2]| PatchOutput::Hierarchical { brand_probs: b.to_vec(), model_probs: vec![Some(m.to_vec()), None] };
    let outputs = vec![
        out([0.8, 0.2], [0.3, 0.7]),
        out([0.7, 0.3], [0.4, 0.6]),
        out([0.2, 0.8], [0.9, 0.1]),
    ];
    let d = decide(&spec, &outputs).unwrap();
    assert_eq!((d.brand, d.model), (0, 1));
    assert_eq!(d.brand_tally, vec![2, 1]);
    // model votes come from every patch, including the one voting Beta
    assert_eq!(d.model_tally, vec![1, 2]);
}

#[test]
fn flat_vote_maps_to_brand() {
    let spec = NetworkSpec::toy(hierarchy(), HeadKind::Flat);
    let outputs: Vec<PatchOutput> = [[0.1, 0.2, 0.7], [0.1, 0.6, 0.3], [0.2, 0.1, 0.7]]
        .iter()
        .map(|p| PatchOutput::Flat { probs: p.to_vec() })
        .collect();
    let d = decide(&spec, &outputs).unwrap();
    assert_eq!((d.brand, d.model), (1, 0));
    assert_eq!(d.brand_tally, vec![1, 2]);
    assert_eq!(d.model_tally, vec![2]);
    let wrong = [PatchOutput::Hierarchical { brand_probs: vec![1.0, 0.0], model_probs: vec![None, None] }];
    assert!(decide(&spec, &wrong).is_err());
    assert_eq!(decide(&spec, &[]).unwrap_err(), Error::ZeroPatchCount);
}

#[test]
fn fold_stats_table_values() {
    let (mean, sample, pop) = fold_stats(&[0.9904, 0.9914, 0.9893, 0.9908, 0.9897]);
    assert!((mean - 0.9903).abs() < 5e-5);
    assert!((pop - 0.0008).abs() < 5e-5);
    assert!((sample - 0.0008).abs() < 5e-5);
    let (mean, sample, pop) = fold_stats(&[0.9801, 0.9903, 0.9843, 0.9824, 0.9881]);
    assert!((mean - 0.9850).abs() < 5e-5);
    assert!((pop - 0.0037).abs() < 5e-5);
    // the divide-by-(n-1) estimate does not round to the same figure
    assert!((sample - 0.0042).abs() < 5e-5);
    assert_eq!(fold_stats(&[1.0, 1.0]), (1.0, 0.0, 0.0));
}

#[test]
fn report_recomputes_from_rows() {
    let row = |fold, correct| ImageRow {
        fold,
        image: "x,y".into(),
        true_brand: "A".into(),
        true_model: "a".into(),
        pred_brand: "A".into(),
        pred_model: "a".into(),
        brand_tally: vec![2, 1],
        model_tally: vec![2],
        n_patches: 3,
        brand_correct: true,
        correct,
    };
    let rows = vec![row(0, true), row(0, false), row(1, true), row(1, true)];
    let rep = PredictionReport::from_rows(HeadKind::Hierarchical, rows.clone(), &[0, 1]).unwrap();
    assert_eq!(rep.folds[0].accuracy, 0.5);
    assert_eq!(rep.folds[1].accuracy, 1.0);
    assert_eq!(rep.mean, 0.75);
    assert!(rep.to_csv().lines().nth(1).unwrap().starts_with("0,\"x,y\",A,a,A,a,2;1,2,3,true,true"));
    let table = PredictionReport::table(&[("Hierarchical", &rep)]);
    assert!(table.contains("fold-1") && table.contains("0.7500 ± 0.2500"));
    assert_eq!(PredictionReport::from_rows(HeadKind::Flat, rows, &[0, 1, 2]).unwrap_err(), Error::MissingFold(2));
}
