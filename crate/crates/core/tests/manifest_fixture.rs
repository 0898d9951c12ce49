//! Filtering, statistics and fold planning on a fixture shaped like the
//! Dresden natural subset.

use std::collections::BTreeSet;

use hcb_core::manifest::*;
use hcb_core::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;

/// Retained models with (devices, images).
const RETAINED: [(&str, &str, usize, usize); 18] = [
    ("Canon", "Ixus70", 3, 603),
    ("Casio", "EX-Z150", 5, 964),
    ("FujiFilm", "FinePixJ50", 3, 661),
    ("Kodak", "M1063", 5, 2527),
    ("Nikon", "CoolPixS710", 5, 961),
    ("Nikon", "D200", 2, 1697),
    ("Nikon", "D70", 4, 1664),
    ("Olympus", "mju_1050SW", 5, 1064),
    ("Panasonic", "DMC-FZ50", 3, 988),
    ("Pentax", "OptioA40", 4, 760),
    ("Praktica", "DCZ5.9", 5, 1056),
    ("Ricoh", "GX100", 5, 1059),
    ("Rollei", "RCP-7325XS", 3, 625),
    ("Samsung", "L74wide", 3, 720),
    ("Samsung", "NV15", 3, 676),
    ("Sony", "DSC-H50", 2, 630),
    ("Sony", "DSC-T77", 4, 777),
    ("Sony", "DSC-W170", 2, 439),
];

/// Single-device models that the two-device rule removes.
const DROPPED: [(&str, &str, usize); 8] = [
    ("Agfa", "DC-504", 169),
    ("Agfa", "DC-733s", 281),
    ("Agfa", "DC-830i", 363),
    ("Agfa", "Sensor505-x", 172),
    ("Agfa", "Sensor530s", 372),
    ("Canon", "PowerShotA640", 188),
    ("Nikon", "D40", 0),
    ("Olympus", "mju_mini", 0),
];

fn push_model(out: &mut Vec<ImageRecord>, brand: &str, model: &str, first_device: u32, devices: usize, images: usize) {
    for d in 0..devices {
        let n = images / devices + usize::from(d < images % devices);
        for i in 0..n {
            out.push(ImageRecord {
                path: format!("{brand}_{model}_{}_{i}.JPG", first_device + d as u32),
                brand: brand.into(),
                model: model.into(),
                device_index: first_device + d as u32,
                image_id: i.to_string(),
                width: 3072,
                height: 2304,
            });
        }
    }
}

fn dresden_like() -> Vec<ImageRecord> {
    let mut recs = Vec::new();
    for (b, m, d, n) in RETAINED {
        if m == "D70" {
            // two D70 bodies and two D70s bodies before the merge
            push_model(&mut recs, b, "D70", 0, 2, n / 2);
            push_model(&mut recs, b, "D70s", 0, 2, n - n / 2);
        } else {
            push_model(&mut recs, b, m, 0, d, n);
        }
    }
    for (b, m, n) in DROPPED {
        push_model(&mut recs, b, m, 0, 1, n.max(1));
    }
    recs
}

#[test]
fn counts_before_and_after_filtering() {
    let raw = Manifest::new(dresden_like()).unwrap();
    let s = hierarchy_stats(&raw);
    assert_eq!((s.total_models, s.total_devices), (27, 74));
    let two_plus = s.models.iter().filter(|m| m.devices >= 2).count();
    assert_eq!(two_plus, 19);

    let f = apply_paper_filters(&raw);
    let s = hierarchy_stats(&f);
    assert_eq!((s.total_models, s.total_devices, s.brands), (18, 66, 13));
    for (b, m, d, n) in RETAINED {
        let got = s.model(b, m).unwrap();
        assert_eq!((got.devices, got.images), (d, n), "{b}_{m}");
    }
    let kodak = s.model("Kodak", "M1063").unwrap();
    assert_eq!((kodak.devices, kodak.images), (5, 2527));
    let w170 = s.model("Sony", "DSC-W170").unwrap();
    assert_eq!((w170.devices, w170.images), (2, 439));
    assert!(s.model("Nikon", "D70s").is_none());
    assert_eq!(s.total_images, RETAINED.iter().map(|r| r.3).sum::<usize>());
}

#[test]
fn filtering_is_idempotent_and_stats_recompute() {
    let f = apply_paper_filters(&Manifest::new(dresden_like()).unwrap());
    assert_eq!(apply_paper_filters(&f), f);
    assert_eq!(f.hierarchy(), &Hierarchy::from_records(f.records()));
    // round trip through JSON
    let back: Manifest = serde_json::from_str(&serde_json::to_string(&f).unwrap()).unwrap();
    assert_eq!(back, f);
    assert!(back.filters_applied());
}

#[test]
fn one_held_out_device_per_model_each_fold() {
    let m = apply_paper_filters(&Manifest::new(dresden_like()).unwrap());
    let plan = make_folds(&m, 5, 0.15, 7).unwrap();
    for f in 0..5 {
        let fold = plan.fold(f).unwrap();
        assert_eq!(fold.held_out.len(), 18);
        let models: BTreeSet<_> = fold.held_out.iter().map(|k| (&k.brand, &k.model)).collect();
        assert_eq!(models.len(), 18);
        let split = fold.split(&m);
        assert_eq!(split.train.len() + split.validation.len() + split.test.len(), m.len());
        for (b, bn) in &m.hierarchy().brands {
            for (mn, node) in &bn.models {
                let test: BTreeSet<u32> = split.test.iter().filter(|r| &r.brand == b && &r.model == mn).map(|r| r.device_index).collect();
                let train: BTreeSet<u32> = split
                    .train
                    .iter()
                    .chain(&split.validation)
                    .filter(|r| &r.brand == b && &r.model == mn)
                    .map(|r| r.device_index)
                    .collect();
                assert_eq!(test.len(), 1);
                assert!(test.is_disjoint(&train));
                let all: BTreeSet<u32> = node.devices.keys().copied().collect();
                assert_eq!(&test | &train, all);
                // stratified validation share
                let pool = split.train.iter().chain(&split.validation).filter(|r| &r.brand == b && &r.model == mn).count();
                let val = split.validation.iter().filter(|r| &r.brand == b && &r.model == mn).count();
                assert_eq!(val, ((0.15 * pool as f64) + 0.5) as usize);
            }
        }
        for r in &split.validation {
            assert!(!fold.is_held_out(r));
        }
    }
    assert!(matches!(plan.fold(5), Err(Error::MissingFold(5))));
}

#[test]
fn each_device_held_out_at_least_floor_times() {
    let m = apply_paper_filters(&Manifest::new(dresden_like()).unwrap());
    let plan = make_folds(&m, 5, 0.15, 0).unwrap();
    for (b, bn) in &m.hierarchy().brands {
        for (mn, node) in &bn.models {
            let n_d = node.devices.len();
            for &d in node.devices.keys() {
                let times = plan.folds.values().filter(|f| f.held_out.iter().any(|k| &k.brand == b && &k.model == mn && k.device == d)).count();
                assert!(times >= 5 / n_d, "{b}_{mn} device {d}: {times}");
            }
        }
    }
}

#[test]
fn folds_ignore_record_order_and_are_deterministic() {
    let recs = dresden_like();
    let m = apply_paper_filters(&Manifest::new(recs.clone()).unwrap());
    let a = serde_json::to_string(&make_folds(&m, 5, 0.15, 11).unwrap()).unwrap();
    let mut shuffled = recs;
    shuffled.shuffle(&mut hcb_core::rng::rng(5));
    let m2 = apply_paper_filters(&Manifest::new(shuffled).unwrap());
    let b = serde_json::to_string(&make_folds(&m2, 5, 0.15, 11).unwrap()).unwrap();
    assert_eq!(a, b);
    let c = serde_json::to_string(&make_folds(&m, 5, 0.15, 12).unwrap()).unwrap();
    assert_ne!(a, c);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, .. ProptestConfig::default() })]

    #[test]
    fn rotation_is_rank_mod_devices(devs in proptest::collection::btree_set(0u32..50, 2..7), folds in 1usize..9) {
        let mut recs = Vec::new();
        for &d in &devs {
            for i in 0..3 {
                recs.push(ImageRecord {
                    path: format!("A_x_{d}_{i}"),
                    brand: "A".into(),
                    model: "x".into(),
                    device_index: d,
                    image_id: i.to_string(),
                    width: 256,
                    height: 256,
                });
            }
        }
        let m = Manifest::new(recs).unwrap();
        let plan = make_folds(&m, folds, 0.2, 1).unwrap();
        let sorted: Vec<u32> = devs.iter().copied().collect();
        for f in 0..folds {
            prop_assert_eq!(plan.folds[&f].held_out[0].device, sorted[f % sorted.len()]);
        }
    }
}
