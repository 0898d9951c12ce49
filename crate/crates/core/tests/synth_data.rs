//! Synthetic dataset: counting, determinism, separability and tile supply.

use std::collections::BTreeSet;

use hcb_core::manifest::{apply_paper_filters, make_folds};
use hcb_core::patchex::*;
use hcb_core::synth::*;

fn tiny(brands: usize, models: usize, devices: usize, images: usize) -> SynthSpec {
    SynthSpec {
        brands: (0..brands).map(|b| SynthBrand { name: format!("B{b}x"), models }).collect(),
        devices_per_model: devices,
        images_per_device: images,
        width: 160,
        height: 144,
        ..SynthSpec::default()
    }
}

#[test]
fn counts_records() {
    let spec = tiny(2, 1, 1, 3);
    let (m, images) = generate(&spec).unwrap();
    assert_eq!(m.len(), 6);
    assert_eq!(images.len(), 6);
    let paths: BTreeSet<_> = images.iter().map(|(r, _)| r.path.clone()).collect();
    assert_eq!(paths.len(), 6);
    for (r, img) in &images {
        assert_eq!((img.width(), img.height()), (160, 144));
        assert_eq!(m.find(&r.path), Some(r));
    }
    let d = SynthSpec::default();
    assert_eq!((d.n_models(), d.n_images()), (7, 560));
    assert_eq!(d.hierarchy().iter().map(|b| b.models.len()).collect::<Vec<_>>(), vec![1, 2, 2, 2]);
}

#[test]
fn invalid_specs_rejected() {
    let mut s = tiny(1, 1, 1, 1);
    s.images_per_device = 0;
    assert!(s.validate().is_err());
    let mut s = tiny(2, 1, 1, 1);
    s.brands[1].name = s.brands[0].name.clone();
    assert!(s.validate().is_err());
    let mut s = tiny(1, 1, 1, 1);
    s.brands[0].name = "a_b".into();
    assert!(s.validate().is_err());
    let mut s = tiny(1, 1, 1, 1);
    s.noise_std = f64::NAN;
    assert!(s.validate().is_err());
}

#[test]
fn byte_identical_for_fixed_seed() {
    let spec = tiny(2, 2, 2, 2);
    let (m1, a) = generate(&spec).unwrap();
    let (m2, b) = generate(&spec).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(a, b);
    // an image does not depend on what was generated before it
    assert_eq!(render(&spec, 3, 1, 1), a.last().unwrap().1);
    let other = SynthSpec { seed: spec.seed + 1, ..spec };
    assert_ne!(generate(&other).unwrap().1[0].1, a[0].1);
}

fn welch_t(a: &[f64], b: &[f64]) -> f64 {
    let mv = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0), n)
    };
    let ((ma, va, na), (mb, vb, nb)) = (mv(a), mv(b));
    (ma - mb) / (va / na + vb / nb).sqrt()
}

/// Per-image statistics: mean, variance, and the folded-signature
/// contrast between the first two models.
fn stats(spec: &SynthSpec, model: usize) -> [Vec<f64>; 3] {
    let (s0, s1) = (signature(spec.seed, 0), signature(spec.seed, 1));
    let mut out: [Vec<f64>; 3] = Default::default();
    for i in 0..spec.images_per_device {
        let img = render(spec, model, 0, i);
        let v: Vec<f64> = img.planes().iter().map(|&p| p as f64 / 255.0).collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        out[0].push(mean);
        out[1].push(v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n);
        let (w, h) = (img.width(), img.height());
        let mut contrast = 0.0;
        for c in 0..3 {
            let plane = &v[c * w * h..(c + 1) * w * h];
            let pm = plane.iter().sum::<f64>() / plane.len() as f64;
            for y in 0..h {
                for x in 0..w {
                    let k = c * PERIOD * PERIOD + (y % PERIOD) * PERIOD + x % PERIOD;
                    contrast += (plane[y * w + x] - pm) * (s0[k] - s1[k]);
                }
            }
        }
        out[2].push(contrast / n);
    }
    out
}

// two-sided p < 0.01 for ~98 degrees of freedom
const T_CRIT: f64 = 2.627;

#[test]
fn zero_strength_models_are_indistinguishable() {
    let spec = SynthSpec { signature_strength: 0.0, ..tiny(2, 1, 1, 50) };
    let (a, b) = (stats(&spec, 0), stats(&spec, 1));
    for k in 0..3 {
        let t = welch_t(&a[k], &b[k]);
        assert!(t.abs() < T_CRIT, "statistic {k}: t = {t}");
    }
    // control: the default strength separates the same populations
    let spec = tiny(2, 1, 1, 50);
    let (a, b) = (stats(&spec, 0), stats(&spec, 1));
    assert!(welch_t(&a[2], &b[2]).abs() > 10.0 * T_CRIT);
}

#[test]
fn default_spec_is_separable_and_mostly_homogeneous() {
    let spec = SynthSpec::default();
    let (_, images) = generate(&spec).unwrap();
    let cfg = PatchConfig::default();
    let names = spec.hierarchy();
    let flat: Vec<(String, String)> = names.iter().flat_map(|b| b.models.iter().map(move |m| (b.brand.clone(), m.clone()))).collect();
    let mut buf = vec![0f32; 3 * 128 * 128];
    let (mut ok, mut total) = (0usize, 0usize);
    for (rec, img) in &images {
        let truth = flat.iter().position(|(b, m)| *b == rec.brand && *m == rec.model).unwrap();
        let ranked = rank_tiles(img, &cfg).unwrap();
        let homogeneous = ranked.iter().filter(|t| t.class == PatchClass::Homogeneous).count();
        assert!(2 * homogeneous >= ranked.len(), "{}: {homogeneous}/{}", rec.path, ranked.len());
        for t in ranked.iter().step_by(4) {
            write_preprocessed(img, t.origin, 128, &mut buf);
            total += 1;
            ok += usize::from(correlate_signature(spec.seed, spec.n_models(), &buf, 128, t.origin) == truth);
        }
    }
    assert!(ok as f64 >= 0.99 * total as f64, "oracle {ok}/{total}");
}

#[test]
fn folds_over_synthetic_manifest() {
    let spec = SynthSpec { devices_per_model: 3, images_per_device: 4, ..SynthSpec::default() };
    let m = spec.manifest().unwrap();
    assert_eq!(apply_paper_filters(&m).records(), m.records());
    let plan = make_folds(&m, 5, 0.15, 3).unwrap();
    for fold in plan.folds.values() {
        assert_eq!(fold.held_out.len(), 7);
        let split = fold.split(&m);
        assert_eq!(split.test.len(), 7 * 4);
        for r in split.train.iter().chain(&split.validation) {
            assert!(!fold.is_held_out(r));
        }
    }
}
