//! Property suites: softmax, layer shapes and values against naive loops,
//! vote order invariance and parameter-count closed forms.

use hcb_core::autograd::{softmax, Graph, ParamStore};
use hcb_core::hcbnet::*;
use hcb_core::pipeline::{decide, PatchOutput};
use hcb_core::Tensor;
use proptest::prelude::*;

fn vec_in(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(lo..hi, n)
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(v in proptest::collection::vec(-30.0f64..30.0, 1..20), shift in -100.0f64..100.0) {
        let p = softmax(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x > 0.0 && x <= 1.0));
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        // the graph op agrees with the free function row by row
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(&[1, v.len()], v.clone()).unwrap()).unwrap();
        let s = g.softmax(x).unwrap();
        prop_assert_eq!(g.value(s).values(), p.as_slice());
    }

    #[test]
    fn conv2d_matches_naive_loops(
        (n, c, f, h, w, k, stride, pad) in (1usize..3, 1usize..4, 1usize..4, 3usize..9, 3usize..9, 1usize..4, 1usize..3, 0usize..2),
        seed in any::<u64>(),
    ) {
        prop_assume!(k <= h + 2 * pad && k <= w + 2 * pad);
        use rand::Rng;
        let mut r = hcb_core::rng::rng(seed);
        let mut draw = |m: usize| (0..m).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (x, wt, b) = (draw(n * c * h * w), draw(f * c * k * k), draw(f));
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let xn = g.input(Tensor::new(&[n, c, h, w], x.clone()).unwrap()).unwrap();
        let wn = g.input(Tensor::new(&[f, c, k, k], wt.clone()).unwrap()).unwrap();
        let bn = g.input(Tensor::new(&[f], b.clone()).unwrap()).unwrap();
        let y = g.conv2d(xn, wn, bn, stride, pad).unwrap();
        let (ho, wo) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
        prop_assert_eq!(g.shape(y), &[n, f, ho, wo][..]);
        let got = g.value(y).values();
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[fi];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                            * wt[((fi * c + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        let o = got[((ni * f + fi) * ho + oy) * wo + ox];
                        prop_assert!((o - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_matches_naive_loops(h in 2usize..10, w in 2usize..10, k in 1usize..4, stride in 1usize..4, x in vec_in(2 * 10 * 10, -5.0, 5.0)) {
        prop_assume!(k <= h && k <= w);
        let x = x[..2 * h * w].to_vec();
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let xn = g.input(Tensor::new(&[1, 2, h, w], x.clone()).unwrap()).unwrap();
        let y = g.maxpool2d(xn, k, stride).unwrap();
        let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
        prop_assert_eq!(g.shape(y), &[1, 2, ho, wo][..]);
        for c in 0..2 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut m = f64::NEG_INFINITY;
                    for ky in 0..k {
                        for kx in 0..k {
                            m = m.max(x[(c * h + oy * stride + ky) * w + ox * stride + kx]);
                        }
                    }
                    prop_assert_eq!(g.value(y).values()[(c * ho + oy) * wo + ox], m);
                }
            }
        }
    }
}

fn spec_from(chans: [usize; 4], kernels: [usize; 4], branch: usize, bk: usize, models: Vec<usize>, head: HeadKind) -> NetworkSpec {
    let hierarchy = models
        .iter()
        .enumerate()
        .map(|(b, &m)| BrandSpec { brand: format!("b{b}"), models: (0..m).map(|i| format!("m{i}")).collect() })
        .collect::<Vec<_>>();
    let n_models = models.iter().sum();
    NetworkSpec {
        input: [3, 32, 32],
        feature_blocks: (0..4)
            .map(|i| BlockSpec {
                out_channels: chans[i],
                kernel: kernels[i],
                stride: 1,
                padding: kernels[i] / 2,
                pool_kernel: if i < 2 { 2 } else { 1 },
                pool_stride: if i < 2 { 2 } else { 1 },
            })
            .collect(),
        branch_block: CbrSpec { out_channels: branch, kernel: bk, stride: 1, padding: bk / 2 },
        hierarchy,
        head,
        flat_fc_dims: [7, 5, n_models],
        bn_eps: 1e-5,
        bn_momentum: 0.1,
    }
}

/// Hand closed form, written out layer by layer.
fn closed_form(chans: [usize; 4], kernels: [usize; 4], branch: usize, bk: usize, models: &[usize], head: HeadKind) -> usize {
    let mut n = 0;
    let mut cin = 3;
    for i in 0..4 {
        // conv weight + bias, batchnorm gamma + beta
        n += cin * chans[i] * kernels[i] * kernels[i] + chans[i] + 2 * chans[i];
        cin = chans[i];
    }
    let hw = 8 * 8;
    match head {
        HeadKind::Hierarchical => {
            for &m in models {
                n += cin * branch * bk * bk + 3 * branch + branch * hw + 1;
                if m > 1 {
                    n += m * (branch * branch * bk * bk + 3 * branch + branch * hw + 1);
                }
            }
        }
        HeadKind::Flat => {
            let total: usize = models.iter().sum();
            n += (cin * hw * 7 + 7) + (7 * 5 + 5) + (5 * total + total);
        }
    }
    n
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 40, .. ProptestConfig::default() })]

    #[test]
    fn parameter_count_closed_form(
        chans in proptest::array::uniform4(1usize..6),
        kernels in proptest::array::uniform4(prop_oneof![Just(1usize), Just(3), Just(5)]),
        branch in 1usize..5,
        bk in prop_oneof![Just(1usize), Just(3)],
        models in proptest::collection::vec(1usize..4, 1..4),
        flat in any::<bool>(),
    ) {
        let head = if flat { HeadKind::Flat } else { HeadKind::Hierarchical };
        let spec = spec_from(chans, kernels, branch, bk, models.clone(), head);
        let expect = closed_form(chans, kernels, branch, bk, &models, head);
        prop_assert_eq!(spec.param_count().unwrap(), expect);
        let net = build_network::<f32>(&spec, 0).unwrap();
        prop_assert_eq!(count_params(&net), expect);
    }
}

fn row(k: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.01f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn hier_output() -> impl Strategy<Value = PatchOutput> {
    (row(3), row(2), row(3)).prop_map(|(b, m1, m2)| PatchOutput::Hierarchical {
        brand_probs: b,
        model_probs: vec![None, Some(m1), Some(m2)],
    })
}

proptest! {
    #[test]
    fn votes_ignore_patch_order(outs in proptest::collection::vec(hier_output(), 1..40), flat in proptest::collection::vec(row(6), 1..40), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let hierarchy = vec![
            BrandSpec { brand: "A".into(), models: vec!["a".into()] },
            BrandSpec { brand: "B".into(), models: vec!["b1".into(), "b2".into()] },
            BrandSpec { brand: "C".into(), models: vec!["c1".into(), "c2".into(), "c3".into()] },
        ];
        let spec = NetworkSpec::toy(hierarchy.clone(), HeadKind::Hierarchical);
        let mut r = hcb_core::rng::rng(seed);
        let mut shuffled = outs.clone();
        shuffled.shuffle(&mut r);
        prop_assert_eq!(decide(&spec, &outs).unwrap(), decide(&spec, &shuffled).unwrap());

        let fspec = NetworkSpec::toy(hierarchy, HeadKind::Flat);
        let flat: Vec<PatchOutput> = flat.into_iter().map(|probs| PatchOutput::Flat { probs }).collect();
        let mut shuffled = flat.clone();
        shuffled.shuffle(&mut r);
        prop_assert_eq!(decide(&fspec, &flat).unwrap(), decide(&fspec, &shuffled).unwrap());
    }
}
