use cflab::autodiff::{check_gradients, AutodiffError, Graph, Mode, Tensor, Var};
use cflab::constraints::{
    causal_loss_terms, free_fall_loss, CausalProbs, LossWeights, ProjectionOperator,
};
use cflab::models::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(n: usize, size: usize, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * size * size * 3).map(|_| r.random::<f64>()).collect();
    Tensor::new(&[n, size, size, 3], data).unwrap()
}

fn micro_regression() -> Architecture {
    Architecture {
        head: Head::Regression,
        input_size: 8,
        channels: vec![3, 2],
        kernel: 3,
        hidden: 4,
        dropout: 0.0,
    }
}

fn micro_detector() -> Architecture {
    Architecture {
        head: Head::Detector,
        input_size: 16,
        channels: vec![3, 3],
        kernel: 3,
        hidden: 3,
        dropout: 0.0,
    }
}

fn to_ad(e: impl std::fmt::Display) -> AutodiffError {
    AutodiffError::Precondition(e.to_string())
}

fn run_regression(model: &RegressionCNN, x: &Tensor) -> Vec<f64> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let xv = g.constant(x.clone());
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let y = forward_regression(&mut g, model, &p, xv, Mode::Eval, &mut r).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn default_parameter_counts() {
    // conv: k·k·cin·cout + cout per block
    let convs = (27 * 16 + 16) + (9 * 16 * 32 + 32) + (9 * 32 * 64 + 64);
    let reg = convs + (7 * 7 * 64 * 128 + 128) + (128 + 1);
    let det = convs + (64 * 32 + 32) + (32 + 1);
    let m = RegressionCNN::new(Architecture::regression(), 1).unwrap();
    assert_eq!(m.parameter_count(), reg);
    assert_eq!(Architecture::regression().parameter_count(), reg);
    let pair = DetectorPair::new(Architecture::detector(), 1).unwrap();
    assert_eq!(pair.parameter_count(), 2 * det);
    assert_eq!(Architecture::detector().grid(), 7);
}

#[test]
fn init_is_seeded_with_zero_biases() {
    let a = init_params(&Architecture::regression(), 5).unwrap();
    let b = init_params(&Architecture::regression(), 5).unwrap();
    let c = init_params(&Architecture::regression(), 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    for (name, t) in a.entries() {
        if name.ends_with(".bias") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
}

#[test]
fn first_kernel_has_uniform_moments() {
    // U(-b, b) with b = √(6/27) has std b/√3
    let expect = (6.0f64 / 27.0).sqrt() / 3f64.sqrt();
    for seed in 0..10 {
        let p = init_params(&Architecture::regression(), seed).unwrap();
        let k = p.get("conv1.kernel").unwrap();
        assert_eq!(k.shape(), &[3, 3, 3, 16]);
        let n = k.len() as f64;
        let mean = k.data().iter().sum::<f64>() / n;
        let std = (k.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std / expect - 1.0).abs() < 0.2, "seed {seed}: {std} vs {expect}");
    }
}

#[test]
fn regression_forward_shapes_and_purity() {
    let m = RegressionCNN::new(Architecture::regression(), 3).unwrap();
    let x = images(3, 56, 1);
    let a = run_regression(&m, &x);
    assert_eq!(a.len(), 3);
    assert_eq!(a, run_regression(&m, &x));
    // two identical frames
    let mut d = x.data()[..56 * 56 * 3].to_vec();
    d.extend_from_slice(&x.data()[..56 * 56 * 3]);
    let twin = run_regression(&m, &Tensor::new(&[2, 56, 56, 3], d).unwrap());
    assert_eq!(twin[0], twin[1]);
    assert_eq!(twin[0], a[0]);
}

#[test]
fn wrong_input_size_is_rejected() {
    let m = RegressionCNN::new(Architecture::regression(), 3).unwrap();
    let mut g = Graph::new();
    let p = m.params.bind(&mut g);
    let x = g.constant(images(1, 48, 0));
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let err = forward_regression(&mut g, &m, &p, x, Mode::Eval, &mut r).unwrap_err();
    assert!(matches!(err, ModelError::Input { .. }));
}

#[test]
fn train_mode_dropout_varies_eval_does_not() {
    let m = RegressionCNN::new(Architecture::regression(), 4).unwrap();
    let x = images(2, 56, 2);
    let run = |seed| {
        let mut g = Graph::new();
        let p = m.params.bind(&mut g);
        let xv = g.constant(x.clone());
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let y = forward_regression(&mut g, &m, &p, xv, Mode::Train, &mut r).unwrap();
        g.value(y).data().to_vec()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn regression_commutes_with_frame_permutation(seed in 0u64..1000, rot in 1usize..4) {
        let m = RegressionCNN::new(micro_regression(), seed).unwrap();
        let x = images(4, 8, seed + 1);
        let per = 8 * 8 * 3;
        let mut d = Vec::new();
        for i in 0..4 {
            let j = (i + rot) % 4;
            d.extend_from_slice(&x.data()[j * per..(j + 1) * per]);
        }
        let a = run_regression(&m, &x);
        let b = run_regression(&m, &Tensor::new(&[4, 8, 8, 3], d).unwrap());
        for i in 0..4 {
            prop_assert_eq!(b[i], a[(i + rot) % 4]);
        }
    }

    #[test]
    fn exclusion_is_respected(
        data in prop::collection::vec(-1.0f64..1.0, 7 * 7 * 4),
        r in 0usize..7, c in 0usize..7, radius in 0usize..3,
    ) {
        let ex = Exclusion { cell: (r, c), radius };
        let cell = select_cell(&data, 7, 7, 4, Some(ex)).unwrap();
        prop_assert!(cell.0.abs_diff(r) > radius || cell.1.abs_diff(c) > radius);
    }
}

#[test]
fn selection_examples() {
    let mut grid = vec![0.0; 7 * 7 * 64];
    let off = (4 * 7 + 5) * 64;
    grid[off + 3] = 2.0;
    let t = Tensor::new(&[7, 7, 64], grid).unwrap();
    let (v, cell) = select_spatial(&t, None).unwrap();
    assert_eq!(cell, (4, 5));
    assert_eq!(v.data()[3], 2.0);

    let uniform = Tensor::filled(&[7, 7, 64], 0.3);
    assert_eq!(select_spatial(&uniform, None).unwrap().1, (0, 0));

    let ex = Exclusion {
        cell: (3, 3),
        radius: 2,
    };
    let mut admissible = 0;
    for r in 0..7 {
        for c in 0..7 {
            let inside = (r as i64 - 3).abs().max((c as i64 - 3).abs()) <= 2;
            assert_eq!(ex.excludes((r, c)), inside);
            admissible += usize::from(!inside);
        }
    }
    assert_eq!(admissible, 24);
    // uniform grid with the centre excluded: first admissible row-major cell
    assert_eq!(select_spatial(&uniform, Some(ex)).unwrap().1, (0, 0));
    let all = Exclusion {
        cell: (3, 3),
        radius: 3,
    };
    assert!(select_spatial(&uniform, Some(all)).is_err());
}

#[test]
fn pair_shapes_and_exclusion_rule() {
    let pair = DetectorPair::new(Architecture::detector(), 9).unwrap();
    let mut g = Graph::new();
    let p1 = pair.f1.params.bind(&mut g);
    let p2 = pair.f2.params.bind(&mut g);
    let x = g.constant(images(16, 56, 3));
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let out = forward_pair(&mut g, &pair, &p1, &p2, x, Mode::Eval, &mut r).unwrap();
    assert_eq!(g.value(out.p1).shape(), &[16]);
    assert_eq!(g.value(out.p2).shape(), &[16]);
    assert_eq!(out.cells1.len(), 16);
    assert_eq!(out.cells2.len(), 16);
    let probs1 = g.value(out.p1).data().to_vec();
    for (i, &p) in probs1.iter().enumerate() {
        assert!(p > 0.0 && p < 1.0);
        let (a, b) = (out.cells1[i], out.cells2[i]);
        assert!(a.0 < 7 && a.1 < 7 && b.0 < 7 && b.1 < 7);
        if p > 0.5 {
            assert!(a.0.abs_diff(b.0) > 2 || a.1.abs_diff(b.1) > 2);
        }
    }
}

#[test]
fn low_p1_leaves_f2_unconstrained() {
    let mut pair = DetectorPair::new(Architecture::detector(), 2).unwrap();
    // force p1 = sigmoid(-50)
    let n = pair.f1.params.len();
    *pair.f1.params.tensor_mut(n - 1) = Tensor::vector(vec![-50.0]);
    let x = images(4, 56, 7);
    let run = |pair: &DetectorPair| {
        let mut g = Graph::new();
        let p1 = pair.f1.params.bind(&mut g);
        let p2 = pair.f2.params.bind(&mut g);
        let xv = g.constant(x.clone());
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let out = forward_pair(&mut g, pair, &p1, &p2, xv, Mode::Eval, &mut r).unwrap();
        (g.value(out.p1).data().to_vec(), out.cells2)
    };
    let (probs, cells2) = run(&pair);
    assert!(probs.iter().all(|&p| p < 0.5));
    // f2 alone on the same images picks the same cells
    let mut g = Graph::new();
    let p2 = pair.f2.params.bind(&mut g);
    let xv = g.constant(x.clone());
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let solo = forward_detector(&mut g, &pair.f2, &p2, xv, &[None; 4], Mode::Eval, &mut r).unwrap();
    assert_eq!(solo.cells, cells2);
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = RegressionCNN::new(micro_regression(), 1).unwrap();
    let p = dir.path().join("r.cfpm");
    m.save(&p).unwrap();
    assert_eq!(RegressionCNN::load(&p).unwrap(), m);

    let pair = DetectorPair::new(micro_detector(), 2).unwrap();
    let q = dir.path().join("p.cfpm");
    pair.save(&q).unwrap();
    assert_eq!(DetectorPair::load(&q).unwrap(), pair);

    let mut bytes = std::fs::read(&q).unwrap();
    bytes[1] = b'?';
    std::fs::write(&q, &bytes).unwrap();
    assert!(matches!(
        DetectorPair::load(&q),
        Err(ModelError::Checkpoint { offset: 0, .. })
    ));
    std::fs::write(&p, &std::fs::read(&p).unwrap()[..50]).unwrap();
    assert!(matches!(RegressionCNN::load(&p), Err(ModelError::Checkpoint { .. })));
}

/// Rebind `params` with tensor `k` replaced by the probed variable.
fn bind_with(g: &mut Graph, params: &ParamSet, k: usize, probe: Var) -> Vec<Var> {
    params
        .tensors()
        .enumerate()
        .map(|(i, t)| if i == k { probe } else { g.constant(t.clone()) })
        .collect()
}

#[test]
fn free_fall_loss_through_the_regressor_passes_gradcheck() {
    let m = RegressionCNN::new(micro_regression(), 11).unwrap();
    // the free-fall loss needs at least three frames
    let x3 = images(3, 8, 5);
    let proj = ProjectionOperator::new(3, 0.1, -9.8).unwrap();
    for k in 0..m.params.len() {
        let report = check_gradients(
            |g, probe| {
                let p = bind_with(g, &m.params, k, probe);
                let xv = g.constant(x3.clone());
                let mut r = ChaCha8Rng::seed_from_u64(0);
                let y = forward_regression(g, &m, &p, xv, Mode::Eval, &mut r).map_err(to_ad)?;
                free_fall_loss(g, y, &proj).map_err(to_ad)
            },
            m.params.tensors().nth(k).unwrap(),
            1e-5,
            1e-4,
        )
        .unwrap();
        let name = m.params.names().nth(k).unwrap();
        assert!(report.passed, "{name}: {report:?}");
    }
}

#[test]
fn causal_loss_through_the_pair_passes_gradcheck() {
    let pair = DetectorPair::new(micro_detector(), 4).unwrap();
    let x = images(4, 16, 8);
    let xr = {
        let mut d = vec![0.0; x.len()];
        let s = 16;
        for b in 0..4 {
            for r in 0..s {
                for c in 0..s {
                    for ch in 0..3 {
                        d[((b * s + r) * s + c) * 3 + ch] =
                            x.data()[((b * s + r) * s + (s - 1 - c)) * 3 + ch];
                    }
                }
            }
        }
        Tensor::new(&[4, 16, 16, 3], d).unwrap()
    };
    let n = pair.f1.params.len();
    for k in 0..2 * n {
        let (net, idx) = if k < n { (0, k) } else { (1, k - n) };
        let target = if net == 0 { &pair.f1 } else { &pair.f2 };
        let report = check_gradients(
            |g, probe| {
                let (p1, p2) = if net == 0 {
                    let p1 = bind_with(g, &pair.f1.params, idx, probe);
                    let p2 = bind_with(g, &pair.f2.params, usize::MAX, probe);
                    (p1, p2)
                } else {
                    let p1 = bind_with(g, &pair.f1.params, usize::MAX, probe);
                    let p2 = bind_with(g, &pair.f2.params, idx, probe);
                    (p1, p2)
                };
                let mut r = ChaCha8Rng::seed_from_u64(0);
                let xv = g.constant(x.clone());
                let a = forward_pair(g, &pair, &p1, &p2, xv, Mode::Eval, &mut r).map_err(to_ad)?;
                let xrv = g.constant(xr.clone());
                let b = forward_pair(g, &pair, &p1, &p2, xrv, Mode::Eval, &mut r).map_err(to_ad)?;
                let probs = CausalProbs {
                    p1: a.p1,
                    p2: a.p2,
                    p1_reflected: b.p1,
                    p2_reflected: b.p2,
                };
                Ok(causal_loss_terms(g, &probs, &LossWeights::causal()).map_err(to_ad)?.total)
            },
            target.params.tensors().nth(idx).unwrap(),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "net {} param {idx}: {report:?}", net + 1);
    }
}
