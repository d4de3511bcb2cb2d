use cflab::autodiff::{check_gradients, AutodiffError, Graph, Mode, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Six-loop SAME-padded cross-correlation used as the oracle for conv2d.
fn reference_conv(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Vec<f64> {
    let [h, w, cin] = input.shape()[..] else { panic!() };
    let [k, _, _, cout] = kernel.shape()[..] else { panic!() };
    let pad = (k / 2) as isize;
    let (x, kd) = (input.data(), kernel.data());
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            for co in 0..cout {
                let mut acc = bias.data()[co];
                for ky in 0..k {
                    for kx in 0..k {
                        for ci in 0..cin {
                            let iy = y as isize + ky as isize - pad;
                            let ix = xx as isize + kx as isize - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x[(iy as usize * w + ix as usize) * cin + ci]
                                * kd[((ky * k + kx) * cin + ci) * cout + co];
                        }
                    }
                }
                out[(y * w + xx) * cout + co] = acc;
            }
        }
    }
    out
}

fn identity_kernel(c: usize) -> Tensor {
    let mut d = vec![0.0; c * c];
    for i in 0..c {
        d[i * c + i] = 1.0;
    }
    Tensor::new(&[1, 1, c, c], d).unwrap()
}

#[test]
fn conv_identity_and_zero_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&[6, 4, 3], &mut rng);
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let k = g.constant(identity_kernel(3));
    let b = g.constant(Tensor::zeros(&[3]));
    let y = g.conv2d(xi, k, b).unwrap();
    assert_eq!(g.value(y).data(), x.data());

    let k0 = g.constant(Tensor::zeros(&[3, 3, 3, 5]));
    let b0 = g.constant(Tensor::zeros(&[5]));
    let z = g.conv2d(xi, k0, b0).unwrap();
    assert_eq!(g.value(z).shape(), &[6, 4, 5]);
    assert!(g.value(z).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_six_loop_reference_on_ramp() {
    let ramp = Tensor::new(&[5, 5, 1], (0..25).map(f64::from).collect()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let kernel = random_tensor(&[3, 3, 1, 2], &mut rng);
    let bias = Tensor::vector(vec![0.5, -0.25]);
    let expected = reference_conv(&ramp, &kernel, &bias);
    let mut g = Graph::new();
    let (x, k, b) = (
        g.constant(ramp),
        g.constant(kernel),
        g.constant(bias),
    );
    let y = g.conv2d(x, k, b).unwrap();
    for (a, e) in g.value(y).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn batched_conv_equals_per_image_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = random_tensor(&[3, 6, 6, 2], &mut rng);
    let kernel = random_tensor(&[3, 3, 2, 4], &mut rng);
    let bias = random_tensor(&[4], &mut rng);
    let mut g = Graph::new();
    let (x, k, b) = (
        g.constant(batch.clone()),
        g.constant(kernel.clone()),
        g.constant(bias.clone()),
    );
    let y = g.conv2d(x, k, b).unwrap();
    for i in 0..3 {
        let img = Tensor::new(&[6, 6, 2], batch.data()[i * 72..(i + 1) * 72].to_vec()).unwrap();
        let expected = reference_conv(&img, &kernel, &bias);
        let got = &g.value(y).data()[i * 144..(i + 1) * 144];
        for (a, e) in got.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_channel_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[4, 4, 3]));
    let k = g.constant(Tensor::zeros(&[3, 3, 2, 8]));
    let b = g.constant(Tensor::zeros(&[8]));
    let err = g.conv2d(x, k, b).unwrap_err().to_string();
    assert!(err.contains("[3, 3, 2, 8]") && err.contains("[4, 4, 3]"), "{err}");
    let even = g.constant(Tensor::zeros(&[2, 2, 3, 8]));
    assert!(g.conv2d(x, even, b).is_err());
}

#[test]
fn maxpool_window_maxima_and_shapes() {
    let c = Tensor::filled(&[4, 6, 2], 3.5);
    let mut g = Graph::new();
    let x = g.constant(c);
    let p = g.maxpool2(x).unwrap();
    assert_eq!(g.value(p).shape(), &[2, 3, 2]);
    assert!(g.value(p).data().iter().all(|&v| v == 3.5));

    // distinct entries, compared with an exhaustive scan of each window
    let vals: Vec<f64> = [7, 2, 9, 4, 1, 15, 3, 8, 12, 6, 0, 11, 5, 14, 10, 13]
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    let m = Tensor::new(&[4, 4, 1], vals.clone()).unwrap();
    let xi = g.constant(m);
    let p = g.maxpool2(xi).unwrap();
    let mut expected = Vec::new();
    for wy in 0..2 {
        for wx in 0..2 {
            let mut best = f64::MIN;
            for dy in 0..2 {
                for dx in 0..2 {
                    best = best.max(vals[(2 * wy + dy) * 4 + 2 * wx + dx]);
                }
            }
            expected.push(best);
        }
    }
    assert_eq!(g.value(p).data(), &expected[..]);

    let big = g.constant(Tensor::zeros(&[56, 56, 64]));
    let mut h = big;
    for _ in 0..3 {
        h = g.maxpool2(h).unwrap();
    }
    assert_eq!(g.value(h).shape(), &[7, 7, 64]);
    assert!(g.maxpool2(h).is_err());
}

#[test]
fn maxpool_routes_gradient_to_first_maximum() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(&[2, 2, 1], vec![1.0, 4.0, 4.0, 2.0]).unwrap());
    let p = g.maxpool2(x).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn dense_identity_zero_and_reference() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, -2.0, 3.0]));
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 4] = 1.0;
    }
    let w = g.constant(Tensor::new(&[3, 3], eye).unwrap());
    let b = g.constant(Tensor::zeros(&[3]));
    let y = g.dense(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.0]);

    let w0 = g.constant(Tensor::zeros(&[2, 3]));
    let bb = g.constant(Tensor::vector(vec![0.5, 7.0]));
    let y0 = g.dense(x, w0, bb).unwrap();
    assert_eq!(g.value(y0).data(), &[0.5, 7.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let wt = random_tensor(&[3, 4], &mut rng);
    let xt = random_tensor(&[4], &mut rng);
    let bt = random_tensor(&[3], &mut rng);
    let expected: Vec<f64> = (0..3)
        .map(|i| bt.data()[i] + (0..4).map(|j| wt.data()[i * 4 + j] * xt.data()[j]).sum::<f64>())
        .collect();
    let (xv, wv, bv) = (g.constant(xt), g.constant(wt), g.constant(bt));
    let y = g.dense(xv, wv, bv).unwrap();
    for (a, e) in g.value(y).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-14);
    }
    let bad = g.constant(Tensor::zeros(&[5]));
    assert!(g.dense(bad, wv, bv).is_err());
}

#[test]
fn elementwise_values() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).item().unwrap(), 0.5);

    let a = g.param(Tensor::vector(vec![-3.0, 0.0, 5.0]));
    let ab = g.abs(a);
    let total = g.sum(ab);
    g.backward(total).unwrap();
    assert_eq!(g.grad(a).unwrap().data(), &[-1.0, 0.0, 1.0]);

    let other = g.constant(Tensor::zeros(&[2]));
    assert!(g.add(x, other).is_err());
    assert!(g.mul(x, other).is_err());
    assert!(g.sub(x, other).is_err());
}

#[test]
fn reductions() {
    let mut g = Graph::new();
    let c = g.param(Tensor::filled(&[3], 4.2));
    let s = g.std(c);
    assert_eq!(g.value(s).item().unwrap(), 0.0);

    let v = g.param(Tensor::vector(vec![0.0, 2.5, 5.0, 7.5, 10.0]));
    let s = g.std(v);
    // mean 5, squared deviations 25, 6.25, 0, 6.25, 25 -> 62.5 / 5
    assert!((g.value(s).item().unwrap() - 12.5f64.sqrt()).abs() < 1e-14);

    let m = g.param(Tensor::vector(vec![1.0, 7.0, 3.0]));
    let mx = g.max(m);
    assert_eq!(g.value(mx).item().unwrap(), 7.0);
    g.backward(mx).unwrap();
    assert_eq!(g.grad(m).unwrap().data(), &[0.0, 1.0, 0.0]);

    let one = g.param(Tensor::vector(vec![3.0]));
    let s1 = g.std(one);
    assert_eq!(g.value(s1).item().unwrap(), 0.0);
    g.backward(s1).unwrap();
    assert_eq!(g.grad(one).unwrap().data(), &[0.0]);

    let mn = g.mean(v);
    assert_eq!(g.value(mn).item().unwrap(), 5.0);
}

#[test]
fn dropout_modes_and_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let x = g.param(Tensor::filled(&[10_000], 1.0));
    let same = g.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
    assert_eq!(g.value(same).data(), g.value(x).data());
    let ev = g.dropout(x, 0.7, Mode::Eval, &mut rng).unwrap();
    assert_eq!(g.value(ev).data(), g.value(x).data());

    let d = g.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
    let survivors = g.value(d).data().iter().filter(|&&v| v != 0.0).count();
    let frac = survivors as f64 / 10_000.0;
    assert!((frac - 0.5).abs() < 0.05, "{frac}");
    assert!(g
        .value(d)
        .data()
        .iter()
        .all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-15));
    assert!(g.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
}

#[test]
fn backward_basics() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let sum = g.sum(x);
    g.backward(sum).unwrap();
    assert_eq!(g.grad(x).unwrap().item().unwrap(), 1.0);

    let sq = g.mul(x, x).unwrap();
    g.backward(sq).unwrap();
    assert_eq!(g.grad(x).unwrap().item().unwrap(), 6.0);
    // repeated call resets rather than accumulates
    g.backward(sq).unwrap();
    assert_eq!(g.grad(x).unwrap().item().unwrap(), 6.0);

    let v = g.param(Tensor::zeros(&[3]));
    assert!(matches!(g.backward(v), Err(AutodiffError::NotScalar(_))));
}

#[test]
fn gradcheck_dense_layer_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let w = random_tensor(&[3, 4], &mut rng);
    let b = random_tensor(&[3], &mut rng);
    let x = random_tensor(&[4], &mut rng);
    let report = check_gradients(
        |g, xv| {
            let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
            let y = g.dense(xv, wv, bv)?;
            let y2 = g.mul(y, y)?;
            Ok(g.sum(y2))
        },
        &x,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn gradcheck_relu_away_from_kink_and_constant_loss() {
    let x = Tensor::vector(vec![-0.8, 0.3, -0.05, 1.7, 0.02]);
    let report = check_gradients(
        |g, xv| {
            let r = g.relu(xv);
            let r2 = g.mul(r, r)?;
            Ok(g.sum(r2))
        },
        &x,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");

    let constant = check_gradients(|g, _| Ok(g.constant(Tensor::scalar(2.0))), &x, 1e-5, 1e-4)
        .unwrap();
    assert!(constant.analytic.iter().all(|&v| v == 0.0));
    assert!(constant.numeric.iter().all(|&v| v == 0.0));
    assert!(constant.passed);
}

#[test]
fn gradcheck_rejects_nondeterministic_builder() {
    let counter = std::cell::Cell::new(0.0);
    let err = check_gradients(
        |g, xv| {
            counter.set(counter.get() + 1.0);
            let s = g.sum(xv);
            Ok(g.add_scalar(s, counter.get()))
        },
        &Tensor::vector(vec![1.0]),
        1e-5,
        1e-4,
    )
    .unwrap_err();
    assert!(matches!(err, AutodiffError::NonDeterministic { .. }));
}

/// A scalar loss touching every op, with inputs kept clear of kinks.
fn every_op(g: &mut Graph, x: Var) -> Result<Var, AutodiffError> {
    // x is 4×4×2
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let k = g.constant(random_tensor(&[3, 3, 2, 3], &mut rng));
    let b = g.constant(Tensor::vector(vec![0.1, -0.2, 0.3]));
    let c = g.conv2d(x, k, b)?;
    let p = g.maxpool2(c)?;
    let flat = g.reshape(p, &[12])?;
    let w = g.constant(random_tensor(&[5, 12], &mut rng));
    let bb = g.constant(random_tensor(&[5], &mut rng));
    let d = g.dense(flat, w, bb)?;
    let s = g.sigmoid(d);
    let a = g.abs(d);
    let n = g.neg(a);
    let m = g.mul(s, n)?;
    let sc = g.scale(m, 1.7);
    let ad = g.add(sc, s)?;
    let sb = g.sub(ad, a)?;
    let sl = g.slice(sb, 1, 3)?;
    let sd = g.std(sb);
    let mx = g.max(sl);
    let mean = g.mean(sb);
    let l = g.ln(s);
    let lsum = g.sum(l);
    let t = g.add(sd, mx)?;
    let t = g.add(t, mean)?;
    g.add(t, lsum)
}

#[test]
fn composite_of_every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&[4, 4, 2], &mut rng);
    let report = check_gradients(every_op, &x, 1e-5, 1e-4).unwrap();
    assert!(report.passed, "max rel error {}", report.max_rel_error);
}

#[test]
fn stack_column_and_select_cells_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grid = random_tensor(&[2, 3, 3, 4], &mut rng);
    let report = check_gradients(
        |g, x| {
            let sel = g.select_cells(x, &[(1, 2), (0, 0)])?;
            let sq = g.mul(sel, sel)?;
            let c0 = g.column(sq, 1)?;
            let c1 = g.column(sq, 3)?;
            let st = g.stack_columns(&[c0, c1, c0])?;
            let cat = g.concat(&[st, c1])?;
            Ok(g.sum(cat))
        },
        &grid,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn backward_is_linear_in_the_loss(seed in any::<u64>(), alpha in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[4, 4, 2], &mut rng);
        let grad_of = |scale: Option<f64>| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let mut l = every_op(&mut g, xv).unwrap();
            if let Some(a) = scale {
                l = g.scale(l, a);
            }
            g.backward(l).unwrap();
            g.grad(xv).unwrap().data().to_vec()
        };
        let base = grad_of(None);
        let scaled = grad_of(Some(alpha));
        for (b, s) in base.iter().zip(&scaled) {
            prop_assert!((alpha * b - s).abs() <= 1e-12 * (1.0 + b.abs() * alpha.abs()));
        }
    }

    #[test]
    fn gradient_of_a_sum_is_the_sum_of_gradients(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[6], &mut rng);
        let l1 = |g: &mut Graph, v: Var| {
            let s = g.sigmoid(v);
            let m = g.mul(s, v).unwrap();
            g.sum(m)
        };
        let l2 = |g: &mut Graph, v: Var| {
            let a = g.abs(v);
            g.std(a)
        };
        let grad = |which: u8| {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let out = match which {
                1 => l1(&mut g, v),
                2 => l2(&mut g, v),
                _ => {
                    let a = l1(&mut g, v);
                    let b = l2(&mut g, v);
                    g.add(a, b).unwrap()
                }
            };
            g.backward(out).unwrap();
            g.grad(v).unwrap().data().to_vec()
        };
        let (g1, g2, g12) = (grad(1), grad(2), grad(3));
        for i in 0..6 {
            prop_assert!((g1[i] + g2[i] - g12[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_conv_and_constant_pool(h in 1usize..5, w in 1usize..5, c in 1usize..4, v in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64((h * 100 + w * 10 + c) as u64);
        let x = random_tensor(&[2 * h, 2 * w, c], &mut rng);
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let k = g.constant(identity_kernel(c));
        let b = g.constant(Tensor::zeros(&[c]));
        let y = g.conv2d(xi, k, b).unwrap();
        prop_assert_eq!(g.value(y).data(), x.data());
        let flat = g.constant(Tensor::filled(&[2 * h, 2 * w, c], v));
        let p = g.maxpool2(flat).unwrap();
        prop_assert!(g.value(p).data().iter().all(|&e| e == v));
    }
}
