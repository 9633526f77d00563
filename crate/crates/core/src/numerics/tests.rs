use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::numerics::rng::seeded;

/// Independent oracle: central differences of `f` around `x`.
fn central_diff(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - h;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Gradient of a weighted sum of the op's output, so every output element
/// carries a distinct adjoint.
fn weighted(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let len = tape.value(out).len();
    let w = Tensor::randn(&[len, 1], 1.0, &mut seeded(seed));
    let flat = tape.reshape(out, &[1, len]).unwrap();
    let wv = tape.constant(w);
    tape.matmul(flat, wv).unwrap()
}

#[test]
fn matmul_identity_and_hand_example() {
    let mut tape = Tape::new();
    let b = Tensor::randn(&[3, 3], 1.0, &mut seeded(1));
    let i = tape.constant(Tensor::eye(3));
    let bv = tape.constant(b.clone());
    let out = tape.matmul(i, bv).unwrap();
    assert_eq!(tape.value(out), &b);

    let a = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let c = tape.constant(Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap());
    let out = tape.matmul(a, c).unwrap();
    assert_eq!(tape.value(out).data(), &[2.0, 4.0]);
    assert_eq!(tape.value(out).shape(), &[2, 1]);
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        tape.matmul(a, b),
        Err(crate::Error::InvalidInput(_))
    ));
}

#[test]
fn matmul_gradient_of_sum_matches_finite_differences() {
    let mut rng = seeded(2);
    let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let b = Tensor::randn(&[5, 2], 1.0, &mut rng);
    let mut tape = Tape::new();
    let av = tape.param(a.clone());
    let bv = tape.constant(b.clone());
    let out = tape.matmul(av, bv).unwrap();
    let s = tape.sum(out);
    let grads = tape.backward(s).unwrap();
    let numeric = central_diff(&a, 1e-5, |a| {
        let mut t = Tape::new();
        let av = t.constant(a.clone());
        let bv = t.constant(b.clone());
        let o = t.matmul(av, bv).unwrap();
        t.value(o).sum()
    });
    assert!(rel_err(grads.get(av).unwrap().data(), &numeric) < 1e-6);
}

#[test]
fn temporal_conv_identity_kernel_is_identity() {
    let x = Tensor::randn(&[2, 3, 7, 5], 1.0, &mut seeded(3));
    let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w);
    let out = tape.temporal_conv(xv, wv, None, 1, 0).unwrap();
    assert_eq!(tape.value(out), &x);
}

#[test]
fn temporal_conv_output_length() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 90, 5]));
    let w = tape.constant(Tensor::zeros(&[4, 2, 9, 1]));
    let out = tape.temporal_conv(x, w, None, 2, 4).unwrap();
    assert_eq!(tape.value(out).shape(), &[1, 4, 45, 5]);
}

#[test]
fn temporal_conv_rejects_even_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 10, 5]));
    let w = tape.constant(Tensor::zeros(&[4, 2, 4, 1]));
    assert!(tape.temporal_conv(x, w, None, 1, 2).is_err());
}

#[test]
fn temporal_conv_matches_direct_sum() {
    // Direct evaluation of the convolution sum as an independent reference.
    let mut rng = seeded(4);
    let (n, c, t, v, co, kt, stride, pad) = (2, 3, 11, 4, 2, 3, 2, 1);
    let x = Tensor::randn(&[n, c, t, v], 1.0, &mut rng);
    let w = Tensor::randn(&[co, c, kt, 1], 1.0, &mut rng);
    let b = Tensor::randn(&[co], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (
        tape.constant(x.clone()),
        tape.constant(w.clone()),
        tape.constant(b.clone()),
    );
    let out = tape.temporal_conv(xv, wv, Some(bv), stride, pad).unwrap();
    let to = conv_output_len(t, kt, stride, pad).unwrap();
    let got = tape.value(out);
    for s in 0..n {
        for o in 0..co {
            for tt in 0..to {
                for j in 0..v {
                    let mut acc = b.data()[o];
                    for ci in 0..c {
                        for k in 0..kt {
                            let src = (tt * stride + k) as isize - pad as isize;
                            if src >= 0 && (src as usize) < t {
                                acc += w.get(&[o, ci, k, 0]) * x.get(&[s, ci, src as usize, j]);
                            }
                        }
                    }
                    assert!((got.get(&[s, o, tt, j]) - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn temporal_conv_gradients_match_finite_differences() {
    let mut rng = seeded(5);
    let x = Tensor::randn(&[2, 3, 12, 5], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 3, 5, 1], 0.5, &mut rng);
    let b = Tensor::randn(&[4], 0.5, &mut rng);
    for (stride, pad) in [(1, 2), (2, 2), (2, 0)] {
        let run = |x: &Tensor, w: &Tensor, b: &Tensor, grads: bool| {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let wv = tape.param(w.clone());
            let bv = tape.param(b.clone());
            let out = tape.temporal_conv(xv, wv, Some(bv), stride, pad).unwrap();
            let loss = weighted(&mut tape, out, 99);
            let value = tape.value(loss).data()[0];
            if !grads {
                return (value, vec![]);
            }
            let g = tape.backward(loss).unwrap();
            (
                value,
                vec![
                    g.get(xv).unwrap().clone(),
                    g.get(wv).unwrap().clone(),
                    g.get(bv).unwrap().clone(),
                ],
            )
        };
        let (_, g) = run(&x, &w, &b, true);
        let nx = central_diff(&x, 1e-5, |x| run(x, &w, &b, false).0);
        let nw = central_diff(&w, 1e-5, |w| run(&x, w, &b, false).0);
        let nb = central_diff(&b, 1e-5, |b| run(&x, &w, b, false).0);
        assert!(rel_err(g[0].data(), &nx) < 1e-6, "dx stride {stride}");
        assert!(rel_err(g[1].data(), &nw) < 1e-6, "dw stride {stride}");
        assert!(rel_err(g[2].data(), &nb) < 1e-6, "db stride {stride}");
    }
}

#[test]
fn graph_conv_gradients_match_finite_differences_static_and_per_frame() {
    let mut rng = seeded(6);
    let (n, c, t, v, k, co) = (2, 3, 4, 5, 3, 2);
    let x = Tensor::randn(&[n, c, t, v], 1.0, &mut rng);
    let w = Tensor::randn(&[k, co, c], 0.5, &mut rng);
    let b = Tensor::randn(&[co], 0.5, &mut rng);
    let adjs = [
        Arc::new(Tensor::uniform(&[k, v, v], 0.0, 1.0, &mut rng)),
        Arc::new(Tensor::uniform(&[n, t, k, v, v], 0.0, 1.0, &mut rng)),
    ];
    for adj in adjs {
        let run = |x: &Tensor, w: &Tensor, b: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let wv = tape.param(w.clone());
            let bv = tape.param(b.clone());
            let out = tape.graph_conv(xv, adj.clone(), wv, Some(bv)).unwrap();
            let loss = weighted(&mut tape, out, 7);
            (tape, [xv, wv, bv], loss)
        };
        let value = |x: &Tensor, w: &Tensor, b: &Tensor| {
            let (tape, _, loss) = run(x, w, b);
            tape.value(loss).data()[0]
        };
        let (tape, vars, loss) = run(&x, &w, &b);
        let g = tape.backward(loss).unwrap();
        assert!(
            rel_err(
                g.get(vars[0]).unwrap().data(),
                &central_diff(&x, 1e-5, |x| value(x, &w, &b))
            ) < 1e-6
        );
        assert!(
            rel_err(
                g.get(vars[1]).unwrap().data(),
                &central_diff(&w, 1e-5, |w| value(&x, w, &b))
            ) < 1e-6
        );
        assert!(
            rel_err(
                g.get(vars[2]).unwrap().data(),
                &central_diff(&b, 1e-5, |b| value(&x, &w, b))
            ) < 1e-6
        );
    }
}

#[test]
fn graph_conv_matches_einsum_reference() {
    let mut rng = seeded(8);
    let (n, c, t, v, k, co) = (1, 2, 3, 4, 2, 3);
    let x = Tensor::randn(&[n, c, t, v], 1.0, &mut rng);
    let w = Tensor::randn(&[k, co, c], 1.0, &mut rng);
    let adj = Tensor::randn(&[k, v, v], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let out = tape
        .graph_conv(xv, Arc::new(adj.clone()), wv, None)
        .unwrap();
    for o in 0..co {
        for tt in 0..t {
            for i in 0..v {
                let mut acc = 0.0;
                for p in 0..k {
                    for ci in 0..c {
                        for j in 0..v {
                            acc +=
                                w.get(&[p, o, ci]) * adj.get(&[p, i, j]) * x.get(&[0, ci, tt, j]);
                        }
                    }
                }
                assert!((tape.value(out).get(&[0, o, tt, i]) - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn batch_norm_constant_channel_yields_beta() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[4, 2, 3, 5], 3.25));
    let gamma = tape.param(Tensor::new(&[2], vec![1.7, -0.3]).unwrap());
    let beta = tape.param(Tensor::new(&[2], vec![0.4, -1.1]).unwrap());
    let mut stats = RunningStats::new(2);
    let out = tape
        .batch_norm(x, gamma, beta, &mut stats, NormMode::Train)
        .unwrap();
    for (i, v) in tape.value(out).data().iter().enumerate() {
        let want = if (i / 15) % 2 == 0 { 0.4 } else { -1.1 };
        assert_eq!(*v, want);
    }
    assert!((stats.mean[0] - 0.325).abs() < 1e-12);
}

#[test]
fn batch_norm_standardized_batch_is_unchanged() {
    // Two channels, each exactly mean 0 and biased variance 1.
    let data: Vec<f64> = (0..40)
        .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[2, 2, 10], data.clone()).unwrap());
    let gamma = tape.param(Tensor::full(&[2], 1.0));
    let beta = tape.param(Tensor::zeros(&[2]));
    let mut stats = RunningStats::new(2);
    let out = tape
        .batch_norm(x, gamma, beta, &mut stats, NormMode::Train)
        .unwrap();
    // Epsilon alone shifts each entry by |x|·(1 − 1/√(1+ε)) ≈ 5e-6.
    let shrink = 1.0 / (1.0 + BN_EPS).sqrt();
    for (a, b) in tape.value(out).data().iter().zip(&data) {
        assert!((a - b * shrink).abs() < 1e-12);
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    let mut rng = seeded(9);
    let x = Tensor::randn(&[3, 4, 2, 5], 2.0, &mut rng);
    let gamma = Tensor::randn(&[4], 1.0, &mut rng);
    let beta = Tensor::randn(&[4], 1.0, &mut rng);
    for mode in [NormMode::Train, NormMode::Eval] {
        let stats0 = RunningStats {
            mean: vec![0.1, -0.2, 0.3, 0.0],
            var: vec![1.5, 0.7, 2.0, 1.0],
        };
        let run = |x: &Tensor, g: &Tensor, b: &Tensor| {
            let mut stats = stats0.clone();
            let mut tape = Tape::new();
            let vars = [
                tape.param(x.clone()),
                tape.param(g.clone()),
                tape.param(b.clone()),
            ];
            let out = tape
                .batch_norm(vars[0], vars[1], vars[2], &mut stats, mode)
                .unwrap();
            let loss = weighted(&mut tape, out, 3);
            (tape, vars, loss)
        };
        let value = |x: &Tensor, g: &Tensor, b: &Tensor| {
            let (t, _, l) = run(x, g, b);
            t.value(l).data()[0]
        };
        let (tape, vars, loss) = run(&x, &gamma, &beta);
        let g = tape.backward(loss).unwrap();
        let ng = central_diff(&gamma, 1e-5, |gm| value(&x, gm, &beta));
        assert!(
            rel_err(g.get(vars[1]).unwrap().data(), &ng) < 1e-5,
            "{mode:?} gamma"
        );
        let nx = central_diff(&x, 1e-5, |xx| value(xx, &gamma, &beta));
        assert!(
            rel_err(g.get(vars[0]).unwrap().data(), &nx) < 1e-5,
            "{mode:?} x"
        );
        let nb = central_diff(&beta, 1e-5, |bb| value(&x, &gamma, bb));
        assert!(
            rel_err(g.get(vars[2]).unwrap().data(), &nb) < 1e-5,
            "{mode:?} beta"
        );
    }
}

#[test]
fn softmax_of_zero_logits_is_uniform() {
    let mut tape = Tape::new();
    let logits = tape.param(Tensor::zeros(&[3, 10]));
    let loss = tape.softmax_cross_entropy(logits, &[0, 4, 9]).unwrap();
    assert!((tape.value(loss).data()[0] - 10f64.ln()).abs() < 1e-12);
    assert!((tape.value(loss).data()[0] - 2.302585).abs() < 1e-6);
    let p = softmax_rows(&[0.0; 10], 10);
    assert!(p.iter().all(|&v| (v - 0.1).abs() < 1e-15));
    let g = tape.backward(loss).unwrap();
    let gl = g.get(logits).unwrap();
    // adjoint is (p - onehot) / N
    assert!((gl.get(&[1, 4]) - (0.1 - 1.0) / 3.0).abs() < 1e-15);
    assert!((gl.get(&[1, 3]) - 0.1 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_rejects_out_of_range_label() {
    let mut tape = Tape::new();
    let logits = tape.param(Tensor::zeros(&[1, 10]));
    assert!(tape.softmax_cross_entropy(logits, &[10]).is_err());
}

#[test]
fn dropout_eval_is_identity_and_train_keeps_half() {
    let mut rng = seeded(10);
    let x = Tensor::uniform(&[100_000], 0.5, 1.5, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let same = tape.dropout(xv, 0.5, false, &mut rng).unwrap();
    assert_eq!(tape.value(same), &x);

    let out = tape.dropout(xv, 0.5, true, &mut rng).unwrap();
    // Ratio before the 1/keep rescale is the survival indicator.
    let mean_ratio = tape
        .value(out)
        .data()
        .iter()
        .zip(x.data())
        .map(|(o, i)| o / i * 0.5)
        .sum::<f64>()
        / x.len() as f64;
    assert!((mean_ratio - 0.5).abs() <= 0.02, "{mean_ratio}");
}

#[test]
fn permute_and_mean_axis_gradients() {
    let mut rng = seeded(11);
    let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let p = tape.permute(xv, &[2, 0, 1]).unwrap();
        let m = tape.mean_axis(p, 1).unwrap();
        let r = tape.relu(m);
        let loss = weighted(&mut tape, r, 5);
        (tape, xv, loss)
    };
    let (tape, xv, loss) = run(&x);
    let g = tape.backward(loss).unwrap();
    let n = central_diff(&x, 1e-5, |x| {
        let (t, _, l) = run(x);
        t.value(l).data()[0]
    });
    assert!(rel_err(g.get(xv).unwrap().data(), &n) < 1e-6);
}

#[test]
fn gradients_are_fresh_on_each_backward() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(&[3], 2.0));
    let y = tape.scale(x, 3.0);
    let s = tape.sum(y);
    let g1 = tape.backward(s).unwrap().get(x).unwrap().clone();
    let g2 = tape.backward(s).unwrap().get(x).unwrap().clone();
    assert_eq!(g1, g2);
    assert_eq!(g1.data(), &[3.0; 3]);
}

fn linear_softmax_params() -> Vec<(String, Tensor)> {
    let mut rng = seeded(12);
    vec![
        ("weight".into(), Tensor::randn(&[6, 10], 0.5, &mut rng)),
        ("bias".into(), Tensor::randn(&[10], 0.5, &mut rng)),
    ]
}

fn linear_softmax(tape: &mut Tape, vars: &[Var]) -> crate::Result<Var> {
    let x = tape.constant(Tensor::randn(&[4, 6], 1.0, &mut seeded(13)));
    let h = tape.matmul(x, vars[0])?;
    let h = tape.add_bias(h, vars[1], 1)?;
    tape.softmax_cross_entropy(h, &[1, 3, 5, 7])
}

#[test]
fn grad_check_passes_on_linear_softmax() {
    let opts = GradCheckOptions {
        tol: 1e-6,
        step: 1e-5,
        ..Default::default()
    };
    let report = grad_check(&linear_softmax_params(), linear_softmax, &opts).unwrap();
    assert!(report.passed(), "{report}");
    assert_eq!(report.checked, 70);
}

#[test]
fn grad_check_flags_sign_flipped_adjoint() {
    let opts = GradCheckOptions {
        tol: 1e-6,
        fault: Some(OpKind::AddBias),
        ..Default::default()
    };
    let report = grad_check(&linear_softmax_params(), linear_softmax, &opts).unwrap();
    assert!(!report.passed());
    assert!(report.worst[0].error > 1e-3);
}

#[test]
fn grad_check_reports_non_finite_location() {
    let params = vec![("w".to_string(), Tensor::full(&[2], f64::NAN))];
    let err = grad_check(
        &params,
        |tape, vars| Ok(tape.sum(vars[0])),
        &GradCheckOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, crate::Error::NonFinite(_)));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = seeded(42);
        let x = Tensor::randn(&[2, 3, 9, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 1], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x), tape.constant(w));
        let y = tape.temporal_conv(xv, wv, None, 1, 1).unwrap();
        let y = tape.dropout(y, 0.5, true, &mut rng).unwrap();
        tape.value(y)
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_form_distributions(logits in prop::collection::vec(-50.0f64..50.0, 12)) {
        let p = softmax_rows(&logits, 4);
        for row in p.chunks(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn temporal_conv_length_formula(t in 1usize..40, half in 0usize..5, stride in 1usize..4) {
        let kt = 2 * half + 1;
        let pad = half;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, t, 2]));
        let w = tape.constant(Tensor::zeros(&[1, 1, kt, 1]));
        let out = tape.temporal_conv(x, w, None, stride, pad).unwrap();
        prop_assert_eq!(tape.value(out).shape()[2], (t + 2 * pad - kt) / stride + 1);
    }

    #[test]
    fn relu_add_scale_gradients(seed in 0u64..1000) {
        let mut rng = seeded(seed);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let run = |a: &Tensor| {
            let mut tape = Tape::new();
            let av = tape.param(a.clone());
            let bv = tape.constant(b.clone());
            let s = tape.add(av, bv).unwrap();
            let s = tape.scale(s, -1.5);
            let r = tape.relu(s);
            let l = weighted(&mut tape, r, seed);
            (tape, av, l)
        };
        let (tape, av, l) = run(&a);
        let g = tape.backward(l).unwrap();
        let n = central_diff(&a, 1e-5, |a| { let (t, _, l) = run(a); t.value(l).data()[0] });
        // Skip elements sitting within h of the ReLU kink.
        let pre: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| -1.5 * (x + y)).collect();
        let got = g.get(av).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; 12]);
        for i in 0..12 {
            if pre[i].abs() > 1e-4 {
                prop_assert!((got[i] - n[i]).abs() / n[i].abs().max(1.0) <= 1e-5);
            }
        }
    }
}
