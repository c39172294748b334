use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use resd::autodiff::{BnMode, BnState, OpKind};
use resd::gradcheck::{numeric_grad, op_suite, rel_err, FD_STEP};
use resd::{Tape, Tensor};

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Direct seven-loop grouped cross-correlation.
#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    w: &[f64],
    n: usize,
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Vec<f64> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let cig = c_in / groups;
    let cog = c_out / groups;
    let mut out = vec![0.0; n * c_out * ho * wo];
    for b in 0..n {
        for co in 0..c_out {
            let g = co / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cig {
                        let cin = g * cig + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((b * c_in + cin) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((co * cig + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * c_out + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_direct_loops(
        n in 1usize..3,
        groups in 1usize..3,
        cig in 1usize..3,
        cog in 1usize..3,
        h in 3usize..7,
        wd in 3usize..7,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3,
        pad in 0usize..2,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c_in, c_out) = (cig * groups, cog * groups);
        let x = rand_vec(&mut rng, n * c_in * h * wd);
        let w = rand_vec(&mut rng, c_out * cig * k * k);
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::new(&[n, c_in, h, wd], x.clone()).unwrap());
        let wv = tape.leaf(Tensor::param(&[c_out, cig, k, k], w.clone()).unwrap());
        let y = tape.conv2d(xv, wv, groups, stride, pad).unwrap();
        let expect = naive_conv(&x, &w, n, c_in, h, wd, c_out, k, stride, pad, groups);
        let got = tape.value(y).data();
        prop_assert_eq!(got.len(), expect.len());
        for (a, b) in got.iter().zip(&expect) {
            prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_vec(&mut rng, m * k);
        let b = rand_vec(&mut rng, k * n);
        let mut tape = Tape::new();
        let av = tape.leaf(Tensor::new(&[m, k], a.clone()).unwrap());
        let bv = tape.leaf(Tensor::new(&[k, n], b.clone()).unwrap());
        let c = tape.matmul(av, bv).unwrap();
        for i in 0..m {
            for j in 0..n {
                let e: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                prop_assert!((tape.value(c).data()[i * n + j] - e).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn log_softmax_rows_exponentiate_to_one(rows in 1usize..4, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-30.0..30.0)).collect();
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(&[rows, cols], x).unwrap());
        let lp = tape.log_softmax(v).unwrap();
        for row in tape.value(lp).data().chunks(cols) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn every_op_passes_finite_differences() {
    let results = op_suite(11).unwrap();
    assert!(results.len() >= 20);
    for r in &results {
        assert!(r.checked > 0, "{} checked nothing", r.name);
        assert!(r.max_rel_err < 1e-5, "{}: {}", r.name, r.max_rel_err);
    }
}

#[test]
fn composite_graph_gradient_matches_central_differences() {
    // relu(conv(x, w)) -> gap -> linear -> log_softmax -> weighted sum
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::new(&[2, 2, 4, 4], rand_vec(&mut rng, 64)).unwrap();
    let w0 = rand_vec(&mut rng, 3 * 2 * 9);
    let w1 = rand_vec(&mut rng, 4 * 3);
    let coef = rand_vec(&mut rng, 8);
    let eval = |p: &[f64], want_grad: bool| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wa = tape.leaf(Tensor::param(&[3, 2, 3, 3], p[..54].to_vec()).unwrap());
        let wb = tape.leaf(Tensor::param(&[4, 3], p[54..].to_vec()).unwrap());
        let h = tape.conv2d(xv, wa, 1, 1, 1).unwrap();
        let h = tape.relu(h);
        let h = tape.global_avg_pool(h).unwrap();
        let z = tape.linear(h, wb).unwrap();
        let lp = tape.log_softmax(z).unwrap();
        let l = tape.weighted_sum(lp, &coef).unwrap();
        let value = tape.value(l).data()[0];
        if !want_grad {
            return (value, Vec::new());
        }
        tape.backward(l, false).unwrap();
        let mut g = tape.grad(wa).unwrap().to_vec();
        g.extend_from_slice(tape.grad(wb).unwrap());
        (value, g)
    };
    let p0: Vec<f64> = w0.iter().chain(&w1).copied().collect();
    let (_, analytic) = eval(&p0, true);
    let numeric = numeric_grad(|p| Ok(eval(p, false).0), &p0, FD_STEP).unwrap();
    let worst = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max);
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3, 5], rand_vec(&mut rng, 15)).unwrap());
        let w = tape.leaf(Tensor::param(&[4, 5], rand_vec(&mut rng, 20)).unwrap());
        let z = tape.linear(x, w).unwrap();
        let z = tape.relu(z);
        let l = tape.sum(z);
        tape.backward(l, false).unwrap();
        tape.grad(w).unwrap().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn gradients_accumulate_across_two_backward_calls() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let l = tape.weighted_sum(w, &[2.0, 3.0, -1.0]).unwrap();
    tape.backward(l, false).unwrap();
    tape.backward(l, true).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[4.0, 6.0, -2.0]);
}

#[test]
fn stats_only_batch_norm_adds_no_nodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::param(&[4, 3, 2, 2], rand_vec(&mut rng, 48)).unwrap());
    let before = tape.node_count();
    let mut bn = BnState::new(3);
    tape.batch_norm(x, &mut bn, None, BnMode::AccumulateStats).unwrap();
    tape.batch_norm(x, &mut bn, None, BnMode::Eval).unwrap();
    assert_eq!(tape.node_count(), before);
    let mut bn2 = BnState::new(3);
    tape.batch_norm(x, &mut bn2, None, BnMode::TrainGraph).unwrap();
    assert_eq!(tape.node_count(), before + 1);
    assert_eq!(tape.op_kinds().last(), Some(&OpKind::BatchNorm));
}

#[test]
fn train_graph_batch_norm_updates_running_stats_by_momentum() {
    let mut tape = Tape::new();
    // One channel, values 1 and 3: mean 2, biased var 1, unbiased var 2.
    let x = tape.leaf(Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap());
    let mut bn = BnState::new(1);
    tape.batch_norm(x, &mut bn, None, BnMode::TrainGraph).unwrap();
    assert!((bn.running_mean[0] - 0.2).abs() < 1e-15);
    let var_expect = 0.9 * 1.0 + 0.1 * 2.0;
    assert!((bn.running_var[0] - var_expect).abs() < 1e-15, "{}", bn.running_var[0]);
}
