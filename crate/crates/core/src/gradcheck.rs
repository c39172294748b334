//! Central finite-difference checks for every differentiable op, for the
//! relaxed BPTT graph, and the rate-versus-BPTT comparison at T=1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnMode, BnState, Tape, Tensor, Var};
use crate::data::EncodedBatch;
use crate::distill::build_branch;
use crate::error::Result;
use crate::snn::{
    bptt_forward, bptt_reference, conv_specs, mlp_specs, rate_reference_grads, LayerSpec, LifConfig, LossFn,
    SpikingNetwork, StatsMode,
};

pub const FD_STEP: f64 = 1e-6;
/// Denominator floor of the relative error, so gradients that are zero up to
/// rounding do not inflate it.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut p = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let up = f(&p)?;
        p[i] = x[i] - h;
        let down = f(&p)?;
        p[i] = x[i];
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Compares tape gradients of `Σ w·op(inputs)` (fixed random `w`) with
/// central differences for every input flagged `true`.
pub fn check_op(name: &str, inputs: &[(Tensor<f64>, bool)], build: &Build<'_>, seed: u64) -> Result<CheckResult> {
    let eval = |vals: &[Tensor<f64>], weights: &[f64]| -> Result<(Tape<f64>, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .zip(inputs)
            .map(|(t, (_, diff))| {
                let mut t = t.clone();
                t.requires_grad = *diff;
                tape.leaf(t)
            })
            .collect();
        let out = build(&mut tape, &vars)?;
        let loss = tape.weighted_sum(out, weights)?;
        Ok((tape, loss, vars))
    };
    let base: Vec<Tensor<f64>> = inputs.iter().map(|(t, _)| t.clone()).collect();
    let numel = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = base.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out).numel()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (mut tape, loss, vars) = eval(&base, &weights)?;
    tape.backward(loss, false)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, (t, diff)) in inputs.iter().enumerate() {
        if !*diff {
            continue;
        }
        let analytic = tape
            .grad(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let numeric = numeric_grad(
            |x| {
                let mut vals = base.clone();
                vals[i] = Tensor::new(t.shape(), x.to_vec())?;
                let (tp, l, _) = eval(&vals, &weights)?;
                Ok(tp.value(l).data()[0])
            },
            t.data(),
            FD_STEP,
        )?;
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n));
        }
        checked += t.numel();
    }
    Ok(CheckResult {
        name: name.into(),
        max_rel_err: worst,
        checked,
    })
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Values with magnitude at least `gap`, for ops with a kink at 0.
fn rand_away(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let mut t = rand_t(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (gap + v.abs()));
    t
}

/// Finite-difference check of every differentiable tape op.
pub fn op_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<(Tensor<f64>, bool)>, build: &Build<'_>, s: u64| -> Result<()> {
        out.push(check_op(name, &inputs, build, s)?);
        Ok(())
    };
    let r = &mut rng;
    run(
        "matmul",
        vec![(rand_t(r, &[4, 5]), true), (rand_t(r, &[5, 3]), true)],
        &|t, v| t.matmul(v[0], v[1]),
        1,
    )?;
    run(
        "linear",
        vec![(rand_t(r, &[3, 4]), true), (rand_t(r, &[5, 4]), true)],
        &|t, v| t.linear(v[0], v[1]),
        2,
    )?;
    run(
        "conv2d",
        vec![(rand_t(r, &[2, 2, 4, 4]), true), (rand_t(r, &[3, 2, 3, 3]), true)],
        &|t, v| t.conv2d(v[0], v[1], 1, 1, 1),
        3,
    )?;
    run(
        "conv2d_grouped_strided",
        vec![(rand_t(r, &[1, 4, 5, 5]), true), (rand_t(r, &[4, 2, 3, 3]), true)],
        &|t, v| t.conv2d(v[0], v[1], 2, 2, 1),
        4,
    )?;
    run(
        "conv2d_depthwise",
        vec![(rand_t(r, &[2, 3, 4, 4]), true), (rand_t(r, &[3, 1, 3, 3]), true)],
        &|t, v| t.conv2d(v[0], v[1], 3, 1, 1),
        5,
    )?;
    run(
        "batch_norm",
        vec![
            (rand_t(r, &[3, 2, 2, 2]), true),
            (rand_t(r, &[2]), true),
            (rand_t(r, &[2]), true),
        ],
        &|t, v| t.batch_norm(v[0], &mut BnState::new(2), Some((v[1], v[2])), BnMode::TrainGraph),
        6,
    )?;
    run(
        "batch_norm_plain",
        vec![(rand_t(r, &[4, 3]), true)],
        &|t, v| t.batch_norm(v[0], &mut BnState::new(3), None, BnMode::TrainGraph),
        7,
    )?;
    let (gain, offset) = (vec![0.5, -1.5, 2.0], vec![0.1, 0.2, -0.3]);
    run(
        "channel_affine",
        vec![(rand_t(r, &[2, 3, 2, 2]), true)],
        &|t, v| t.channel_affine(v[0], &gain, &offset),
        8,
    )?;
    run(
        "add_bias",
        vec![(rand_t(r, &[2, 3, 2, 2]), true), (rand_t(r, &[3]), true)],
        &|t, v| t.add_bias(v[0], v[1]),
        9,
    )?;
    run(
        "relu",
        vec![(rand_away(r, &[3, 4], 0.05), true)],
        &|t, v| Ok(t.relu(v[0])),
        10,
    )?;
    run(
        "global_avg_pool",
        vec![(rand_t(r, &[2, 3, 2, 3]), true)],
        &|t, v| t.global_avg_pool(v[0]),
        11,
    )?;
    run(
        "log_softmax",
        vec![(rand_t(r, &[3, 4]), true)],
        &|t, v| t.log_softmax(v[0]),
        12,
    )?;
    run(
        "add",
        vec![(rand_t(r, &[2, 3]), true), (rand_t(r, &[2, 3]), true)],
        &|t, v| t.add(v[0], v[1]),
        13,
    )?;
    run(
        "sub",
        vec![(rand_t(r, &[2, 3]), true), (rand_t(r, &[2, 3]), true)],
        &|t, v| t.sub(v[0], v[1]),
        14,
    )?;
    run(
        "scale",
        vec![(rand_t(r, &[2, 3]), true)],
        &|t, v| Ok(t.scale(v[0], -1.7)),
        15,
    )?;
    run(
        "add_scalar",
        vec![(rand_t(r, &[2, 3]), true)],
        &|t, v| Ok(t.add_scalar(v[0], 0.4)),
        16,
    )?;
    run(
        "spike_relaxed",
        vec![(rand_t(r, &[2, 5]), true)],
        &|t, v| Ok(t.spike(v[0], 4.0, true)),
        17,
    )?;
    run(
        "clamp_min",
        vec![(rand_away(r, &[3, 3], 0.05), true)],
        &|t, v| Ok(t.clamp_min(v[0], 0.0)),
        18,
    )?;
    let w: Vec<f64> = (0..6).map(|i| f64::from(i) * 0.3 - 0.7).collect();
    run(
        "weighted_sum",
        vec![(rand_t(r, &[2, 3]), true)],
        &|t, v| t.weighted_sum(v[0], &w),
        19,
    )?;
    run("sum", vec![(rand_t(r, &[2, 3]), true)], &|t, v| Ok(t.sum(v[0])), 20)?;
    run(
        "reshape",
        vec![(rand_t(r, &[2, 6]), true)],
        &|t, v| t.reshape(v[0], &[3, 2, 2]),
        21,
    )?;
    run(
        "mlp_composite",
        vec![
            (rand_t(r, &[4, 3]), false),
            (rand_t(r, &[5, 3]), true),
            (rand_t(r, &[5]), true),
            (rand_t(r, &[5]), true),
            (rand_t(r, &[2, 5]), true),
        ],
        &|t, v| {
            let h = t.linear(v[0], v[1])?;
            let h = t.batch_norm(h, &mut BnState::new(5), Some((v[2], v[3])), BnMode::TrainGraph)?;
            let h = t.relu(h);
            let z = t.linear(h, v[4])?;
            t.log_softmax(z)
        },
        22,
    )?;
    out.push(check_branch(seed ^ 7)?);
    Ok(out)
}

/// Branch gradients for its input and every parameter, in train-graph mode.
fn check_branch(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let branch = build_branch::<f64, _>(2, 3, 3, 1, &mut rng)?;
    let x = rand_t(&mut rng, &[3, 2, 3, 3]);
    let weights: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let eval =
        |b: &crate::distill::Branch<f64>, x: &Tensor<f64>, diff: bool| -> Result<(Tape<f64>, Var, Var, Vec<Var>)> {
            let mut b = b.clone();
            let mut tape = Tape::new();
            let mut xt = x.clone();
            xt.requires_grad = diff;
            let xv = tape.leaf(xt);
            let out = b.forward(&mut tape, xv, BnMode::TrainGraph)?;
            let loss = tape.weighted_sum(out.logits, &weights)?;
            Ok((tape, loss, xv, out.params))
        };
    let (mut tape, loss, xv, params) = eval(&branch, &x, true)?;
    tape.backward(loss, false)?;
    let mut analytic: Vec<f64> = tape.grad(xv).map(<[f64]>::to_vec).unwrap_or_default();
    for p in &params {
        analytic.extend_from_slice(tape.grad(*p).unwrap_or(&[]));
    }
    let mut x0 = x.data().to_vec();
    for p in branch.params() {
        x0.extend_from_slice(p.data());
    }
    let numeric = numeric_grad(
        |v| {
            let xs = Tensor::new(x.shape(), v[..x.numel()].to_vec())?;
            let mut b = branch.clone();
            let mut off = x.numel();
            for p in b.params_mut() {
                let k = p.numel();
                p.data_mut().copy_from_slice(&v[off..off + k]);
                off += k;
            }
            let (tp, l, _, _) = eval(&b, &xs, false)?;
            Ok(tp.value(l).data()[0])
        },
        &x0,
        FD_STEP,
    )?;
    let worst = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max);
    Ok(CheckResult {
        name: "branch".into(),
        max_rel_err: worst,
        checked: x0.len(),
    })
}

fn set_flat(net: &mut SpikingNetwork<f64>, flat: &[f64]) {
    let mut off = 0;
    for p in net.params_mut() {
        let k = p.numel();
        p.data_mut().copy_from_slice(&flat[off..off + k]);
        off += k;
    }
}

fn flat(net: &SpikingNetwork<f64>) -> Vec<f64> {
    net.params().iter().flat_map(|p| p.data().iter().copied()).collect()
}

/// Cross-entropy of the readout plus a fixed linear term on every layer's
/// rates, so that all layers receive gradient from more than one path.
fn probe_loss(labels: Vec<usize>, seed: u64) -> impl Fn(&mut Tape<f64>, &[Var], Var) -> Result<Var> {
    move |tape, rates, logits| {
        let n = labels.len();
        let c = tape.value(logits).dim(1);
        let mut coef = vec![0.0; n * c];
        for (i, &y) in labels.iter().enumerate() {
            coef[i * c + y] = -1.0 / n as f64;
        }
        let lp = tape.log_softmax(logits)?;
        let mut loss = tape.weighted_sum(lp, &coef)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &r in rates {
            let w: Vec<f64> = (0..tape.value(r).numel())
                .map(|_| rng.random_range(-0.5..0.5))
                .collect();
            let term = tape.weighted_sum(r, &w)?;
            loss = tape.add(loss, term)?;
        }
        Ok(loss)
    }
}

struct Probe {
    name: &'static str,
    input: Vec<usize>,
    specs: Vec<LayerSpec>,
    t: usize,
    bn: bool,
    /// Multiplier on the random input, to land potentials near threshold.
    gain: f64,
}

fn probes() -> Result<Vec<Probe>> {
    Ok(vec![
        Probe {
            name: "bptt_single_neuron_T3",
            input: vec![1],
            specs: mlp_specs(1, &[1]),
            t: 3,
            bn: false,
            gain: 1.5,
        },
        Probe {
            name: "bptt_mlp_T3",
            input: vec![3],
            specs: mlp_specs(3, &[4, 3]),
            t: 3,
            bn: true,
            gain: 1.0,
        },
        Probe {
            name: "bptt_conv_T2",
            input: vec![1, 4, 4],
            specs: {
                let mut s = conv_specs([1, 4, 4], &[2], 3, 2, 1)?;
                s.push(LayerSpec::Dense { d_in: 8, d_out: 3 });
                s
            },
            t: 2,
            bn: true,
            gain: 1.0,
        },
    ])
}

fn probe_net(p: &Probe, lif: LifConfig<f64>, seed: u64) -> Result<(SpikingNetwork<f64>, EncodedBatch<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = SpikingNetwork::new(&p.input, &p.specs, 2, lif, p.bn, &[], &mut rng)?;
    let mut shape = vec![3];
    shape.extend(&p.input);
    let mut x = rand_t(&mut rng, &shape);
    x.data_mut().iter_mut().for_each(|v| *v *= p.gain);
    let batch = EncodedBatch::direct(&x, vec![0, 1, 1], p.t)?;
    Ok((net, batch))
}

/// Finite differences against the unrolled graph with sigmoid spikes. The
/// reset path is kept so the check covers it too.
pub fn bptt_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let lif = LifConfig::new(0.5, 1.0, 4.0, false)?;
    let mut out = Vec::new();
    for (k, p) in probes()?.into_iter().enumerate() {
        let (net, batch) = probe_net(&p, lif, seed + k as u64)?;
        let loss = probe_loss(batch.labels.clone(), seed);
        let analytic = bptt_reference(&mut net.clone(), &batch, &loss, true)?.flatten();
        let x0 = flat(&net);
        let numeric = numeric_grad(
            |x| {
                let mut m = net.clone();
                set_flat(&mut m, x);
                let mut tape = Tape::new();
                let g = bptt_forward(&mut tape, &mut m, &batch, true, StatsMode::Accumulate)?;
                let l = loss(&mut tape, &g.layer_rates, g.logits)?;
                Ok(tape.value(l).data()[0])
            },
            &x0,
            FD_STEP,
        )?;
        let worst = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| rel_err(*a, *n))
            .fold(0.0, f64::max);
        out.push(CheckResult {
            name: p.name.into(),
            max_rel_err: worst,
            checked: x0.len(),
        });
    }
    Ok(out)
}

/// Max absolute difference between rate-route and BPTT gradients of a loss
/// on the rates, for a two-layer spiking MLP at T=1.
pub fn rate_vs_bptt_t1(seed: u64, hidden: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = mlp_specs(6, &[hidden, hidden]);
    let net = SpikingNetwork::new(&[6], &specs, 3, LifConfig::default(), true, &[], &mut rng)?;
    let x = rand_t(&mut rng, &[5, 6]);
    let scaled = Tensor::new(x.shape(), x.data().iter().map(|v| 2.0 * v).collect())?;
    let batch = EncodedBatch::direct(&scaled, vec![0, 1, 2, 1, 0], 1)?;
    let loss = probe_loss(batch.labels.clone(), seed);
    let loss: &LossFn<'_, f64> = &loss;
    let rate = rate_reference_grads(&mut net.clone(), &batch, loss)?;
    let bptt = bptt_reference(&mut net.clone(), &batch, loss, false)?;
    Ok(rate.max_abs_diff(&bptt))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_grad_of_a_quadratic() {
        let g = numeric_grad(|x| Ok(x[0] * x[0] + 3.0 * x[1]), &[2.0, -1.0], FD_STEP).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1e-9, 0.0), 1e-6);
        assert_eq!(rel_err(2.0, 1.0), 0.5);
    }
}
