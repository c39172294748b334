//! Time-unrolled backpropagation through the spiking dynamics. Every step of
//! every layer is recorded on the tape, so graph size grows linearly with T.
//! Used as the reference the rate route is checked against, and as the
//! `bptt` training mode.

use super::forward::StatsMode;
use super::network::{NetworkGrads, SpikingNetwork};
use super::rate::{fit_shape, readout_logits, LossFn};
use crate::autodiff::{Tape, Var};
use crate::data::EncodedBatch;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct BpttGraph<S> {
    /// `(1/T)·Σ_t S^t` per layer.
    pub layer_rates: Vec<Var>,
    pub logits: Var,
    pub params: Vec<(Var, Var)>,
    pub readout: (Var, Var),
    /// Mean spike frequency per layer and step.
    pub firing: Vec<Vec<S>>,
}

/// Records the unrolled spiking forward pass.
///
/// With `relaxed`, spikes are the sigmoid surrogate itself rather than the
/// Heaviside step, which makes the recorded function smooth and its tape
/// gradient exact (the finite-difference oracle relies on this).
pub fn bptt_forward<S: Scalar>(
    tape: &mut Tape<S>,
    net: &mut SpikingNetwork<S>,
    batch: &EncodedBatch<S>,
    relaxed: bool,
    stats: StatsMode,
) -> Result<BpttGraph<S>> {
    let t_steps = batch.timesteps();
    if t_steps == 0 {
        return Err(Error::Contract("BPTT needs T >= 1".into()));
    }
    let n = batch.batch_size();
    let norms: Vec<(Vec<S>, Vec<S>)> = net.layers.iter().map(|l| l.normalization()).collect();
    let params: Vec<(Var, Var)> = net
        .layers
        .iter()
        .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
        .collect();
    let layers = net.layers.len();
    let mut v: Vec<Option<Var>> = vec![None; layers];
    let mut s: Vec<Option<Var>> = vec![None; layers];
    let mut acc: Vec<Option<Var>> = vec![None; layers];
    let mut firing = vec![Vec::with_capacity(t_steps); layers];

    for step in &batch.steps {
        let mut x = tape.constant(step.reshaped(&net.layers[0].spec.in_shape(n))?);
        for l in 0..layers {
            let layer = &mut net.layers[l];
            let xin = fit_shape(tape, x, &layer.spec.in_shape(n))?;
            let (w, b) = params[l];
            let z = match layer.spec.geom(n) {
                Some(g) => tape.conv2d(xin, w, g.groups, g.stride, g.pad)?,
                None => tape.linear(xin, w)?,
            };
            if let (Some(bn), StatsMode::Accumulate) = (layer.bn.as_mut(), stats) {
                bn.accumulate(tape.value(z).data(), n, layer.spec.out_positions())?;
            }
            let (gain, offset) = &norms[l];
            let z = if layer.bn.is_some() {
                tape.channel_affine(z, gain, offset)?
            } else {
                z
            };
            let u = tape.add_bias(z, b)?;
            let lif = layer.lif;
            let vn = match (v[l], s[l]) {
                (Some(vp), Some(sp)) => {
                    let sp = if lif.detach_reset { tape.detach(sp) } else { sp };
                    let reset = tape.scale(sp, lif.v_th);
                    let leak = tape.sub(vp, reset)?;
                    let leak = tape.scale(leak, lif.lambda);
                    tape.add(leak, u)?
                }
                _ => u,
            };
            let centered = tape.add_scalar(vn, -lif.v_th);
            let sn = tape.spike(centered, lif.alpha, relaxed);
            let vals = tape.value(sn).data();
            firing[l].push(vals.iter().copied().sum::<S>() / S::lit(vals.len().max(1) as f64));
            acc[l] = Some(match acc[l] {
                Some(a) => tape.add(a, sn)?,
                None => sn,
            });
            v[l] = Some(vn);
            s[l] = Some(sn);
            x = sn;
        }
    }
    let inv_t = S::one() / S::lit(t_steps as f64);
    let layer_rates: Vec<Var> = acc.into_iter().map(|a| tape.scale(a.expect("T >= 1"), inv_t)).collect();
    let last = *layer_rates.last().expect("at least one layer");
    let (logits, readout) = readout_logits(tape, net, last, n)?;
    Ok(BpttGraph {
        layer_rates,
        logits,
        params,
        readout,
        firing,
    })
}

/// Exact gradients of `loss` through the unrolled (surrogate) dynamics.
pub fn bptt_reference<S: Scalar>(
    net: &mut SpikingNetwork<S>,
    batch: &EncodedBatch<S>,
    loss: &LossFn<'_, S>,
    relaxed: bool,
) -> Result<NetworkGrads<S>> {
    let mut tape = Tape::new();
    let g = bptt_forward(&mut tape, net, batch, relaxed, StatsMode::Accumulate)?;
    let l = loss(&mut tape, &g.layer_rates, g.logits)?;
    tape.backward(l, false)?;
    let grab = |v: Var| {
        tape.grad(v)
            .map(<[S]>::to_vec)
            .unwrap_or_else(|| vec![S::zero(); tape.value(v).numel()])
    };
    Ok(NetworkGrads {
        layers: g.params.iter().map(|&(w, b)| (grab(w), grab(b))).collect(),
        readout: (grab(g.readout.0), grab(g.readout.1)),
    })
}
