use super::forward::{spiking_forward, ForwardOptions, SpikingPass};
use super::network::{NetworkGrads, SpikingNetwork};
use super::trace::approx_grad;
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::EncodedBatch;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handles into a rate graph built by [`rate_backbone`].
#[derive(Clone, Debug)]
pub struct RateGraph {
    pub input: Var,
    /// Rate map of every spiking layer; `∂L/∂r` is read from these after backward.
    pub layer_rates: Vec<Var>,
    pub logits: Var,
    pub readout: (Var, Var),
}

pub(crate) fn fit_shape<S: Scalar>(tape: &mut Tape<S>, x: Var, shape: &[usize]) -> Result<Var> {
    if tape.value(x).shape() == shape {
        Ok(x)
    } else {
        tape.reshape(x, shape)
    }
}

/// Linear readout on the last layer's rate map.
pub(crate) fn readout_logits<S: Scalar>(
    tape: &mut Tape<S>,
    net: &SpikingNetwork<S>,
    last: Var,
    n: usize,
) -> Result<(Var, (Var, Var))> {
    let flat = fit_shape(tape, last, &[n, net.features()])?;
    let w = tape.leaf(net.readout.weight.clone());
    let b = tape.leaf(net.readout.bias.clone());
    let z = tape.linear(flat, w)?;
    let logits = tape.add_bias(z, b)?;
    Ok((logits, (w, b)))
}

/// Single-step differentiable graph over the firing rates of a finished
/// spiking pass. Each spiking layer contributes exactly one node, so the
/// graph does not depend on the number of timesteps.
pub fn rate_backbone<S: Scalar>(
    tape: &mut Tape<S>,
    net: &SpikingNetwork<S>,
    input: &Tensor<S>,
    pass: &SpikingPass<S>,
) -> Result<RateGraph> {
    if pass.traces.len() != net.layers.len() {
        return Err(Error::State(format!(
            "rate forward needs traces for {} layers, pass holds {}",
            net.layers.len(),
            pass.traces.len()
        )));
    }
    let n = input.shape().first().copied().unwrap_or(0);
    let x0 = tape.constant(input.reshaped(&net.layers[0].spec.in_shape(n))?);
    let mut x = x0;
    let mut layer_rates = Vec::with_capacity(net.layers.len());
    for (l, layer) in net.layers.iter().enumerate() {
        let xin = fit_shape(tape, x, &layer.spec.in_shape(n))?;
        let sens = pass.traces[l].current_sensitivity()?;
        let r = tape.spiking_rate(
            xin,
            pass.rates[l].clone(),
            layer.spec.kernel(n),
            layer.weight.data(),
            sens,
        )?;
        layer_rates.push(r);
        x = r;
    }
    let (logits, readout) = readout_logits(tape, net, x, n)?;
    Ok(RateGraph {
        input: x0,
        layer_rates,
        logits,
        readout,
    })
}

/// Loss hook shared by the two gradient routes: receives the per-layer rate
/// handles and the readout logits and returns a scalar loss.
pub type LossFn<'a, S> = dyn Fn(&mut Tape<S>, &[Var], Var) -> Result<Var> + 'a;

/// Parameter gradients of `loss` via the spiking pass, the rate graph and the
/// eligibility traces. Running statistics of `net` are updated as in training.
pub fn rate_reference_grads<S: Scalar>(
    net: &mut SpikingNetwork<S>,
    batch: &EncodedBatch<S>,
    loss: &LossFn<'_, S>,
) -> Result<NetworkGrads<S>> {
    let pass = spiking_forward(net, batch, ForwardOptions::training())?;
    let mut tape = Tape::new();
    let input = batch.steps[0].clone();
    let g = rate_backbone(&mut tape, net, &input, &pass)?;
    let l = loss(&mut tape, &g.layer_rates, g.logits)?;
    tape.backward(l, false)?;
    let mut layers = Vec::with_capacity(net.layers.len());
    for (l, &rv) in g.layer_rates.iter().enumerate() {
        let zeros;
        let dl_dr = match tape.grad(rv) {
            Some(gr) => gr,
            None => {
                zeros = vec![S::zero(); tape.value(rv).numel()];
                &zeros
            }
        };
        layers.push(approx_grad(dl_dr, &pass.traces[l])?);
    }
    let grab = |v: Var| {
        tape.grad(v)
            .map(<[S]>::to_vec)
            .unwrap_or_else(|| vec![S::zero(); tape.value(v).numel()])
    };
    let readout = (grab(g.readout.0), grab(g.readout.1));
    Ok(NetworkGrads { layers, readout })
}
