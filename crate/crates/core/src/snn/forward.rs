use super::lif_update;
use super::network::SpikingNetwork;
use super::trace::{EligibilityTrace, TraceLayout};
use crate::autodiff::{bn::apply_channel_affine, Tensor};
use crate::data::EncodedBatch;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// What happens to batch-norm running statistics during a spiking pass.
/// Normalization always uses the statistics as they were when the pass began.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsMode {
    /// Update running stats with each step's batch statistics.
    Accumulate,
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub traces: bool,
    pub stats: StatsMode,
    pub record_trains: bool,
}

impl ForwardOptions {
    pub fn training() -> Self {
        ForwardOptions {
            traces: true,
            stats: StatsMode::Accumulate,
            record_trains: false,
        }
    }

    pub fn inference() -> Self {
        ForwardOptions {
            traces: false,
            stats: StatsMode::Frozen,
            record_trains: false,
        }
    }

    pub fn recording(mut self) -> Self {
        self.record_trains = true;
        self
    }
}

/// Spikes of one layer at every step.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTrain<S> {
    pub steps: Vec<Tensor<S>>,
}

/// Elementwise mean of a spike train over time.
pub fn compute_rate<S: Scalar>(train: &SpikeTrain<S>) -> Result<Tensor<S>> {
    let first = train
        .steps
        .first()
        .ok_or_else(|| Error::Contract("rate of an empty spike train".into()))?;
    let mut acc = vec![S::zero(); first.numel()];
    for s in &train.steps {
        if s.shape() != first.shape() {
            return Err(Error::Shape("spike train steps differ in shape".into()));
        }
        acc.iter_mut().zip(s.data()).for_each(|(a, &v)| *a = *a + v);
    }
    let inv = S::one() / S::lit(train.steps.len() as f64);
    acc.iter_mut().for_each(|v| *v = *v * inv);
    Tensor::new(first.shape(), acc)
}

/// Result of a graph-free spiking pass.
#[derive(Clone, Debug)]
pub struct SpikingPass<S> {
    pub timesteps: usize,
    /// Firing rate of every neuron, shaped like the layer output `[N, ...]`.
    pub rates: Vec<Tensor<S>>,
    /// Finalized traces per layer; empty unless requested.
    pub traces: Vec<EligibilityTrace<S>>,
    /// Mean spike frequency per layer and step, `[layer][t]`.
    pub firing: Vec<Vec<S>>,
    /// Full spike trains per layer; empty unless requested.
    pub trains: Vec<SpikeTrain<S>>,
}

/// Runs the network over all steps of `batch` without recording a graph.
pub fn spiking_forward<S: Scalar>(
    net: &mut SpikingNetwork<S>,
    batch: &EncodedBatch<S>,
    opts: ForwardOptions,
) -> Result<SpikingPass<S>> {
    let t_steps = batch.timesteps();
    if t_steps == 0 {
        return Err(Error::Contract("spiking forward needs T >= 1".into()));
    }
    let n = batch.batch_size();
    let in_len = net.input_len();
    for s in &batch.steps {
        if s.numel() != n * in_len {
            return Err(Error::Shape(format!(
                "input step has {} values, expected {n}x{in_len}",
                s.numel()
            )));
        }
    }
    let norms: Vec<(Vec<S>, Vec<S>)> = net.layers.iter().map(|l| l.normalization()).collect();
    let sizes: Vec<usize> = net.layers.iter().map(|l| n * l.spec.out_len()).collect();
    let mut v: Vec<Vec<S>> = sizes.iter().map(|&k| vec![S::zero(); k]).collect();
    let mut s: Vec<Vec<S>> = v.clone();
    let mut counts: Vec<Vec<S>> = v.clone();
    let mut psi: Vec<Vec<S>> = v.clone();
    let mut traces: Vec<EligibilityTrace<S>> = if opts.traces {
        net.layers
            .iter()
            .zip(&norms)
            .map(|(l, (g, _))| EligibilityTrace::new(TraceLayout::for_layer(&l.spec, n), g.clone()))
            .collect()
    } else {
        Vec::new()
    };
    let mut firing = vec![Vec::with_capacity(t_steps); net.layers.len()];
    let mut trains: Vec<SpikeTrain<S>> = if opts.record_trains {
        vec![
            SpikeTrain {
                steps: Vec::with_capacity(t_steps)
            };
            net.layers.len()
        ]
    } else {
        Vec::new()
    };

    for step in &batch.steps {
        let mut x: Vec<S> = step.data().to_vec();
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let positions = layer.spec.out_positions();
            let mut cur = layer.spec.current(&x, layer.weight.data(), n);
            if let (Some(bn), StatsMode::Accumulate) = (layer.bn.as_mut(), opts.stats) {
                bn.accumulate(&cur, n, positions)?;
            }
            let (gain, offset) = &norms[l];
            apply_channel_affine(&mut cur, gain, offset, positions);
            let bias = layer.bias.data();
            for (i, chunk) in cur.chunks_mut(positions).enumerate() {
                let b = bias[i % bias.len()];
                chunk.iter_mut().for_each(|c| *c = *c + b);
            }
            let want_psi = opts.traces.then_some(psi[l].as_mut_slice());
            lif_update(&mut v[l], &mut s[l], &cur, &layer.lif, want_psi);
            if opts.traces {
                traces[l].step(&x, &psi[l], layer.lif.lambda)?;
            }
            counts[l].iter_mut().zip(&s[l]).for_each(|(c, &sv)| *c = *c + sv);
            let total: S = s[l].iter().copied().sum();
            firing[l].push(total / S::lit(s[l].len().max(1) as f64));
            if opts.record_trains {
                trains[l]
                    .steps
                    .push(Tensor::new(&layer.spec.out_shape(n), s[l].clone())?);
            }
            x.clone_from(&s[l]);
        }
    }

    for tr in &mut traces {
        tr.finalize()?;
    }
    let inv_t = S::one() / S::lit(t_steps as f64);
    let rates = net
        .layers
        .iter()
        .zip(counts)
        .map(|(l, c)| Tensor::new(&l.spec.out_shape(n), c.into_iter().map(|v| v * inv_t).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SpikingPass {
        timesteps: t_steps,
        rates,
        traces,
        firing,
        trains,
    })
}
