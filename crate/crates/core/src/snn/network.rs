use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LifConfig;
use crate::autodiff::{kernels, BnState, ConvGeom, RateKernel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Synaptic connectivity of one spiking layer (per-sample shapes).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense {
        d_in: usize,
        d_out: usize,
    },
    Conv {
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
}

impl LayerSpec {
    pub fn geom(&self, n: usize) -> Option<ConvGeom> {
        match *self {
            LayerSpec::Dense { .. } => None,
            LayerSpec::Conv {
                c_in,
                h,
                w,
                c_out,
                k,
                stride,
                pad,
            } => ConvGeom::new(n, c_in, h, w, c_out, k, stride, pad, 1).ok(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Dense { d_in, d_out } if d_in == 0 || d_out == 0 => {
                Err(Error::Config("dense layer with zero width".into()))
            }
            LayerSpec::Dense { .. } => Ok(()),
            LayerSpec::Conv {
                c_in,
                h,
                w,
                c_out,
                k,
                stride,
                pad,
            } => ConvGeom::new(1, c_in, h, w, c_out, k, stride, pad, 1).map(|_| ()),
        }
    }

    pub fn in_len(&self) -> usize {
        match *self {
            LayerSpec::Dense { d_in, .. } => d_in,
            LayerSpec::Conv { c_in, h, w, .. } => c_in * h * w,
        }
    }

    pub fn out_channels(&self) -> usize {
        match *self {
            LayerSpec::Dense { d_out, .. } => d_out,
            LayerSpec::Conv { c_out, .. } => c_out,
        }
    }

    /// Spatial positions per output channel (1 for dense layers).
    pub fn out_positions(&self) -> usize {
        self.geom(1).map_or(1, |g| g.out_positions())
    }

    pub fn out_len(&self) -> usize {
        self.out_channels() * self.out_positions()
    }

    /// Length of one output unit's weight row.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { d_in, .. } => d_in,
            LayerSpec::Conv { c_in, k, .. } => c_in * k * k,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerSpec::Dense { d_in, d_out } => vec![d_out, d_in],
            LayerSpec::Conv { c_in, c_out, k, .. } => vec![c_out, c_in, k, k],
        }
    }

    pub fn in_shape(&self, n: usize) -> Vec<usize> {
        match *self {
            LayerSpec::Dense { d_in, .. } => vec![n, d_in],
            LayerSpec::Conv { c_in, h, w, .. } => vec![n, c_in, h, w],
        }
    }

    pub fn out_shape(&self, n: usize) -> Vec<usize> {
        match self.geom(n) {
            None => vec![n, self.out_channels()],
            Some(g) => g.out_shape().to_vec(),
        }
    }

    pub fn kernel(&self, n: usize) -> RateKernel {
        match (*self, self.geom(n)) {
            (_, Some(g)) => RateKernel::Conv(g),
            (LayerSpec::Dense { d_in, d_out }, None) => RateKernel::Linear { d_in, d_out },
            _ => unreachable!("conv spec validated on construction"),
        }
    }

    /// Synaptic current `W·x` for a batch of `n` flattened inputs.
    pub fn current<S: Scalar>(&self, x: &[S], w: &[S], n: usize) -> Vec<S> {
        match (*self, self.geom(n)) {
            (_, Some(g)) => kernels::conv2d_forward(x, w, &g),
            (LayerSpec::Dense { d_in, d_out }, None) => kernels::linear_forward(x, w, n, d_in, d_out),
            _ => unreachable!("conv spec validated on construction"),
        }
    }
}

/// Dense MLP stack: `input_dim → hidden[0] → … → hidden[last]`.
pub fn mlp_specs(input_dim: usize, hidden: &[usize]) -> Vec<LayerSpec> {
    let mut d_in = input_dim;
    hidden
        .iter()
        .map(|&d_out| {
            let s = LayerSpec::Dense { d_in, d_out };
            d_in = d_out;
            s
        })
        .collect()
}

/// Convolutional stack on `[c, h, w]` inputs with a shared kernel/stride/pad.
pub fn conv_specs(
    input: [usize; 3],
    channels: &[usize],
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Vec<LayerSpec>> {
    let [mut c, mut h, mut w] = input;
    let mut out = Vec::with_capacity(channels.len());
    for &c_out in channels {
        let spec = LayerSpec::Conv {
            c_in: c,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
        };
        let g = ConvGeom::new(1, c, h, w, c_out, k, stride, pad, 1)?;
        out.push(spec);
        (c, h, w) = (c_out, g.h_out, g.w_out);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpikingLayer<S> {
    pub spec: LayerSpec,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub bn: Option<BnState<S>>,
    pub lif: LifConfig<S>,
}

impl<S: Scalar> SpikingLayer<S> {
    /// Per-channel `(gain, offset)` applied to `W·x` before the bias: running
    /// batch-norm statistics when present, identity otherwise.
    pub fn normalization(&self) -> (Vec<S>, Vec<S>) {
        match &self.bn {
            Some(bn) => bn.eval_affine(),
            None => {
                let c = self.spec.out_channels();
                (vec![S::one(); c], vec![S::zero(); c])
            }
        }
    }
}

/// Non-spiking linear classifier on the last layer's firing rates. Applied to
/// rates it equals the time average of a per-step linear readout.
#[derive(Clone, Debug, PartialEq)]
pub struct Readout<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpikingNetwork<S> {
    /// Per-sample input shape, e.g. `[3, 32, 32]` or `[784]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<SpikingLayer<S>>,
    pub readout: Readout<S>,
    /// Layer indices whose rate maps feed auxiliary branches.
    pub branch_points: Vec<usize>,
    pub num_classes: usize,
}

fn uniform<S: Scalar, R: Rng>(rng: &mut R, n: usize, bound: f64) -> Vec<S> {
    (0..n).map(|_| S::lit(rng.random_range(-bound..bound))).collect()
}

impl<S: Scalar> SpikingNetwork<S> {
    pub fn new<R: Rng>(
        input_shape: &[usize],
        specs: &[LayerSpec],
        num_classes: usize,
        lif: LifConfig<S>,
        batch_norm: bool,
        branch_points: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("network needs at least one spiking layer".into()));
        }
        if num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        lif.validate()?;
        let mut prev = input_shape.iter().product::<usize>();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            spec.validate()?;
            if spec.in_len() != prev {
                return Err(Error::Shape(format!(
                    "layer {i} expects {} inputs per sample, previous stage provides {prev}",
                    spec.in_len()
                )));
            }
            let fan = spec.fan_in();
            let bound = (6.0 / fan as f64).sqrt();
            let wshape = spec.weight_shape();
            let numel = wshape.iter().product();
            layers.push(SpikingLayer {
                spec: *spec,
                weight: Tensor::param(&wshape, uniform(rng, numel, bound))?,
                bias: Tensor::param(&[spec.out_channels()], vec![S::zero(); spec.out_channels()])?,
                bn: batch_norm.then(|| BnState::new(spec.out_channels())),
                lif,
            });
            prev = spec.out_len();
        }
        let bound = 1.0 / (prev as f64).sqrt();
        let readout = Readout {
            weight: Tensor::param(&[num_classes, prev], uniform(rng, num_classes * prev, bound))?,
            bias: Tensor::param(&[num_classes], vec![S::zero(); num_classes])?,
        };
        let net = SpikingNetwork {
            input_shape: input_shape.to_vec(),
            layers,
            readout,
            branch_points: branch_points.to_vec(),
            num_classes,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.branch_points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("branch points must be strictly increasing".into()));
        }
        if let Some(&last) = self.branch_points.last() {
            if last >= self.layers.len() {
                return Err(Error::Config(format!(
                    "branch point {last} out of range for {} layers",
                    self.layers.len()
                )));
            }
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn features(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec.out_len())
    }

    /// Every trainable tensor in a fixed order: per layer `(weight, bias)`,
    /// then the readout.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.readout.weight);
        out.push(&mut self.readout.bias);
        out
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.readout.weight);
        out.push(&self.readout.bias);
        out
    }

    pub fn set_lif(&mut self, lif: LifConfig<S>) {
        self.layers.iter_mut().for_each(|l| l.lif = lif);
    }
}

/// Gradients for every spiking layer `(weight, bias)` and the readout.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGrads<S> {
    pub layers: Vec<(Vec<S>, Vec<S>)>,
    pub readout: (Vec<S>, Vec<S>),
}

impl<S: Scalar> NetworkGrads<S> {
    pub fn flatten(&self) -> Vec<S> {
        let mut v = Vec::new();
        for (w, b) in &self.layers {
            v.extend_from_slice(w);
            v.extend_from_slice(b);
        }
        v.extend_from_slice(&self.readout.0);
        v.extend_from_slice(&self.readout.1);
        v
    }

    /// Flattened spiking-layer gradients only (readout excluded).
    pub fn spiking_flat(&self) -> Vec<S> {
        let mut v = Vec::new();
        for (w, b) in &self.layers {
            v.extend_from_slice(w);
            v.extend_from_slice(b);
        }
        v
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(&a, b)| (a - b).abs())
            .fold(S::zero(), S::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_specs_chain_shapes() {
        let specs = conv_specs([3, 32, 32], &[16, 32, 32], 3, 2, 1).unwrap();
        assert_eq!(specs[0].out_shape(2), vec![2, 16, 16, 16]);
        assert_eq!(specs[2].out_len(), 32 * 4 * 4);
        assert_eq!(specs[1].in_len(), specs[0].out_len());
    }

    #[test]
    fn network_rejects_bad_branch_points_and_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let specs = mlp_specs(4, &[8, 8, 8]);
        let lif = LifConfig::<f64>::default();
        assert!(SpikingNetwork::new(&[4], &specs, 3, lif, false, &[1, 1], &mut rng).is_err());
        assert!(SpikingNetwork::new(&[4], &specs, 3, lif, false, &[3], &mut rng).is_err());
        assert!(SpikingNetwork::new(&[4], &specs, 3, lif, false, &[0, 2], &mut rng).is_ok());
        assert!(SpikingNetwork::new(&[5], &specs, 3, lif, false, &[], &mut rng).is_err());
    }

    #[test]
    fn params_order_is_layerwise_then_readout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let specs = mlp_specs(3, &[5, 4]);
        let mut net = SpikingNetwork::<f64>::new(&[3], &specs, 2, LifConfig::default(), true, &[], &mut rng).unwrap();
        let shapes: Vec<Vec<usize>> = net.params_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![5, 3], vec![5], vec![4, 5], vec![4], vec![2, 4], vec![2]]
        );
    }
}
