use rand::Rng;

use super::config::{ModelKind, TrainConfig};
use crate::autodiff::Tensor;
use crate::distill::{build_branch, Branch};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::snn::{conv_specs, mlp_specs, LifConfig, SpikingNetwork};

/// Spiking backbone plus one auxiliary branch per branch point.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    pub net: SpikingNetwork<S>,
    /// `branches[i]` reads the rates of layer `net.branch_points[i]`.
    pub branches: Vec<Branch<S>>,
}

impl<S: Scalar> Model<S> {
    pub fn build<R: Rng>(cfg: &TrainConfig, input_shape: &[usize], num_classes: usize, rng: &mut R) -> Result<Self> {
        let input_len: usize = input_shape.iter().product();
        let specs = match cfg.model {
            ModelKind::Mlp => mlp_specs(input_len, &cfg.hidden),
            ModelKind::Conv => {
                let &[c, h, w] = input_shape else {
                    return Err(Error::Config(format!(
                        "conv model needs [C,H,W] inputs, got {input_shape:?}"
                    )));
                };
                conv_specs([c, h, w], &cfg.channels, cfg.kernel, cfg.stride, cfg.pad)?
            }
        };
        let lif = LifConfig::new(
            S::lit(cfg.lambda),
            S::lit(cfg.v_th),
            S::lit(cfg.alpha),
            cfg.detach_reset,
        )?;
        let points = cfg.effective_branch_points();
        let net = SpikingNetwork::new(input_shape, &specs, num_classes, lif, cfg.spike_bn, &points, rng)?;
        Self::with_branches(net, cfg.branch_channels, cfg.branch_depth, rng)
    }

    /// Attaches fresh branches at the network's branch points. A zero
    /// `width` keeps each attachment layer's channel count.
    pub fn with_branches<R: Rng>(net: SpikingNetwork<S>, width: usize, depth: usize, rng: &mut R) -> Result<Self> {
        let branches = net
            .branch_points
            .iter()
            .map(|&p| {
                let c = net.layers[p].spec.out_channels();
                build_branch(c, if width == 0 { c } else { width }, net.num_classes, depth, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Model { net, branches })
    }

    /// Auxiliary heads plus the final readout.
    pub fn heads(&self) -> usize {
        self.branches.len() + 1
    }

    /// Backbone parameters, then each branch's.
    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut out = self.net.params();
        for b in &self.branches {
            out.extend(b.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = self.net.params_mut();
        for b in &mut self.branches {
            out.extend(b.params_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// The inference network: branches dropped.
    pub fn without_branches(&self) -> Self {
        let mut net = self.net.clone();
        net.branch_points.clear();
        Model {
            net,
            branches: Vec::new(),
        }
    }
}
