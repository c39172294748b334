//! Model checkpoints as versioned JSON. Every tensor is stored as its shape
//! and a flat row-major array of `f64`; values round-trip exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BnState, Tensor};
use crate::distill::{Branch, BranchBlock};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::snn::{LayerSpec, LifConfig, Readout, SpikingLayer, SpikingNetwork};
use crate::train::Model;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorDump {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BnDump {
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    momentum: f64,
    eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LayerDump {
    spec: LayerSpec,
    weight: TensorDump,
    bias: TensorDump,
    bn: Option<BnDump>,
    lif: LifConfig<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlockDump {
    depthwise: TensorDump,
    pointwise: TensorDump,
    gamma: TensorDump,
    beta: TensorDump,
    bn: BnDump,
    projection: Option<TensorDump>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BranchDump {
    blocks: Vec<BlockDump>,
    classifier_w: TensorDump,
    classifier_b: TensorDump,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    input_shape: Vec<usize>,
    num_classes: usize,
    branch_points: Vec<usize>,
    layers: Vec<LayerDump>,
    readout_weight: TensorDump,
    readout_bias: TensorDump,
    branches: Vec<BranchDump>,
}

fn dump_t<S: Scalar>(t: &Tensor<S>) -> TensorDump {
    TensorDump {
        shape: t.shape().to_vec(),
        data: t.data().iter().map(|v| v.as_f64()).collect(),
    }
}

fn load_t<S: Scalar>(d: &TensorDump) -> Result<Tensor<S>> {
    Tensor::param(&d.shape, d.data.iter().map(|&v| S::lit(v)).collect())
}

fn dump_bn<S: Scalar>(b: &BnState<S>) -> BnDump {
    BnDump {
        running_mean: b.running_mean.iter().map(|v| v.as_f64()).collect(),
        running_var: b.running_var.iter().map(|v| v.as_f64()).collect(),
        momentum: b.momentum.as_f64(),
        eps: b.eps.as_f64(),
    }
}

fn load_bn<S: Scalar>(d: &BnDump) -> Result<BnState<S>> {
    if d.running_mean.len() != d.running_var.len() {
        return Err(Error::Shape("batch-norm mean and variance lengths differ".into()));
    }
    let mut b = BnState::new(d.running_mean.len());
    b.running_mean = d.running_mean.iter().map(|&v| S::lit(v)).collect();
    b.running_var = d.running_var.iter().map(|&v| S::lit(v)).collect();
    b.momentum = S::lit(d.momentum);
    b.eps = S::lit(d.eps);
    Ok(b)
}

fn lif_to<T: Scalar, S: Scalar>(l: &LifConfig<S>) -> LifConfig<T> {
    LifConfig {
        lambda: T::lit(l.lambda.as_f64()),
        v_th: T::lit(l.v_th.as_f64()),
        alpha: T::lit(l.alpha.as_f64()),
        detach_reset: l.detach_reset,
    }
}

pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    let net = &model.net;
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        input_shape: net.input_shape.clone(),
        num_classes: net.num_classes,
        branch_points: net.branch_points.clone(),
        layers: net
            .layers
            .iter()
            .map(|l| LayerDump {
                spec: l.spec,
                weight: dump_t(&l.weight),
                bias: dump_t(&l.bias),
                bn: l.bn.as_ref().map(dump_bn),
                lif: lif_to(&l.lif),
            })
            .collect(),
        readout_weight: dump_t(&net.readout.weight),
        readout_bias: dump_t(&net.readout.bias),
        branches: model
            .branches
            .iter()
            .map(|b| BranchDump {
                blocks: b
                    .blocks
                    .iter()
                    .map(|k| BlockDump {
                        depthwise: dump_t(&k.depthwise),
                        pointwise: dump_t(&k.pointwise),
                        gamma: dump_t(&k.gamma),
                        beta: dump_t(&k.beta),
                        bn: dump_bn(&k.bn),
                        projection: k.projection.as_ref().map(dump_t),
                    })
                    .collect(),
                classifier_w: dump_t(&b.classifier_w),
                classifier_b: dump_t(&b.classifier_b),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Model<S>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 0,
            msg: format!("checkpoint version {} (supported: {CHECKPOINT_VERSION})", file.version),
        });
    }
    let layers = file
        .layers
        .iter()
        .map(|l| {
            let lif = lif_to(&l.lif);
            lif.validate()?;
            Ok(SpikingLayer {
                spec: l.spec,
                weight: load_t(&l.weight)?,
                bias: load_t(&l.bias)?,
                bn: l.bn.as_ref().map(load_bn).transpose()?,
                lif,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let net = SpikingNetwork {
        input_shape: file.input_shape,
        layers,
        readout: Readout {
            weight: load_t(&file.readout_weight)?,
            bias: load_t(&file.readout_bias)?,
        },
        branch_points: file.branch_points,
        num_classes: file.num_classes,
    };
    net.validate()?;
    let branches = file
        .branches
        .iter()
        .map(|b| {
            Ok(Branch {
                blocks: b
                    .blocks
                    .iter()
                    .map(|k| {
                        Ok(BranchBlock {
                            depthwise: load_t(&k.depthwise)?,
                            pointwise: load_t(&k.pointwise)?,
                            gamma: load_t(&k.gamma)?,
                            beta: load_t(&k.beta)?,
                            bn: load_bn(&k.bn)?,
                            projection: k.projection.as_ref().map(load_t).transpose()?,
                        })
                    })
                    .collect::<Result<_>>()?,
                classifier_w: load_t(&b.classifier_w)?,
                classifier_b: load_t(&b.classifier_b)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if branches.len() != net.branch_points.len() {
        return Err(Error::Format {
            offset: 0,
            msg: format!(
                "{} branches for {} branch points",
                branches.len(),
                net.branch_points.len()
            ),
        });
    }
    Ok(Model { net, branches })
}
