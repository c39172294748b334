use rand::Rng;

use crate::autodiff::{BnMode, BnState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const DW_K: usize = 3;

/// Depthwise 3×3 → pointwise 1×1 → BN → residual add → relu.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchBlock<S> {
    pub depthwise: Tensor<S>,
    pub pointwise: Tensor<S>,
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub bn: BnState<S>,
    /// 1×1 projection on the skip path when channel counts differ.
    pub projection: Option<Tensor<S>>,
}

/// Rate-domain auxiliary classifier attached to one spiking layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch<S> {
    pub blocks: Vec<BranchBlock<S>>,
    pub classifier_w: Tensor<S>,
    pub classifier_b: Tensor<S>,
}

/// Tape handles of one branch forward.
#[derive(Clone, Debug)]
pub struct BranchVars {
    pub logits: Var,
    /// Same order as [`Branch::params`].
    pub params: Vec<Var>,
}

fn uniform<S: Scalar, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::lit(rng.random_range(-bound..=bound))).collect();
    Tensor::param(shape, data).expect("shape matches data")
}

/// Auxiliary branch with `depth` blocks. The first block maps `c_in` to
/// `c_out` channels; later blocks keep `c_out`.
pub fn build_branch<S: Scalar, R: Rng>(
    c_in: usize,
    c_out: usize,
    num_classes: usize,
    depth: usize,
    rng: &mut R,
) -> Result<Branch<S>> {
    if c_in == 0 || c_out == 0 || num_classes == 0 || depth == 0 {
        return Err(Error::Config(format!(
            "branch needs positive sizes, got c_in={c_in} c_out={c_out} classes={num_classes} depth={depth}"
        )));
    }
    let mut blocks = Vec::with_capacity(depth);
    let mut c = c_in;
    for _ in 0..depth {
        let dw_bound = (6.0 / (DW_K * DW_K) as f64).sqrt();
        let pw_bound = (6.0 / c as f64).sqrt();
        blocks.push(BranchBlock {
            depthwise: uniform(&[c, 1, DW_K, DW_K], dw_bound, rng),
            pointwise: uniform(&[c_out, c, 1, 1], pw_bound, rng),
            gamma: Tensor::param(&[c_out], vec![S::one(); c_out])?,
            beta: Tensor::param(&[c_out], vec![S::zero(); c_out])?,
            bn: BnState::new(c_out),
            projection: (c != c_out).then(|| uniform(&[c_out, c, 1, 1], pw_bound, rng)),
        });
        c = c_out;
    }
    let fc_bound = 1.0 / (c_out as f64).sqrt();
    Ok(Branch {
        blocks,
        classifier_w: uniform(&[num_classes, c_out], fc_bound, rng),
        classifier_b: Tensor::param(&[num_classes], vec![S::zero(); num_classes])?,
    })
}

impl<S: Scalar> Branch<S> {
    pub fn in_channels(&self) -> usize {
        self.blocks[0].depthwise.dim(0)
    }

    pub fn num_classes(&self) -> usize {
        self.classifier_b.numel()
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([&b.depthwise, &b.pointwise, &b.gamma, &b.beta]);
            out.extend(b.projection.as_ref());
        }
        out.extend([&self.classifier_w, &self.classifier_b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend([&mut b.depthwise, &mut b.pointwise, &mut b.gamma, &mut b.beta]);
            out.extend(b.projection.as_mut());
        }
        out.extend([&mut self.classifier_w, &mut self.classifier_b]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Records the branch on `tape`. `x` is a rate map `[N, C, H, W]` or a
    /// feature matrix `[N, C]`, which is treated as `[N, C, 1, 1]`.
    pub fn forward(&mut self, tape: &mut Tape<S>, x: Var, mode: BnMode) -> Result<BranchVars> {
        let shape = tape.value(x).shape().to_vec();
        let mut h = match shape.len() {
            4 => x,
            2 => tape.reshape(x, &[shape[0], shape[1], 1, 1])?,
            _ => return Err(Error::Shape(format!("branch input of shape {shape:?}"))),
        };
        if tape.value(h).dim(1) != self.in_channels() {
            return Err(Error::Shape(format!(
                "branch expects {} channels, got {}",
                self.in_channels(),
                tape.value(h).dim(1)
            )));
        }
        let mut params = Vec::new();
        for block in &mut self.blocks {
            let c = block.depthwise.dim(0);
            let dw = tape.leaf(block.depthwise.clone());
            let pw = tape.leaf(block.pointwise.clone());
            let g = tape.leaf(block.gamma.clone());
            let b = tape.leaf(block.beta.clone());
            params.extend([dw, pw, g, b]);
            let z = tape.conv2d(h, dw, c, 1, DW_K / 2)?;
            let z = tape.conv2d(z, pw, 1, 1, 0)?;
            let z = tape.batch_norm(z, &mut block.bn, Some((g, b)), mode)?;
            let skip = match &block.projection {
                Some(p) => {
                    let pv = tape.leaf(p.clone());
                    params.push(pv);
                    tape.conv2d(h, pv, 1, 1, 0)?
                }
                None => h,
            };
            let sum = tape.add(z, skip)?;
            h = tape.relu(sum);
        }
        let pooled = tape.global_avg_pool(h)?;
        let w = tape.leaf(self.classifier_w.clone());
        let b = tape.leaf(self.classifier_b.clone());
        params.extend([w, b]);
        let z = tape.linear(pooled, w)?;
        let logits = tape.add_bias(z, b)?;
        Ok(BranchVars { logits, params })
    }
}

/// Cost of a standard `d_k×d_k` convolution against its depthwise-separable
/// replacement on a `d_f×d_f` feature map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchComplexity {
    pub p_std: u64,
    pub c_std: u64,
    pub p_dsc: u64,
    pub c_dsc: u64,
    pub param_ratio: f64,
}

pub fn branch_complexity(d_k: u64, c_in: u64, c_out: u64, d_f: u64) -> Result<BranchComplexity> {
    if d_k == 0 || c_in == 0 || c_out == 0 || d_f == 0 {
        return Err(Error::Config("complexity inputs must all be >= 1".into()));
    }
    let p_std = d_k * d_k * c_in * c_out;
    let p_dsc = d_k * d_k * c_in + c_in * c_out;
    Ok(BranchComplexity {
        p_std,
        c_std: p_std * d_f * d_f,
        p_dsc,
        c_dsc: p_dsc * d_f * d_f,
        param_ratio: p_dsc as f64 / p_std as f64,
    })
}
