//! Define-by-run reverse-mode tape.
//!
//! Every op appends its output tensor to the tape; a node is recorded only
//! when at least one input requires a gradient. Nodes are therefore in
//! topological order by construction, and the reverse sweep in
//! [`Tape::backward`] visits them back to front.

use std::mem::{size_of, size_of_val};

use super::bn::{BnMode, BnState};
use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kind of a recorded node, exposed for inspection and profiling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Linear,
    Conv2d,
    BatchNorm,
    ChannelAffine,
    AddBias,
    Relu,
    GlobalAvgPool,
    LogSoftmax,
    Add,
    Sub,
    Scale,
    AddScalar,
    Spike,
    ClampMin,
    WeightedSum,
    Reshape,
    SpikingRate,
}

/// Kernel used by a spiking layer inside the rate graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RateKernel {
    Linear { d_in: usize, d_out: usize },
    Conv(ConvGeom),
}

enum Op<S> {
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: usize,
        w: usize,
        n: usize,
        d_in: usize,
        d_out: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    BatchNorm {
        x: usize,
        gamma: Option<usize>,
        beta: Option<usize>,
        x_hat: Vec<S>,
        inv_std: Vec<S>,
        n: usize,
        c: usize,
        inner: usize,
    },
    ChannelAffine {
        x: usize,
        gain: Vec<S>,
        inner: usize,
    },
    AddBias {
        x: usize,
        b: usize,
        c: usize,
        inner: usize,
    },
    Relu {
        x: usize,
    },
    GlobalAvgPool {
        x: usize,
        hw: usize,
    },
    LogSoftmax {
        x: usize,
        out: usize,
        cols: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: S,
    },
    AddScalar {
        x: usize,
    },
    Spike {
        x: usize,
        deriv: Vec<S>,
    },
    ClampMin {
        x: usize,
        pass: Vec<bool>,
    },
    WeightedSum {
        x: usize,
        weights: Vec<S>,
    },
    Reshape {
        x: usize,
    },
    SpikingRate {
        x: usize,
        kernel: RateKernel,
        weight: Vec<S>,
        sens: Vec<S>,
    },
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::ChannelAffine { .. } => OpKind::ChannelAffine,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Relu { .. } => OpKind::Relu,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::Spike { .. } => OpKind::Spike,
            Op::ClampMin { .. } => OpKind::ClampMin,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::SpikingRate { .. } => OpKind::SpikingRate,
        }
    }
}

struct Node<S> {
    op: Op<S>,
    out: usize,
    saved_bytes: usize,
}

/// Recorded computation plus every value it produced.
pub struct Tape<S> {
    values: Vec<Tensor<S>>,
    is_param: Vec<bool>,
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn add_into<S: Scalar>(slot: &mut Option<Vec<S>>, g: &[S]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g.to_vec()),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            is_param: Vec::new(),
            nodes: Vec::new(),
        }
    }

    /// Places a tensor on the tape as a leaf. Its `requires_grad` flag is kept;
    /// leaves that require grad are treated as parameters.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let p = t.requires_grad;
        self.values.push(t);
        self.is_param.push(p);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor<S>) -> Var {
        t.requires_grad = false;
        t.grad = None;
        self.leaf(t)
    }

    /// Copy of `x` with no gradient connection.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.values[x.0].clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.values[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.values[v.0].requires_grad
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Bytes of intermediates held for the backward pass, summed over nodes.
    /// Parameters referenced by a node are not counted.
    pub fn retained_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.saved_bytes).sum()
    }

    pub fn node_saved_bytes(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n.saved_bytes).collect()
    }

    pub fn op_kinds(&self) -> Vec<OpKind> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    fn activation_bytes(&self, v: usize) -> usize {
        if self.is_param[v] {
            0
        } else {
            self.values[v].numel() * size_of::<S>()
        }
    }

    fn push(&mut self, mut out: Tensor<S>, op: Op<S>, inputs: &[usize], saved_bytes: usize) -> Var {
        let needs = inputs.iter().any(|&i| self.values[i].requires_grad);
        out.requires_grad = needs;
        out.grad = None;
        let id = self.values.len();
        self.values.push(out);
        self.is_param.push(false);
        if needs {
            self.nodes.push(Node {
                op,
                out: id,
                saved_bytes,
            });
        }
        Var(id)
    }

    // ---------------------------------------------------------------- ops

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.dim(1) != tb.dim(0) {
            return Err(Error::Shape(format!("matmul of {:?} by {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.dim(0), ta.dim(1), tb.dim(1));
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, ta.data(), false, tb.data(), false, S::zero(), &mut out);
        let saved = self.activation_bytes(a.0) + self.activation_bytes(b.0);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(
            t,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            &[a.0, b.0],
            saved,
        ))
    }

    /// `x[N×in] · w[out×in]ᵀ`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (&self.values[x.0], &self.values[w.0]);
        if tx.shape().len() != 2 || tw.shape().len() != 2 || tx.dim(1) != tw.dim(1) {
            return Err(Error::Shape(format!(
                "linear of {:?} with weight {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        let (n, d_in, d_out) = (tx.dim(0), tx.dim(1), tw.dim(0));
        let out = kernels::linear_forward(tx.data(), tw.data(), n, d_in, d_out);
        let saved = self.activation_bytes(x.0) + self.activation_bytes(w.0);
        let t = Tensor::new(&[n, d_out], out)?;
        Ok(self.push(
            t,
            Op::Linear {
                x: x.0,
                w: w.0,
                n,
                d_in,
                d_out,
            },
            &[x.0, w.0],
            saved,
        ))
    }

    /// Grouped cross-correlation of `x[N, C_in, H, W]` with `w[C_out, C_in/groups, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, groups: usize, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (&self.values[x.0], &self.values[w.0]);
        if tx.shape().len() != 4 || tw.shape().len() != 4 || tw.dim(2) != tw.dim(3) {
            return Err(Error::Shape(format!(
                "conv2d of {:?} with weight {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        let s = tx.shape();
        let geom = ConvGeom::new(s[0], s[1], s[2], s[3], tw.dim(0), tw.dim(2), stride, pad, groups)?;
        if tw.dim(1) != geom.cin_per_group() {
            return Err(Error::Shape(format!(
                "weight expects {} input channels per group, input provides {}",
                tw.dim(1),
                geom.cin_per_group()
            )));
        }
        let out = kernels::conv2d_forward(tx.data(), tw.data(), &geom);
        let saved = self.activation_bytes(x.0) + self.activation_bytes(w.0);
        let t = Tensor::new(&geom.out_shape(), out)?;
        Ok(self.push(t, Op::Conv2d { x: x.0, w: w.0, geom }, &[x.0, w.0], saved))
    }

    /// Batch normalization over the channel axis of `[N, C, ...]`.
    ///
    /// `affine` supplies `(gamma, beta)` per channel. In `AccumulateStats` and
    /// `Eval` modes the result is a constant: no node is recorded.
    pub fn batch_norm(
        &mut self,
        x: Var,
        state: &mut BnState<S>,
        affine: Option<(Var, Var)>,
        mode: BnMode,
    ) -> Result<Var> {
        let tx = &self.values[x.0];
        let (n, c, inner) = tx.channel_layout()?;
        if c != state.channels() {
            return Err(Error::Shape(format!(
                "batch norm state has {} channels, input has {c}",
                state.channels()
            )));
        }
        if n * inner == 0 {
            return Err(Error::EmptyInput("batch norm over an empty batch".into()));
        }
        let (gamma, beta) = match affine {
            Some((g, b)) => {
                if self.values[g.0].numel() != c || self.values[b.0].numel() != c {
                    return Err(Error::Shape("affine parameters must have one entry per channel".into()));
                }
                (
                    Some(self.values[g.0].data().to_vec()),
                    Some(self.values[b.0].data().to_vec()),
                )
            }
            None => (None, None),
        };
        let shape = tx.shape().to_vec();
        let (mean, var) = BnState::batch_stats(tx.data(), n, c, inner)?;
        let (center, inv_std): (Vec<S>, Vec<S>) = match mode {
            BnMode::TrainGraph | BnMode::AccumulateStats => (
                mean.clone(),
                var.iter().map(|&v| S::one() / (v + state.eps).sqrt()).collect(),
            ),
            BnMode::Eval => (
                state.running_mean.clone(),
                state
                    .running_var
                    .iter()
                    .map(|&v| S::one() / (v + state.eps).sqrt())
                    .collect(),
            ),
        };
        if mode != BnMode::Eval {
            state.update(&mean, &var, n * inner);
        }
        let mut x_hat = tx.data().to_vec();
        for (i, chunk) in x_hat.chunks_mut(inner).enumerate() {
            let ch = i % c;
            for v in chunk {
                *v = (*v - center[ch]) * inv_std[ch];
            }
        }
        let mut out = x_hat.clone();
        if let (Some(g), Some(b)) = (&gamma, &beta) {
            for (i, chunk) in out.chunks_mut(inner).enumerate() {
                let ch = i % c;
                for v in chunk {
                    *v = *v * g[ch] + b[ch];
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        if mode != BnMode::TrainGraph {
            return Ok(self.constant(t));
        }
        let saved = (x_hat.len() + inv_std.len()) * size_of::<S>();
        let mut inputs = vec![x.0];
        if let Some((g, b)) = affine {
            inputs.extend([g.0, b.0]);
        }
        let op = Op::BatchNorm {
            x: x.0,
            gamma: affine.map(|(g, _)| g.0),
            beta: affine.map(|(_, b)| b.0),
            x_hat,
            inv_std,
            n,
            c,
            inner,
        };
        Ok(self.push(t, op, &inputs, saved))
    }

    /// `x·gain[c] + offset[c]` with constant per-channel coefficients.
    pub fn channel_affine(&mut self, x: Var, gain: &[S], offset: &[S]) -> Result<Var> {
        let tx = &self.values[x.0];
        let (_, c, inner) = tx.channel_layout()?;
        if gain.len() != c || offset.len() != c {
            return Err(Error::Shape(format!("channel affine needs {c} coefficients")));
        }
        let mut out = tx.data().to_vec();
        super::bn::apply_channel_affine(&mut out, gain, offset, inner);
        let t = Tensor::new(tx.shape(), out)?;
        let saved = size_of_val(gain);
        Ok(self.push(
            t,
            Op::ChannelAffine {
                x: x.0,
                gain: gain.to_vec(),
                inner,
            },
            &[x.0],
            saved,
        ))
    }

    /// Adds `b[c]` along the channel axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let tx = &self.values[x.0];
        let (_, c, inner) = tx.channel_layout()?;
        let tb = &self.values[b.0];
        if tb.numel() != c {
            return Err(Error::Shape(format!("bias of {} for {c} channels", tb.numel())));
        }
        let mut out = tx.data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let bv = tb.data()[i % c];
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
        let t = Tensor::new(tx.shape(), out)?;
        Ok(self.push(
            t,
            Op::AddBias {
                x: x.0,
                b: b.0,
                c,
                inner,
            },
            &[x.0, b.0],
            0,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = &self.values[x.0];
        let out: Vec<S> = tx.data().iter().map(|&v| v.max(S::zero())).collect();
        let t = Tensor::new(tx.shape(), out).expect("same shape");
        let saved = self.activation_bytes(x.0);
        self.push(t, Op::Relu { x: x.0 }, &[x.0], saved)
    }

    /// Mean over the spatial axes of `[N, C, H, W]`, giving `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = &self.values[x.0];
        if tx.shape().len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool of {:?}", tx.shape())));
        }
        let (n, c, hw) = tx.channel_layout()?;
        if hw == 0 {
            return Err(Error::EmptyInput("pooling over zero spatial positions".into()));
        }
        let inv = S::one() / S::lit(hw as f64);
        let out: Vec<S> = tx
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<S>() * inv)
            .collect();
        let t = Tensor::new(&[n, c], out)?;
        Ok(self.push(t, Op::GlobalAvgPool { x: x.0, hw }, &[x.0], 0))
    }

    /// Row-wise max-shifted log-softmax of `[N, C]`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = &self.values[x.0];
        if tx.shape().len() != 2 || tx.dim(1) == 0 {
            return Err(Error::Shape(format!("log_softmax of {:?}", tx.shape())));
        }
        let cols = tx.dim(1);
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<S>().ln() + m;
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let t = Tensor::new(tx.shape(), out)?;
        let saved = t.numel() * size_of::<S>();
        let out = self.values.len();
        Ok(self.push(t, Op::LogSoftmax { x: x.0, out, cols }, &[x.0], saved))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        same_shape(ta, tb, "add")?;
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(ta.shape(), out)?;
        Ok(self.push(t, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0], 0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        same_shape(ta, tb, "sub")?;
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
        let t = Tensor::new(ta.shape(), out)?;
        Ok(self.push(t, Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0], 0))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let tx = &self.values[x.0];
        let out = tx.data().iter().map(|&v| v * c).collect();
        let t = Tensor::new(tx.shape(), out).expect("same shape");
        self.push(t, Op::Scale { x: x.0, c }, &[x.0], 0)
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        let tx = &self.values[x.0];
        let out = tx.data().iter().map(|&v| v + c).collect();
        let t = Tensor::new(tx.shape(), out).expect("same shape");
        self.push(t, Op::AddScalar { x: x.0 }, &[x.0], 0)
    }

    /// Spike nonlinearity on `x = V − V_th`.
    ///
    /// Forward is the Heaviside step (`H(0) = 1`) unless `relaxed`, in which
    /// case it is the sigmoid `h(x, alpha)` itself. Backward always uses
    /// `alpha·h·(1 − h)`, so the relaxed variant is exactly differentiable.
    pub fn spike(&mut self, x: Var, alpha: S, relaxed: bool) -> Var {
        let tx = &self.values[x.0];
        let mut out = Vec::with_capacity(tx.numel());
        let mut deriv = Vec::with_capacity(tx.numel());
        for &v in tx.data() {
            let (h, d) = crate::snn::surrogate(v, alpha);
            out.push(if relaxed { h } else { heaviside(v) });
            deriv.push(d);
        }
        let t = Tensor::new(tx.shape(), out).expect("same shape");
        let saved = deriv.len() * size_of::<S>();
        self.push(t, Op::Spike { x: x.0, deriv }, &[x.0], saved)
    }

    /// `max(x, floor)`; the gradient is blocked where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: S) -> Var {
        let tx = &self.values[x.0];
        let pass: Vec<bool> = tx.data().iter().map(|&v| v > floor).collect();
        let out = tx.data().iter().map(|&v| v.max(floor)).collect();
        let t = Tensor::new(tx.shape(), out).expect("same shape");
        let saved = pass.len();
        self.push(t, Op::ClampMin { x: x.0, pass }, &[x.0], saved)
    }

    /// Scalar `Σ weights·x` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[S]) -> Result<Var> {
        let tx = &self.values[x.0];
        if weights.len() != tx.numel() {
            return Err(Error::Shape(format!(
                "{} weights for {} elements",
                weights.len(),
                tx.numel()
            )));
        }
        let v = tx.data().iter().zip(weights).map(|(&a, &w)| a * w).sum();
        let saved = size_of_val(weights);
        Ok(self.push(
            Tensor::scalar(v),
            Op::WeightedSum {
                x: x.0,
                weights: weights.to_vec(),
            },
            &[x.0],
            saved,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let ones = vec![S::one(); self.values[x.0].numel()];
        self.weighted_sum(x, &ones).expect("matching length")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.values[x.0].reshaped(shape)?;
        Ok(self.push(t, Op::Reshape { x: x.0 }, &[x.0], 0))
    }

    /// A spiking layer inside the rate graph.
    ///
    /// The forward value is `rate`, the firing rate recorded during the
    /// graph-free spiking pass. The backward maps the output gradient to the
    /// input rates through the layer's weights scaled per neuron by
    /// `sensitivity` (`∂r_out/∂current`). The output always carries a gradient
    /// so callers can read `∂L/∂r` for the layer after [`Tape::backward`].
    pub fn spiking_rate(
        &mut self,
        x: Var,
        rate: Tensor<S>,
        kernel: RateKernel,
        weight: &[S],
        sensitivity: Vec<S>,
    ) -> Result<Var> {
        let tx = &self.values[x.0];
        let (in_len, out_len, w_len) = match &kernel {
            RateKernel::Linear { d_in, d_out } => {
                let n = tx.shape().first().copied().unwrap_or(0);
                (n * d_in, n * d_out, d_in * d_out)
            }
            RateKernel::Conv(g) => (g.in_len(), g.out_len(), g.weight_len()),
        };
        if tx.numel() != in_len || rate.numel() != out_len || sensitivity.len() != out_len || weight.len() != w_len {
            return Err(Error::Shape(format!(
                "spiking rate layer: input {:?}, rate {:?}, {} sensitivities, {} weights",
                tx.shape(),
                rate.shape(),
                sensitivity.len(),
                weight.len()
            )));
        }
        let mut out = rate;
        out.grad = None;
        let id = self.values.len();
        out.requires_grad = true;
        self.values.push(out);
        self.is_param.push(false);
        let saved = sensitivity.len() * size_of::<S>();
        self.nodes.push(Node {
            op: Op::SpikingRate {
                x: x.0,
                kernel,
                weight: weight.to_vec(),
                sens: sensitivity,
            },
            out: id,
            saved_bytes: saved,
        });
        Ok(Var(id))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Gradients of every value that
    /// requires one are written to the tape; without `accumulate` previous
    /// gradients are discarded first, so repeated calls give identical results.
    pub fn backward(&mut self, loss: Var, accumulate: bool) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![S::one()]);
        for node in self.nodes.iter().rev() {
            let Some(g) = grads[node.out].take() else { continue };
            self.backprop_node(&node.op, &g, &mut grads);
            grads[node.out] = Some(g);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let t = &mut self.values[i];
            if !t.requires_grad {
                continue;
            }
            if !accumulate {
                t.grad = None;
            }
            if let Some(g) = g {
                add_into(&mut t.grad, &g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, op: &Op<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let vals = &self.values;
        let wants = |i: usize| vals[i].requires_grad;
        match op {
            Op::MatMul { a, b, m, k, n } => {
                if wants(*a) {
                    let mut ga = vec![S::zero(); m * k];
                    S::gemm(*m, *n, *k, g, false, vals[*b].data(), true, S::zero(), &mut ga);
                    add_into(&mut grads[*a], &ga);
                }
                if wants(*b) {
                    let mut gb = vec![S::zero(); k * n];
                    S::gemm(*k, *m, *n, vals[*a].data(), true, g, false, S::zero(), &mut gb);
                    add_into(&mut grads[*b], &gb);
                }
            }
            Op::Linear { x, w, n, d_in, d_out } => {
                if wants(*x) {
                    let gx = kernels::linear_backward_input(g, vals[*w].data(), *n, *d_in, *d_out);
                    add_into(&mut grads[*x], &gx);
                }
                if wants(*w) {
                    let gw = kernels::linear_backward_weight(vals[*x].data(), g, *n, *d_in, *d_out);
                    add_into(&mut grads[*w], &gw);
                }
            }
            Op::Conv2d { x, w, geom } => {
                if wants(*x) {
                    let gx = kernels::conv2d_backward_input(g, vals[*w].data(), geom);
                    add_into(&mut grads[*x], &gx);
                }
                if wants(*w) {
                    let gw = kernels::conv2d_backward_weight(vals[*x].data(), g, geom);
                    add_into(&mut grads[*w], &gw);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                n,
                c,
                inner,
            } => {
                let (n, c, inner) = (*n, *c, *inner);
                let count = S::lit((n * inner) as f64);
                let gam: Vec<S> = match gamma {
                    Some(gi) => vals[*gi].data().to_vec(),
                    None => vec![S::one(); c],
                };
                let mut sum_g = vec![S::zero(); c];
                let mut sum_gx = vec![S::zero(); c];
                for (i, (gc, xc)) in g.chunks(inner).zip(x_hat.chunks(inner)).enumerate() {
                    let ch = i % c;
                    for (&gv, &xv) in gc.iter().zip(xc) {
                        sum_g[ch] = sum_g[ch] + gv;
                        sum_gx[ch] = sum_gx[ch] + gv * xv;
                    }
                }
                if wants(*x) {
                    let mut gx = vec![S::zero(); g.len()];
                    for (i, ((dst, gc), xc)) in gx
                        .chunks_mut(inner)
                        .zip(g.chunks(inner))
                        .zip(x_hat.chunks(inner))
                        .enumerate()
                    {
                        let ch = i % c;
                        let k = gam[ch] * inv_std[ch] / count;
                        for ((d, &gv), &xv) in dst.iter_mut().zip(gc).zip(xc) {
                            *d = k * (count * gv - sum_g[ch] - xv * sum_gx[ch]);
                        }
                    }
                    add_into(&mut grads[*x], &gx);
                }
                if let Some(gi) = gamma {
                    if wants(*gi) {
                        add_into(&mut grads[*gi], &sum_gx);
                    }
                }
                if let Some(bi) = beta {
                    if wants(*bi) {
                        add_into(&mut grads[*bi], &sum_g);
                    }
                }
            }
            Op::ChannelAffine { x, gain, inner } => {
                let c = gain.len();
                let gx: Vec<S> = g
                    .chunks(*inner)
                    .enumerate()
                    .flat_map(|(i, ch)| ch.iter().map(move |&v| v * gain[i % c]))
                    .collect();
                add_into(&mut grads[*x], &gx);
            }
            Op::AddBias { x, b, c, inner } => {
                if wants(*x) {
                    add_into(&mut grads[*x], g);
                }
                if wants(*b) {
                    let mut gb = vec![S::zero(); *c];
                    for (i, ch) in g.chunks(*inner).enumerate() {
                        gb[i % c] = gb[i % c] + ch.iter().copied().sum::<S>();
                    }
                    add_into(&mut grads[*b], &gb);
                }
            }
            Op::Relu { x } => {
                let gx: Vec<S> = vals[*x]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > S::zero() { gv } else { S::zero() })
                    .collect();
                add_into(&mut grads[*x], &gx);
            }
            Op::GlobalAvgPool { x, hw } => {
                let inv = S::one() / S::lit(*hw as f64);
                let gx: Vec<S> = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, *hw)).collect();
                add_into(&mut grads[*x], &gx);
            }
            Op::LogSoftmax { x, out, cols } => {
                let logp = vals[*out].data();
                let mut gx = vec![S::zero(); g.len()];
                for ((dst, gr), lr) in gx.chunks_mut(*cols).zip(g.chunks(*cols)).zip(logp.chunks(*cols)) {
                    let gsum: S = gr.iter().copied().sum();
                    for ((d, &gv), &lv) in dst.iter_mut().zip(gr).zip(lr) {
                        *d = gv - lv.exp() * gsum;
                    }
                }
                add_into(&mut grads[*x], &gx);
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    add_into(&mut grads[*a], g);
                }
                if wants(*b) {
                    add_into(&mut grads[*b], g);
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    add_into(&mut grads[*a], g);
                }
                if wants(*b) {
                    let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                    add_into(&mut grads[*b], &neg);
                }
            }
            Op::Scale { x, c } => {
                let gx: Vec<S> = g.iter().map(|&v| v * *c).collect();
                add_into(&mut grads[*x], &gx);
            }
            Op::AddScalar { x } => add_into(&mut grads[*x], g),
            Op::Spike { x, deriv } => {
                let gx: Vec<S> = g.iter().zip(deriv).map(|(&a, &d)| a * d).collect();
                add_into(&mut grads[*x], &gx);
            }
            Op::ClampMin { x, pass } => {
                let gx: Vec<S> = g
                    .iter()
                    .zip(pass)
                    .map(|(&v, &p)| if p { v } else { S::zero() })
                    .collect();
                add_into(&mut grads[*x], &gx);
            }
            Op::WeightedSum { x, weights } => {
                let gx: Vec<S> = weights.iter().map(|&w| w * g[0]).collect();
                add_into(&mut grads[*x], &gx);
            }
            Op::Reshape { x } => add_into(&mut grads[*x], g),
            Op::SpikingRate {
                x,
                kernel,
                weight,
                sens,
            } => {
                if !wants(*x) {
                    return;
                }
                let gc: Vec<S> = g.iter().zip(sens).map(|(&a, &s)| a * s).collect();
                let gx = match kernel {
                    RateKernel::Linear { d_in, d_out } => {
                        let n = gc.len() / d_out;
                        kernels::linear_backward_input(&gc, weight, n, *d_in, *d_out)
                    }
                    RateKernel::Conv(geom) => kernels::conv2d_backward_input(&gc, weight, geom),
                };
                add_into(&mut grads[*x], &gx);
            }
        }
    }
}

/// Right-continuous Heaviside step.
#[inline]
pub fn heaviside<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one()
    } else {
        S::zero()
    }
}
