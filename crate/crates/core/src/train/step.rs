use super::config::{GradMode, TrainConfig};
use super::model::Model;
use crate::autodiff::{BnMode, Tape, Tensor, Var};
use crate::data::EncodedBatch;
use crate::distill::{
    aggregate_teacher_over, argmax, ce_loss, esd_loss, kl_divergence, objective, objective_on_tape, total_loss,
    BranchOutputs, DistillMode, LossBreakdown, PROB_FLOOR,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::snn::{approx_grad, bptt_forward, rate_backbone, spiking_forward, ForwardOptions, StatsMode};

/// What one step computed, besides the gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport<S> {
    pub loss: LossBreakdown<S>,
    /// Batch-mean cross-entropy per head, final head last.
    pub head_ce: Vec<S>,
    /// Batch-mean `KL(p_final ‖ p_l)` for every auxiliary head.
    pub kd: Vec<S>,
    /// Correct predictions per head.
    pub correct: Vec<usize>,
    pub batch: usize,
    pub reliable: usize,
    pub tape_nodes: usize,
    pub retained_bytes: usize,
    /// Mean spike frequency per layer and step.
    pub firing: Vec<Vec<S>>,
}

fn grad_or_zero<S: Scalar>(tape: &Tape<S>, v: Var) -> Vec<S> {
    tape.grad(v)
        .map(<[S]>::to_vec)
        .unwrap_or_else(|| vec![S::zero(); tape.value(v).numel()])
}

/// Runs the forward passes, builds the loss and returns gradients for every
/// parameter in [`Model::params`] order. Batch-norm running statistics are
/// updated; parameters are not.
pub fn compute_grads<S: Scalar>(
    model: &mut Model<S>,
    batch: &EncodedBatch<S>,
    cfg: &TrainConfig,
) -> Result<(Vec<Vec<S>>, StepReport<S>)> {
    let n = batch.batch_size();
    if n == 0 {
        return Err(Error::EmptyInput("training step on an empty batch".into()));
    }
    let mut tape = Tape::new();
    let layers = model.net.layers.len();

    // Backbone: rate graph with traces, or the unrolled graph.
    let (layer_rates, final_logits, readout, spiking_params, traces, firing) = match cfg.mode {
        GradMode::Rate => {
            let pass = spiking_forward(&mut model.net, batch, ForwardOptions::training())?;
            let g = rate_backbone(&mut tape, &model.net, &batch.steps[0], &pass)?;
            (g.layer_rates, g.logits, g.readout, None, Some(pass.traces), pass.firing)
        }
        GradMode::Bptt => {
            let g = bptt_forward(&mut tape, &mut model.net, batch, false, StatsMode::Accumulate)?;
            (g.layer_rates, g.logits, g.readout, Some(g.params), None, g.firing)
        }
    };

    let mut head_logits = Vec::with_capacity(model.heads());
    let mut branch_params = Vec::with_capacity(model.branches.len());
    for (branch, &point) in model.branches.iter_mut().zip(&model.net.branch_points) {
        let out = branch.forward(&mut tape, layer_rates[point], BnMode::TrainGraph)?;
        head_logits.push(out.logits);
        branch_params.push(out.params);
    }
    head_logits.push(final_logits);
    let heads = head_logits.len();

    let outputs = BranchOutputs::from_logits(head_logits.iter().map(|&v| tape.value(v).clone()).collect())?;
    let y = &batch.labels;
    let eps = S::lit(cfg.epsilon);
    let (beta, eta_reg) = (S::lit(cfg.beta), S::lit(cfg.eta_reg));
    let teacher = match cfg.distill_mode {
        DistillMode::Off => None,
        DistillMode::Asd => Some(aggregate_teacher_over(&outputs, y, eps, &[heads - 1])?),
        DistillMode::Esd => Some(aggregate_teacher_over(
            &outputs,
            y,
            eps,
            &(0..heads).collect::<Vec<_>>(),
        )?),
    };
    let l_ce = ce_loss(&outputs, y)?;
    let loss = match &teacher {
        Some(t) => {
            let (l_esd, reg) = esd_loss(&outputs, t, eta_reg)?;
            total_loss(l_ce, l_esd, beta).with_regularizer(reg, eta_reg)
        }
        None => total_loss(l_ce, S::zero(), beta),
    };
    if !(loss.l_total.is_finite() && loss.l_ce.is_finite() && loss.l_esd.is_finite()) {
        return Err(Error::NonFinite(format!(
            "loss (ce={}, esd={}, reg={}) with firing {:?}",
            loss.l_ce, loss.l_esd, loss.l_reg_part, firing
        )));
    }
    let obj = objective(y, outputs.classes(), heads, teacher.as_ref(), beta, eta_reg)?;
    let l = objective_on_tape(&mut tape, &head_logits, &obj)?;
    tape.backward(l, false)?;

    let mut grads = Vec::with_capacity(2 * layers + 2);
    match (traces, spiking_params) {
        (Some(traces), _) => {
            for (rv, trace) in layer_rates.iter().zip(&traces) {
                let (gw, gb) = approx_grad(&grad_or_zero(&tape, *rv), trace)?;
                grads.push(gw);
                grads.push(gb);
            }
        }
        (None, Some(params)) => {
            for (w, b) in params {
                grads.push(grad_or_zero(&tape, w));
                grads.push(grad_or_zero(&tape, b));
            }
        }
        (None, None) => unreachable!("one backbone path always runs"),
    }
    grads.push(grad_or_zero(&tape, readout.0));
    grads.push(grad_or_zero(&tape, readout.1));
    for ps in &branch_params {
        grads.extend(ps.iter().map(|&p| grad_or_zero(&tape, p)));
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient with loss {}", loss.l_total)));
    }

    let inv_n = S::one() / S::lit(n as f64);
    let head_ce = (0..heads)
        .map(|h| {
            let s: S = y
                .iter()
                .enumerate()
                .map(|(i, &c)| -outputs.row(h, i)[c].max(S::lit(PROB_FLOOR)).ln())
                .sum();
            s * inv_n
        })
        .collect();
    let kd = (0..heads - 1)
        .map(|h| {
            let s: S = (0..n)
                .map(|i| kl_divergence(outputs.row(heads - 1, i), outputs.row(h, i)))
                .sum();
            s * inv_n
        })
        .collect();
    let correct = (0..heads)
        .map(|h| (0..n).filter(|&i| argmax(outputs.row(h, i)) == y[i]).count())
        .collect();
    let report = StepReport {
        loss,
        head_ce,
        kd,
        correct,
        batch: n,
        reliable: teacher.as_ref().map_or(0, |t| t.reliable_count()),
        tape_nodes: tape.node_count(),
        retained_bytes: tape.retained_bytes(),
        firing,
    };
    Ok((grads, report))
}

/// `v ← μ·v + g + wd·p; p ← p − lr·v`, elementwise over every tensor.
pub fn sgd_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[Vec<S>],
    velocity: &mut [Vec<S>],
    lr: S,
    momentum: S,
    weight_decay: S,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} momentum buffers",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if g.len() != p.numel() || v.len() != p.numel() {
            return Err(Error::Shape(format!(
                "parameter of {} values, gradient {}, buffer {}",
                p.numel(),
                g.len(),
                v.len()
            )));
        }
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            *vv = momentum * *vv + gv + weight_decay * *pv;
            *pv = *pv - lr * *vv;
        }
    }
    Ok(())
}

/// SGD with momentum buffers matching a model's parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<S> {
    pub momentum: S,
    pub weight_decay: S,
    pub velocity: Vec<Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(model: &Model<S>, momentum: S, weight_decay: S) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: model.params().iter().map(|p| vec![S::zero(); p.numel()]).collect(),
        }
    }

    pub fn step(&mut self, model: &mut Model<S>, grads: &[Vec<S>], lr: S) -> Result<()> {
        sgd_step(
            &mut model.params_mut(),
            grads,
            &mut self.velocity,
            lr,
            self.momentum,
            self.weight_decay,
        )
    }
}

/// One full training step: gradients, then an SGD update at `lr`.
pub fn train_step<S: Scalar>(
    model: &mut Model<S>,
    opt: &mut Sgd<S>,
    batch: &EncodedBatch<S>,
    cfg: &TrainConfig,
    lr: S,
) -> Result<StepReport<S>> {
    let (grads, report) = compute_grads(model, batch, cfg)?;
    opt.step(model, &grads, lr)?;
    Ok(report)
}
