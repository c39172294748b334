use super::teacher::{BranchOutputs, TeacherLabel};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Probabilities are floored here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

fn clog<S: Scalar>(p: S) -> S {
    p.max(S::lit(PROB_FLOOR)).ln()
}

/// `KL(q ‖ p)` with clamped logs; zero-mass entries of `q` contribute 0.
pub fn kl_divergence<S: Scalar>(q: &[S], p: &[S]) -> S {
    q.iter()
        .zip(p)
        .filter(|(&qc, _)| qc > S::zero())
        .map(|(&qc, &pc)| qc * (clog(qc) - clog(pc)))
        .sum()
}

/// Cross-entropy summed over heads, averaged over the batch.
pub fn ce_loss<S: Scalar>(out: &BranchOutputs<S>, y: &[usize]) -> Result<S> {
    if y.len() != out.batch_size() {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            y.len(),
            out.batch_size()
        )));
    }
    let mut total = S::zero();
    for h in 0..out.heads() {
        for (n, &label) in y.iter().enumerate() {
            total = total - clog(out.row(h, n)[label]);
        }
    }
    Ok(total / S::lit(y.len() as f64))
}

/// Distillation term and the part of it due to the regularizer on
/// unreliable samples, both batch-averaged. Reliable samples pull every head
/// towards the teacher; unreliable ones add `eta_reg·KL(uniform ‖ p_l)`.
pub fn esd_loss<S: Scalar>(out: &BranchOutputs<S>, teacher: &TeacherLabel<S>, eta_reg: S) -> Result<(S, S)> {
    let n = out.batch_size();
    if teacher.q.len() != n {
        return Err(Error::Shape(format!(
            "teacher for {} samples, batch of {n}",
            teacher.q.len()
        )));
    }
    let c = out.classes();
    let uniform = vec![S::one() / S::lit(c as f64); c];
    let (mut kd, mut reg) = (S::zero(), S::zero());
    for h in 0..out.heads() {
        for s in 0..n {
            let p = out.row(h, s);
            if teacher.reliable[s] {
                kd = kd + kl_divergence(&teacher.q[s], p);
            } else {
                reg = reg + eta_reg * kl_divergence(&uniform, p);
            }
        }
    }
    let inv = S::one() / S::lit(n as f64);
    Ok(((kd + reg) * inv, reg * inv))
}

/// Per-batch loss components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<S> {
    pub l_ce: S,
    pub l_esd: S,
    /// Regularizer share of `l_esd`.
    pub l_reg_part: S,
    pub l_total: S,
    pub beta: S,
    pub eta_reg: S,
}

pub fn total_loss<S: Scalar>(l_ce: S, l_esd: S, beta: S) -> LossBreakdown<S> {
    LossBreakdown {
        l_ce,
        l_esd,
        l_reg_part: S::zero(),
        l_total: l_ce + beta * l_esd,
        beta,
        eta_reg: S::zero(),
    }
}

impl<S: Scalar> LossBreakdown<S> {
    pub fn with_regularizer(mut self, reg_part: S, eta_reg: S) -> Self {
        self.l_reg_part = reg_part;
        self.eta_reg = eta_reg;
        self
    }
}

/// The combined loss as a linear function of each head's clamped
/// log-probabilities: `Σ_l Σ coef·max(log p_l, ln floor) + constant`. The
/// same coefficients apply to every head.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective<S> {
    pub coef: Vec<S>,
    pub constant: S,
    pub heads: usize,
}

/// Coefficients for `heads` heads on a batch with labels `y`. Without a
/// teacher only cross-entropy remains.
pub fn objective<S: Scalar>(
    y: &[usize],
    classes: usize,
    heads: usize,
    teacher: Option<&TeacherLabel<S>>,
    beta: S,
    eta_reg: S,
) -> Result<Objective<S>> {
    let n = y.len();
    if n == 0 {
        return Err(Error::EmptyInput("loss over an empty batch".into()));
    }
    let inv_n = S::one() / S::lit(n as f64);
    let inv_c = S::one() / S::lit(classes as f64);
    let mut coef = vec![S::zero(); n * classes];
    let mut constant = S::zero();
    for (s, &label) in y.iter().enumerate() {
        let row = &mut coef[s * classes..(s + 1) * classes];
        row[label] = row[label] - inv_n;
        let Some(t) = teacher else { continue };
        if t.reliable[s] {
            for (r, &q) in row.iter_mut().zip(&t.q[s]) {
                *r = *r - beta * q * inv_n;
                if q > S::zero() {
                    constant = constant + beta * q * clog(q) * inv_n;
                }
            }
        } else {
            row.iter_mut().for_each(|r| *r = *r - beta * eta_reg * inv_c * inv_n);
            constant = constant + beta * eta_reg * clog(inv_c) * inv_n;
        }
    }
    Ok(Objective {
        coef,
        constant: constant * S::lit(heads as f64),
        heads,
    })
}

/// Records the objective on `tape` from per-head logits.
pub fn objective_on_tape<S: Scalar>(tape: &mut Tape<S>, logits: &[Var], obj: &Objective<S>) -> Result<Var> {
    if logits.len() != obj.heads {
        return Err(Error::Shape(format!(
            "objective for {} heads, got {}",
            obj.heads,
            logits.len()
        )));
    }
    let floor = S::lit(PROB_FLOOR).ln();
    let mut acc: Option<Var> = None;
    for &z in logits {
        let lp = tape.log_softmax(z)?;
        let lp = tape.clamp_min(lp, floor);
        let term = tape.weighted_sum(lp, &obj.coef)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let acc = acc.ok_or_else(|| Error::EmptyInput("objective without heads".into()))?;
    Ok(tape.add_scalar(acc, obj.constant))
}
