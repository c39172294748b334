use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const TEACHER_EPS: f64 = 1e-8;

/// Per-head class probabilities and logits for one batch. The last head is
/// the final classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutputs<S> {
    /// `[N, C]` per head; rows sum to 1.
    pub probs: Vec<Tensor<S>>,
    pub logits: Vec<Tensor<S>>,
}

fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let c = x.dim(1);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        row.iter_mut().for_each(|v| *v = (*v - m).exp());
        let z: S = row.iter().copied().sum();
        row.iter_mut().for_each(|v| *v = *v / z);
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

impl<S: Scalar> BranchOutputs<S> {
    pub fn from_logits(logits: Vec<Tensor<S>>) -> Result<Self> {
        Self::check(&logits)?;
        let probs = logits.iter().map(softmax_rows).collect();
        Ok(BranchOutputs { probs, logits })
    }

    /// Wraps given probabilities; rows must be non-negative and sum to 1.
    pub fn from_probs(probs: Vec<Tensor<S>>) -> Result<Self> {
        Self::check(&probs)?;
        let tol = S::lit(1e-9);
        for p in &probs {
            for row in p.data().chunks(p.dim(1)) {
                let s: S = row.iter().copied().sum();
                if row.iter().any(|&v| v < S::zero()) || (s - S::one()).abs() > tol {
                    return Err(Error::Contract(format!(
                        "probability row {row:?} is not a distribution"
                    )));
                }
            }
        }
        let floor = S::lit(super::PROB_FLOOR);
        let logits = probs
            .iter()
            .map(|p| Tensor::new(p.shape(), p.data().iter().map(|&v| v.max(floor).ln()).collect()))
            .collect::<Result<_>>()?;
        Ok(BranchOutputs { probs, logits })
    }

    fn check(heads: &[Tensor<S>]) -> Result<()> {
        let first = heads
            .first()
            .ok_or_else(|| Error::EmptyInput("no classifier heads".into()))?;
        if first.shape().len() != 2 || first.dim(1) == 0 {
            return Err(Error::Shape(format!("head output of shape {:?}", first.shape())));
        }
        if heads.iter().any(|h| h.shape() != first.shape()) {
            return Err(Error::Shape("classifier heads disagree in shape".into()));
        }
        Ok(())
    }

    pub fn heads(&self) -> usize {
        self.probs.len()
    }

    pub fn batch_size(&self) -> usize {
        self.probs[0].dim(0)
    }

    pub fn classes(&self) -> usize {
        self.probs[0].dim(1)
    }

    pub fn row(&self, head: usize, sample: usize) -> &[S] {
        let c = self.classes();
        &self.probs[head].data()[sample * c..(sample + 1) * c]
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-sample teacher distribution. An all-zero `q` marks a sample no
/// candidate head classified correctly.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherLabel<S> {
    pub q: Vec<Vec<S>>,
    pub reliable: Vec<bool>,
}

impl<S: Scalar> TeacherLabel<S> {
    pub fn reliable_count(&self) -> usize {
        self.reliable.iter().filter(|&&r| r).count()
    }
}

/// Teacher built from every head.
pub fn aggregate_teacher<S: Scalar>(out: &BranchOutputs<S>, y: &[usize], eps: S) -> Result<TeacherLabel<S>> {
    let heads: Vec<usize> = (0..out.heads()).collect();
    aggregate_teacher_over(out, y, eps, &heads)
}

/// Sum of the candidate heads that predict the true class, divided by
/// `count + eps`. The result is a plain value: nothing flows back into it.
pub fn aggregate_teacher_over<S: Scalar>(
    out: &BranchOutputs<S>,
    y: &[usize],
    eps: S,
    candidates: &[usize],
) -> Result<TeacherLabel<S>> {
    if !(eps > S::zero()) {
        return Err(Error::Config("teacher epsilon must be positive".into()));
    }
    if y.len() != out.batch_size() {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            y.len(),
            out.batch_size()
        )));
    }
    if let Some(&h) = candidates.iter().find(|&&h| h >= out.heads()) {
        return Err(Error::Shape(format!("head {h} of {}", out.heads())));
    }
    let c = out.classes();
    let mut q = Vec::with_capacity(y.len());
    let mut reliable = Vec::with_capacity(y.len());
    for (n, &label) in y.iter().enumerate() {
        if label >= c {
            return Err(Error::Shape(format!("label {label} with {c} classes")));
        }
        let mut acc = vec![S::zero(); c];
        let mut count = 0usize;
        for &h in candidates {
            let p = out.row(h, n);
            if argmax(p) == label {
                count += 1;
                acc.iter_mut().zip(p).for_each(|(a, &v)| *a = *a + v);
            }
        }
        if count > 0 {
            let d = S::lit(count as f64) + eps;
            acc.iter_mut().for_each(|a| *a = *a / d);
        }
        q.push(acc);
        reliable.push(count > 0);
    }
    Ok(TeacherLabel { q, reliable })
}
