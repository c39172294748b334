use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Whether the final head had the lowest loss, per iteration, and the
/// fraction of iterations where it did not.
#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityStats<S> {
    pub delta: Vec<bool>,
    pub eta: S,
}

/// `losses[t][l]` is head `l`'s loss at iteration `t`, final head last.
/// Ties count in the final head's favour.
pub fn reliability_stats<S: Scalar>(losses: &[Vec<S>]) -> Result<ReliabilityStats<S>> {
    if losses.is_empty() {
        return Err(Error::EmptyInput("no iterations to score".into()));
    }
    let mut delta = Vec::with_capacity(losses.len());
    for (t, row) in losses.iter().enumerate() {
        if row.len() < 2 {
            return Err(Error::Contract(format!(
                "iteration {t} has {} heads, need >= 2",
                row.len()
            )));
        }
        let (last, rest) = row.split_last().expect("non-empty");
        let best_other = rest.iter().copied().fold(S::infinity(), S::min);
        delta.push(*last <= best_other);
    }
    let hits = delta.iter().filter(|&&d| d).count();
    let eta = S::one() - S::lit(hits as f64) / S::lit(delta.len() as f64);
    Ok(ReliabilityStats { delta, eta })
}

/// Both sides of the split of the mean distillation loss into good- and
/// bad-teacher parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdDecomposition<S> {
    pub lhs: S,
    pub rhs: S,
    pub abs_diff: S,
    /// Fraction of entries in the bad partition.
    pub eta_hat: S,
}

pub fn kd_decomposition_check<S: Scalar>(kd: &[S], good: &[bool]) -> Result<KdDecomposition<S>> {
    if kd.len() != good.len() {
        return Err(Error::Shape(format!(
            "{} losses, {} mask entries",
            kd.len(),
            good.len()
        )));
    }
    if kd.is_empty() {
        return Err(Error::EmptyInput("no distillation losses".into()));
    }
    let n = S::lit(kd.len() as f64);
    let lhs = kd.iter().copied().sum::<S>() / n;
    let mean_of = |want: bool| {
        let (s, k) = kd
            .iter()
            .zip(good)
            .filter(|(_, &g)| g == want)
            .fold((S::zero(), 0usize), |(s, k), (&v, _)| (s + v, k + 1));
        (if k == 0 { S::zero() } else { s / S::lit(k as f64) }, k)
    };
    let (good_mean, _) = mean_of(true);
    let (bad_mean, bad_count) = mean_of(false);
    let eta_hat = S::lit(bad_count as f64) / n;
    let rhs = (S::one() - eta_hat) * good_mean + eta_hat * bad_mean;
    Ok(KdDecomposition {
        lhs,
        rhs,
        abs_diff: (lhs - rhs).abs(),
        eta_hat,
    })
}
