use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// How a batch-norm call treats its input and running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics, record the backward, update running stats.
    TrainGraph,
    /// Update running stats only; nothing is recorded on the tape.
    AccumulateStats,
    /// Normalize with running stats; nothing is recorded on the tape.
    Eval,
}

/// Running mean/variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnState<S> {
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub momentum: S,
    pub eps: S,
}

impl<S: Scalar> BnState<S> {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
            momentum: S::lit(BN_MOMENTUM),
            eps: S::lit(BN_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Per-channel batch mean and biased variance of an `[N, C, inner]` buffer.
    pub fn batch_stats(x: &[S], n: usize, c: usize, inner: usize) -> Result<(Vec<S>, Vec<S>)> {
        let count = n * inner;
        if count == 0 {
            return Err(Error::EmptyInput("batch norm over zero elements".into()));
        }
        let inv = S::one() / S::lit(count as f64);
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for ch in 0..c {
            let mut s = S::zero();
            for i in 0..n {
                s = s + x[(i * c + ch) * inner..][..inner].iter().copied().sum::<S>();
            }
            let m = s * inv;
            let mut q = S::zero();
            for i in 0..n {
                for &v in &x[(i * c + ch) * inner..][..inner] {
                    q = q + (v - m) * (v - m);
                }
            }
            mean[ch] = m;
            var[ch] = q * inv;
        }
        Ok((mean, var))
    }

    /// Moves running stats toward the batch stats by `momentum`. The running
    /// variance uses the unbiased batch estimate when more than one element is
    /// available per channel.
    pub fn update(&mut self, mean: &[S], biased_var: &[S], count: usize) {
        let m = self.momentum;
        let keep = S::one() - m;
        let bessel = if count > 1 {
            S::lit(count as f64 / (count - 1) as f64)
        } else {
            S::one()
        };
        for ch in 0..self.channels() {
            self.running_mean[ch] = keep * self.running_mean[ch] + m * mean[ch];
            self.running_var[ch] = keep * self.running_var[ch] + m * biased_var[ch] * bessel;
        }
    }

    pub fn accumulate(&mut self, x: &[S], n: usize, inner: usize) -> Result<()> {
        let c = self.channels();
        let (mean, var) = Self::batch_stats(x, n, c, inner)?;
        self.update(&mean, &var, n * inner);
        Ok(())
    }

    /// Per-channel `(gain, offset)` such that eval-mode output is `x·gain + offset`.
    pub fn eval_affine(&self) -> (Vec<S>, Vec<S>) {
        let gain: Vec<S> = self
            .running_var
            .iter()
            .map(|&v| S::one() / (v + self.eps).sqrt())
            .collect();
        let offset = self.running_mean.iter().zip(&gain).map(|(&m, &g)| -m * g).collect();
        (gain, offset)
    }
}

/// Applies `y = x·gain[c] + offset[c]` in place over an `[N, C, inner]` buffer.
pub fn apply_channel_affine<S: Scalar>(x: &mut [S], gain: &[S], offset: &[S], inner: usize) {
    let c = gain.len();
    for (i, chunk) in x.chunks_mut(inner).enumerate() {
        let ch = i % c;
        for v in chunk {
            *v = *v * gain[ch] + offset[ch];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulate_moves_running_mean_by_momentum() {
        let mut st = BnState::<f64>::new(1);
        // mean 3, biased var 1 over four samples
        st.accumulate(&[2.0, 4.0, 2.0, 4.0], 4, 1).unwrap();
        assert!((st.running_mean[0] - 0.1 * 3.0).abs() < 1e-15);
        assert!((st.running_var[0] - (0.9 + 0.1 * 4.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut st = BnState::<f64>::new(2);
        assert!(matches!(st.accumulate(&[], 0, 1), Err(Error::EmptyInput(_))));
    }
}
