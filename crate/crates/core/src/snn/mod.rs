//! Leaky integrate-and-fire dynamics and the two training passes built on them.
//!
//! A layer computes `V[t] = λ·(V[t−1] − V_th·S[t−1]) + I[t]` and
//! `S[t] = H(V[t] − V_th)`, where `I[t]` is the (optionally normalized)
//! synaptic current from the previous layer's spikes at the same step.

mod bptt;
mod forward;
mod network;
mod rate;
mod trace;

use serde::{Deserialize, Serialize};

use crate::autodiff::{heaviside, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use bptt::{bptt_forward, bptt_reference, BpttGraph};
pub use forward::{compute_rate, spiking_forward, ForwardOptions, SpikeTrain, SpikingPass, StatsMode};
pub use network::{conv_specs, mlp_specs, LayerSpec, NetworkGrads, Readout, SpikingLayer, SpikingNetwork};
pub use rate::{rate_backbone, rate_reference_grads, LossFn, RateGraph};
pub use trace::{approx_grad, EligibilityTrace, TraceLayout};

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_V_TH: f64 = 1.0;
pub const DEFAULT_ALPHA: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifConfig<S> {
    pub lambda: S,
    pub v_th: S,
    pub alpha: S,
    pub detach_reset: bool,
}

impl<S: Scalar> LifConfig<S> {
    pub fn new(lambda: S, v_th: S, alpha: S, detach_reset: bool) -> Result<Self> {
        let cfg = LifConfig {
            lambda,
            v_th,
            alpha,
            detach_reset,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= S::zero() && self.lambda <= S::one()) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.v_th > S::zero()) {
            return Err(Error::Config(format!("v_th must be positive, got {}", self.v_th)));
        }
        if !(self.alpha > S::zero()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

impl<S: Scalar> Default for LifConfig<S> {
    fn default() -> Self {
        LifConfig {
            lambda: S::lit(DEFAULT_LAMBDA),
            v_th: S::lit(DEFAULT_V_TH),
            alpha: S::lit(DEFAULT_ALPHA),
            detach_reset: true,
        }
    }
}

/// Sigmoid surrogate `h(x, α) = 1/(1 + e^{−αx})` and its derivative `α·h·(1−h)`.
#[inline]
pub fn surrogate<S: Scalar>(x: S, alpha: S) -> (S, S) {
    let h = S::one() / (S::one() + (-alpha * x).exp());
    (h, alpha * h * (S::one() - h))
}

/// Membrane potentials and last spikes of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState<S> {
    pub v: Tensor<S>,
    pub s_prev: Tensor<S>,
}

impl<S: Scalar> LifState<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        LifState {
            v: Tensor::zeros(shape),
            s_prev: Tensor::zeros(shape),
        }
    }
}

/// One update of every neuron in place. Writes spikes into `s` (which holds
/// the previous spikes on entry) and, when given, surrogate derivatives at the
/// new potential into `psi`.
pub(crate) fn lif_update<S: Scalar>(
    v: &mut [S],
    s: &mut [S],
    current: &[S],
    cfg: &LifConfig<S>,
    mut psi: Option<&mut [S]>,
) {
    for i in 0..v.len() {
        let vn = cfg.lambda * (v[i] - cfg.v_th * s[i]) + current[i];
        v[i] = vn;
        s[i] = heaviside(vn - cfg.v_th);
        if let Some(p) = psi.as_deref_mut() {
            p[i] = surrogate(vn - cfg.v_th, cfg.alpha).1;
        }
    }
}

pub fn lif_step<S: Scalar>(
    state: &LifState<S>,
    input_current: &Tensor<S>,
    cfg: &LifConfig<S>,
) -> Result<(LifState<S>, Tensor<S>)> {
    if state.v.shape() != input_current.shape() || state.s_prev.shape() != input_current.shape() {
        return Err(Error::Shape(format!(
            "state {:?} vs input {:?}",
            state.v.shape(),
            input_current.shape()
        )));
    }
    let mut next = state.clone();
    lif_update(
        next.v.data_mut(),
        next.s_prev.data_mut(),
        input_current.data(),
        cfg,
        None,
    );
    let spikes = next.s_prev.clone();
    Ok((next, spikes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surrogate_values() {
        let (h, d) = surrogate(0.0f64, 4.0);
        assert_eq!((h, d), (0.5, 1.0));
        let (h, d) = surrogate(0.5f64, 4.0);
        // direct evaluation: 1/(1+e^-2), 4·h·(1−h)
        let want = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((h - want).abs() < 1e-15);
        assert!((h - 0.880797).abs() < 1e-6);
        assert!((d - 0.419974).abs() < 1e-6);
        let (h, d) = surrogate(1e4f64, 4.0);
        assert_eq!(h, 1.0);
        assert_eq!(d, 0.0);
        let (h, d) = surrogate(-1e4f64, 4.0);
        assert_eq!(h, 0.0);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn lif_hand_evaluation() {
        let cfg = LifConfig::<f64>::new(0.5, 1.0, 4.0, true).unwrap();
        let st = LifState::zeros(&[1]);
        let input = Tensor::new(&[1], vec![1.2]).unwrap();
        let (st, s) = lif_step(&st, &input, &cfg).unwrap();
        assert!((st.v.data()[0] - 1.2).abs() < 1e-15);
        assert_eq!(s.data(), &[1.0]);
        let (st, s) = lif_step(&st, &input, &cfg).unwrap();
        assert!((st.v.data()[0] - 1.3).abs() < 1e-15);
        assert_eq!(s.data(), &[1.0]);
    }

    #[test]
    fn no_input_decays_geometrically_without_spiking() {
        let cfg = LifConfig::<f64>::default();
        let mut st = LifState {
            v: Tensor::new(&[1], vec![0.8]).unwrap(),
            s_prev: Tensor::zeros(&[1]),
        };
        let zero = Tensor::zeros(&[1]);
        let mut expect = 0.8;
        for _ in 0..20 {
            let (next, s) = lif_step(&st, &zero, &cfg).unwrap();
            expect *= 0.5;
            assert!((next.v.data()[0] - expect).abs() < 1e-15);
            assert_eq!(s.data(), &[0.0]);
            st = next;
        }
    }

    #[test]
    fn threshold_is_right_continuous() {
        let cfg = LifConfig::<f64>::new(0.0, 1.0, 4.0, true).unwrap();
        let st = LifState::zeros(&[1]);
        let (_, s) = lif_step(&st, &Tensor::new(&[1], vec![1.0]).unwrap(), &cfg).unwrap();
        assert_eq!(s.data(), &[1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(LifConfig::<f64>::new(1.5, 1.0, 4.0, true).is_err());
        assert!(LifConfig::<f64>::new(0.5, 0.0, 4.0, true).is_err());
        assert!(LifConfig::<f64>::new(0.5, 1.0, -1.0, true).is_err());
        assert!(LifConfig::<f64>::new(0.0, 1.0, 4.0, false).is_ok());
        assert!(LifConfig::<f64>::new(1.0, 1.0, 4.0, false).is_ok());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let st = LifState::<f64>::zeros(&[2]);
        assert!(lif_step(&st, &Tensor::zeros(&[3]), &LifConfig::default()).is_err());
    }
}
