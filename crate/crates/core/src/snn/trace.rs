//! Per-layer eligibility traces for the graph-free spiking pass.
//!
//! For a weight `W_ij` from presynaptic unit `j` to neuron `i`, the trace at
//! step `t` is `e_ij^t = ψ_i^t · ε_j^t · g_i`, where `ψ_i^t` is the surrogate
//! derivative at `V_i^t`, `ε_j^t = λ·ε_j^{t−1} + x_j^t` is the decayed input
//! and `g_i` the fixed normalization gain between `W·x` and the membrane.
//! Only `ε` (one value per presynaptic unit) and the running sum of `e` are
//! kept, so memory does not grow with the number of steps.
//!
//! The same recursion with `x ≡ 1` gives the bias trace, which doubles as
//! the sensitivity of a neuron's rate to its input current.

use super::network::LayerSpec;
use crate::autodiff::{kernels, ConvGeom};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceLayout {
    pub n: usize,
    pub out_channels: usize,
    pub positions: usize,
    pub fan_in: usize,
    pub in_len: usize,
    pub geom: Option<ConvGeom>,
}

impl TraceLayout {
    pub fn for_layer(spec: &LayerSpec, n: usize) -> Self {
        TraceLayout {
            n,
            out_channels: spec.out_channels(),
            positions: spec.out_positions(),
            fan_in: spec.fan_in(),
            in_len: spec.in_len(),
            geom: spec.geom(n),
        }
    }

    fn neurons(&self) -> usize {
        self.n * self.out_channels * self.positions
    }
}

#[derive(Clone, Debug)]
pub struct EligibilityTrace<S> {
    pub layout: TraceLayout,
    /// `ε` for every presynaptic unit of every sample, `[N, in_len]`.
    pub input_trace: Vec<S>,
    /// `ε` for the constant input of the bias.
    pub unit_trace: S,
    /// Number of steps accumulated so far.
    pub t_count: usize,
    e_accum: Vec<S>,
    sens_accum: Vec<S>,
    gain: Vec<S>,
    finalized: bool,
}

impl<S: Scalar> EligibilityTrace<S> {
    /// `gain` holds one normalization factor per output channel.
    pub fn new(layout: TraceLayout, gain: Vec<S>) -> Self {
        let neurons = layout.neurons();
        EligibilityTrace {
            layout,
            input_trace: vec![S::zero(); layout.n * layout.in_len],
            unit_trace: S::zero(),
            t_count: 0,
            e_accum: vec![S::zero(); neurons * layout.fan_in],
            sens_accum: vec![S::zero(); neurons],
            gain,
            finalized: false,
        }
    }

    /// Advances the trace by one step given the layer's input `x` and the
    /// surrogate derivatives `psi` of its neurons at this step.
    pub fn step(&mut self, x: &[S], psi: &[S], lambda: S) -> Result<()> {
        let lay = self.layout;
        if self.finalized {
            return Err(Error::State("trace already finalized".into()));
        }
        if x.len() != self.input_trace.len() || psi.len() != lay.neurons() {
            return Err(Error::Shape(format!(
                "trace step got {} inputs / {} derivatives, expected {} / {}",
                x.len(),
                psi.len(),
                self.input_trace.len(),
                lay.neurons()
            )));
        }
        for (e, &xv) in self.input_trace.iter_mut().zip(x) {
            *e = lambda * *e + xv;
        }
        self.unit_trace = lambda * self.unit_trace + S::one();
        let unit = self.unit_trace;
        for (s, &p) in self.sens_accum.iter_mut().zip(psi) {
            *s = *s + p * unit;
        }
        let (o_n, f_n, p_n) = (lay.out_channels, lay.fan_in, lay.positions);
        match lay.geom {
            None => {
                for n in 0..lay.n {
                    let eps = &self.input_trace[n * f_n..(n + 1) * f_n];
                    for o in 0..o_n {
                        let pv = psi[n * o_n + o];
                        if pv == S::zero() {
                            continue;
                        }
                        let row = &mut self.e_accum[(n * o_n + o) * f_n..][..f_n];
                        for (r, &ev) in row.iter_mut().zip(eps) {
                            *r = *r + pv * ev;
                        }
                    }
                }
            }
            Some(g) => {
                let g = g.with_batch(1);
                let in_sample = lay.in_len;
                let mut col = vec![S::zero(); f_n * p_n];
                for n in 0..lay.n {
                    kernels::im2col(&self.input_trace[n * in_sample..(n + 1) * in_sample], &g, 0, &mut col);
                    for o in 0..o_n {
                        let prow = &psi[(n * o_n + o) * p_n..][..p_n];
                        if prow.iter().all(|&v| v == S::zero()) {
                            continue;
                        }
                        let block = &mut self.e_accum[(n * o_n + o) * f_n * p_n..][..f_n * p_n];
                        for (dst, src) in block.chunks_mut(p_n).zip(col.chunks(p_n)) {
                            for ((d, &c), &pv) in dst.iter_mut().zip(src).zip(prow) {
                                *d = *d + pv * c;
                            }
                        }
                    }
                }
            }
        }
        self.t_count += 1;
        Ok(())
    }

    /// Turns the running sums into time averages and applies the gain.
    pub fn finalize(&mut self) -> Result<()> {
        if self.finalized {
            return Ok(());
        }
        if self.t_count == 0 {
            return Err(Error::State("cannot finalize a trace with zero steps".into()));
        }
        let inv_t = S::one() / S::lit(self.t_count as f64);
        let lay = self.layout;
        let block = lay.fan_in * lay.positions;
        for (i, chunk) in self.e_accum.chunks_mut(block).enumerate() {
            let k = self.gain[i % lay.out_channels] * inv_t;
            chunk.iter_mut().for_each(|v| *v = *v * k);
        }
        self.sens_accum.iter_mut().for_each(|v| *v = *v * inv_t);
        self.finalized = true;
        Ok(())
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    /// Time-averaged weight eligibility, laid out `[N, out, fan_in, positions]`.
    pub fn e_mean(&self) -> Result<&[S]> {
        self.check_final()?;
        Ok(&self.e_accum)
    }

    /// Time-averaged bias eligibility `[N, out, positions]`: the estimate of
    /// `∂r/∂b` for every neuron.
    pub fn rate_sensitivity(&self) -> Result<&[S]> {
        self.check_final()?;
        Ok(&self.sens_accum)
    }

    /// Estimate of `∂r/∂(W·x)` per neuron: the bias eligibility times the gain.
    pub fn current_sensitivity(&self) -> Result<Vec<S>> {
        self.check_final()?;
        let lay = self.layout;
        Ok(self
            .sens_accum
            .chunks(lay.positions)
            .enumerate()
            .flat_map(|(i, ch)| {
                let g = self.gain[i % lay.out_channels];
                ch.iter().map(move |&v| v * g)
            })
            .collect())
    }

    fn check_final(&self) -> Result<()> {
        if self.finalized {
            Ok(())
        } else {
            Err(Error::State("eligibility trace not finalized".into()))
        }
    }
}

/// Parameter gradients from `∂L/∂r` and a finalized trace:
/// `∂L/∂W_ij = Σ ∂L/∂r_i · ē_ij` and `∂L/∂b_i = Σ ∂L/∂r_i · ∂r_i/∂b_i`,
/// summed over samples (and positions for shared conv weights).
pub fn approx_grad<S: Scalar>(dl_dr: &[S], trace: &EligibilityTrace<S>) -> Result<(Vec<S>, Vec<S>)> {
    let e = trace.e_mean()?;
    let sens = trace.rate_sensitivity()?;
    let lay = trace.layout;
    if dl_dr.len() != lay.neurons() {
        return Err(Error::Shape(format!(
            "dL/dr has {} entries for {} neurons",
            dl_dr.len(),
            lay.neurons()
        )));
    }
    let (o_n, f_n, p_n) = (lay.out_channels, lay.fan_in, lay.positions);
    let mut gw = vec![S::zero(); o_n * f_n];
    let mut gb = vec![S::zero(); o_n];
    for n in 0..lay.n {
        for o in 0..o_n {
            let g = &dl_dr[(n * o_n + o) * p_n..][..p_n];
            if g.iter().all(|&v| v == S::zero()) {
                continue;
            }
            let sv = &sens[(n * o_n + o) * p_n..][..p_n];
            gb[o] = gb[o] + g.iter().zip(sv).map(|(&a, &b)| a * b).sum::<S>();
            let block = &e[(n * o_n + o) * f_n * p_n..][..f_n * p_n];
            for (f, row) in block.chunks(p_n).enumerate() {
                let dot: S = g.iter().zip(row).map(|(&a, &b)| a * b).sum();
                gw[o * f_n + f] = gw[o * f_n + f] + dot;
            }
        }
    }
    Ok((gw, gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_layout(n: usize, d_in: usize, d_out: usize) -> TraceLayout {
        TraceLayout::for_layer(&LayerSpec::Dense { d_in, d_out }, n)
    }

    #[test]
    fn hand_evaluated_input_trace() {
        let mut tr = EligibilityTrace::<f64>::new(dense_layout(1, 1, 1), vec![1.0]);
        let mut seen = Vec::new();
        for &x in &[1.0, 0.0, 1.0] {
            tr.step(&[x], &[1.0], 0.5).unwrap();
            seen.push(tr.input_trace[0]);
        }
        assert_eq!(seen, vec![1.0, 0.5, 1.25]);
    }

    #[test]
    fn single_step_mean_is_psi_times_x() {
        let mut tr = EligibilityTrace::<f64>::new(dense_layout(1, 3, 2), vec![1.0, 1.0]);
        let x = [0.5, -1.0, 2.0];
        let psi = [0.3, 0.7];
        tr.step(&x, &psi, 0.5).unwrap();
        tr.finalize().unwrap();
        let e = tr.e_mean().unwrap();
        for o in 0..2 {
            for j in 0..3 {
                assert_eq!(e[o * 3 + j], psi[o] * x[j]);
            }
        }
        assert_eq!(tr.rate_sensitivity().unwrap(), &psi);
    }

    #[test]
    fn unfinalized_trace_is_a_state_error() {
        let tr = EligibilityTrace::<f64>::new(dense_layout(1, 2, 1), vec![1.0]);
        assert!(matches!(approx_grad(&[1.0], &tr), Err(Error::State(_))));
        let mut tr = tr;
        assert!(matches!(tr.finalize(), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let mut tr = EligibilityTrace::<f64>::new(dense_layout(2, 2, 2), vec![1.0, 1.0]);
        tr.step(&[1.0, 2.0, 3.0, 4.0], &[0.5, 0.2, 0.1, 0.9], 0.5).unwrap();
        tr.finalize().unwrap();
        let (gw, gb) = approx_grad(&[0.0; 4], &tr).unwrap();
        assert!(gw.iter().chain(&gb).all(|&v| v == 0.0));
    }

    #[test]
    fn lambda_zero_has_no_temporal_mixing() {
        let mut tr = EligibilityTrace::<f64>::new(dense_layout(1, 2, 1), vec![1.0]);
        let xs = [[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]];
        let ps = [0.2, 0.4, 0.8];
        let mut want = [0.0; 2];
        for (x, &p) in xs.iter().zip(&ps) {
            tr.step(x, &[p], 0.0).unwrap();
            assert_eq!(tr.input_trace, x.to_vec());
            want[0] += p * x[0] / 3.0;
            want[1] += p * x[1] / 3.0;
        }
        tr.finalize().unwrap();
        let e = tr.e_mean().unwrap();
        assert!((e[0] - want[0]).abs() < 1e-15 && (e[1] - want[1]).abs() < 1e-15);
    }

    #[test]
    fn gain_scales_weights_but_not_bias() {
        let mut tr = EligibilityTrace::<f64>::new(dense_layout(1, 1, 1), vec![2.0]);
        tr.step(&[3.0], &[0.5], 0.5).unwrap();
        tr.finalize().unwrap();
        let (gw, gb) = approx_grad(&[1.0], &tr).unwrap();
        assert_eq!(gw, vec![3.0]);
        assert_eq!(gb, vec![0.5]);
        assert_eq!(tr.current_sensitivity().unwrap(), vec![1.0]);
    }
}
