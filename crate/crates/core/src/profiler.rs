//! Training cost per batch: tape size, retained bytes and wall time for the
//! two gradient modes, plus firing-rate statistics.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::data::EncodedBatch;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::snn::SpikeTrain;
use crate::train::{compute_grads, GradMode, Model, Sgd, TrainConfig};

pub const REPORT_HEADER: &str = "mode,T,tape_nodes,retained_bytes,sec_per_batch";
pub const RATES_HEADER: &str = "layer,t,rate";

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub mode: GradMode,
    pub timesteps: usize,
    pub tape_nodes: usize,
    pub retained_bytes: usize,
    /// Median over the timed repetitions.
    pub sec_per_batch: f64,
    /// Mean spike frequency, `[layer][t]`.
    pub firing: Vec<Vec<f64>>,
}

/// Times `k_reps` full training steps on throwaway copies of `model`; the
/// model itself is not modified.
pub fn measure_cost<S: Scalar>(
    model: &Model<S>,
    batch: &EncodedBatch<S>,
    cfg: &TrainConfig,
    mode: GradMode,
    t: usize,
    k_reps: usize,
) -> Result<CostReport> {
    if k_reps < 3 {
        return Err(Error::Config(format!(
            "need at least 3 timed repetitions, got {k_reps}"
        )));
    }
    let batch = batch.with_timesteps(t)?;
    let mut cfg = cfg.clone();
    cfg.mode = mode;
    cfg.timesteps = t;
    let lr = S::lit(cfg.scaled_lr());
    let mut times = Vec::with_capacity(k_reps);
    let mut first = None;
    for _ in 0..k_reps {
        let mut m = model.clone();
        let mut opt = Sgd::new(&m, S::lit(cfg.momentum), S::lit(cfg.weight_decay));
        let start = Instant::now();
        let (grads, rep) = compute_grads(&mut m, &batch, &cfg)?;
        opt.step(&mut m, &grads, lr)?;
        times.push(start.elapsed().as_secs_f64());
        match &first {
            None => first = Some(rep),
            Some(f) if f.tape_nodes != rep.tape_nodes || f.retained_bytes != rep.retained_bytes => {
                return Err(Error::State("tape statistics changed between identical steps".into()));
            }
            Some(_) => {}
        }
    }
    times.sort_by(f64::total_cmp);
    let rep = first.expect("k_reps >= 3");
    Ok(CostReport {
        mode,
        timesteps: t,
        tape_nodes: rep.tape_nodes,
        retained_bytes: rep.retained_bytes,
        sec_per_batch: times[times.len() / 2],
        firing: rep
            .firing
            .iter()
            .map(|l| l.iter().map(|v| v.as_f64()).collect())
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiringStats {
    /// `[layer][t]`.
    pub matrix: Vec<Vec<f64>>,
    pub overall: f64,
}

/// Mean spike frequency over neurons and batch for every layer and step.
pub fn firing_rate_stats<S: Scalar>(trains: &[SpikeTrain<S>]) -> FiringStats {
    let matrix: Vec<Vec<f64>> = trains
        .iter()
        .map(|tr| {
            tr.steps
                .iter()
                .map(|s| {
                    let total: f64 = s.data().iter().map(|v| v.as_f64()).sum();
                    if s.numel() == 0 {
                        0.0
                    } else {
                        total / s.numel() as f64
                    }
                })
                .collect()
        })
        .collect();
    let cells: Vec<f64> = matrix.iter().flatten().copied().collect();
    let overall = if cells.is_empty() {
        0.0
    } else {
        cells.iter().sum::<f64>() / cells.len() as f64
    };
    FiringStats { matrix, overall }
}

/// CSV text of a report: the cost row under [`REPORT_HEADER`], then one
/// `layer,t,rate` row per matrix cell.
pub fn render_report(r: &CostReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{REPORT_HEADER}");
    let _ = writeln!(
        out,
        "{},{},{},{},{}",
        r.mode.as_str(),
        r.timesteps,
        r.tape_nodes,
        r.retained_bytes,
        r.sec_per_batch
    );
    let _ = writeln!(out, "{RATES_HEADER}");
    for (l, row) in r.firing.iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            let _ = writeln!(out, "{l},{t},{v}");
        }
    }
    out
}

pub fn emit_report(r: &CostReport, path: &Path) -> Result<()> {
    std::fs::write(path, render_report(r)).map_err(|e| Error::io(path, e))
}

pub fn parse_report(text: &str) -> Result<CostReport> {
    let fmt = |line: usize, msg: &str| Error::Format {
        offset: line as u64,
        msg: format!("cost report line {}: {msg}", line + 1),
    };
    let lines: Vec<&str> = text.lines().collect();
    if lines.first() != Some(&REPORT_HEADER) {
        return Err(fmt(0, "unexpected header"));
    }
    let cells: Vec<&str> = lines
        .get(1)
        .ok_or_else(|| fmt(1, "missing cost row"))?
        .split(',')
        .collect();
    if cells.len() != 5 {
        return Err(fmt(1, "expected 5 columns"));
    }
    let mode = cells[0].parse().map_err(|e: String| fmt(1, &e))?;
    let int = |s: &str| s.parse::<usize>().map_err(|_| fmt(1, "bad integer"));
    let sec = cells[4].parse::<f64>().map_err(|_| fmt(1, "bad number"))?;
    if lines.get(2) != Some(&RATES_HEADER) {
        return Err(fmt(2, "missing rate block header"));
    }
    let mut firing: Vec<Vec<f64>> = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(3) {
        let c: Vec<&str> = line.split(',').collect();
        let (l, t, v) = match c.as_slice() {
            [l, t, v] => (
                l.parse::<usize>().map_err(|_| fmt(i, "bad layer"))?,
                t.parse::<usize>().map_err(|_| fmt(i, "bad step"))?,
                v.parse::<f64>().map_err(|_| fmt(i, "bad rate"))?,
            ),
            _ => return Err(fmt(i, "expected layer,t,rate")),
        };
        if l == firing.len() {
            firing.push(Vec::new());
        }
        if l + 1 != firing.len() || t != firing[l].len() {
            return Err(fmt(i, "rate rows out of order"));
        }
        firing[l].push(v);
    }
    Ok(CostReport {
        mode,
        timesteps: int(cells[1])?,
        tape_nodes: int(cells[2])?,
        retained_bytes: int(cells[3])?,
        sec_per_batch: sec,
        firing,
    })
}

/// Least-squares fit `y ≈ a + b·x`; returns `(a, b, r²)`.
pub fn affine_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (my - slope * mx, slope, r2)
}
