use std::fmt::Write as _;
use std::path::Path;

use super::config::TrainConfig;
use super::run::RunRecord;
use crate::error::{Error, Result};

/// The columns the reliability replay needs from one metrics row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub iter: usize,
    /// Per-head cross-entropy, final head last.
    pub ce: Vec<f64>,
    /// Per auxiliary head, distillation loss towards the final head.
    pub kd: Vec<f64>,
}

fn header(heads: usize) -> String {
    let mut h = String::from("epoch,iter,l_ce,l_esd,reg_part,l_total,lr");
    for k in 1..=heads {
        let _ = write!(h, ",ce_{k}");
    }
    for k in 1..heads {
        let _ = write!(h, ",kd_{k}");
    }
    for k in 1..=heads {
        let _ = write!(h, ",acc_{k}");
    }
    h
}

/// One row per iteration. The `acc_*` columns hold test accuracy per head
/// on the last iteration of each epoch and are empty elsewhere. No timing
/// data is written, so identical runs give identical files.
pub fn write_metrics(record: &RunRecord, path: &Path) -> Result<()> {
    let mut out = header(record.heads);
    out.push('\n');
    for (i, r) in record.iterations.iter().enumerate() {
        let l = &r.loss;
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.iter, l.l_ce, l.l_esd, l.l_reg_part, l.l_total, r.lr
        );
        for v in r.head_ce.iter().chain(&r.kd) {
            let _ = write!(out, ",{v}");
        }
        let epoch_end = record.iterations.get(i + 1).is_none_or(|n| n.epoch != r.epoch);
        let acc = record
            .epochs
            .iter()
            .find(|e| e.epoch == r.epoch)
            .filter(|_| epoch_end)
            .map(|e| e.test.per_head());
        for k in 0..record.heads {
            match &acc {
                Some(a) => {
                    let _ = write!(out, ",{}", a[k]);
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text)
}

fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let fmt = |line: usize, msg: String| Error::Format {
        offset: line as u64,
        msg: format!("metrics line {}: {msg}", line + 1),
    };
    let mut lines = text.lines();
    let head: Vec<&str> = lines
        .next()
        .ok_or_else(|| fmt(0, "missing header".into()))?
        .split(',')
        .map(str::trim)
        .collect();
    let col = |name: &str| head.iter().position(|h| *h == name);
    let (epoch_c, iter_c) = match (col("epoch"), col("iter")) {
        (Some(e), Some(i)) => (e, i),
        _ => return Err(fmt(0, "header lacks epoch/iter".into())),
    };
    let numbered = |prefix: &str| {
        let mut v: Vec<(usize, usize)> = head
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.strip_prefix(prefix).and_then(|k| k.parse().ok()).map(|k| (k, i)))
            .collect();
        v.sort_unstable();
        v.into_iter().map(|(_, i)| i).collect::<Vec<_>>()
    };
    let ce_cols = numbered("ce_");
    let kd_cols = numbered("kd_");
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let get = |c: usize| {
            cells
                .get(c)
                .copied()
                .ok_or_else(|| fmt(ln, format!("missing column {c}")))
        };
        let num = |c: usize| -> Result<f64> {
            let s = get(c)?;
            s.parse()
                .map_err(|_| fmt(ln, format!("bad number {s:?} in column {}", head[c])))
        };
        let int = |c: usize| -> Result<usize> {
            let s = get(c)?;
            s.parse()
                .map_err(|_| fmt(ln, format!("bad integer {s:?} in column {}", head[c])))
        };
        rows.push(MetricsRow {
            epoch: int(epoch_c)?,
            iter: int(iter_c)?,
            ce: ce_cols.iter().map(|&c| num(c)).collect::<Result<_>>()?,
            kd: kd_cols.iter().map(|&c| num(c)).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

/// Flat `key=value` run summary.
pub fn write_summary(record: &RunRecord, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "mode={}", cfg.mode.as_str());
    let _ = writeln!(out, "distill_mode={}", cfg.distill_mode.as_str());
    let _ = writeln!(out, "seed={}", cfg.seed);
    let _ = writeln!(out, "T={}", cfg.timesteps);
    let _ = writeln!(out, "epochs={}", record.epochs.len());
    let _ = writeln!(out, "iterations={}", record.iterations.len());
    if let Some(last) = record.epochs.last() {
        let _ = writeln!(out, "final_test_acc={}", last.test.final_acc);
        for (k, a) in last.test.branch_acc.iter().enumerate() {
            let _ = writeln!(out, "branch_{}_test_acc={a}", k + 1);
        }
        if let Some(a) = last.train_acc.last() {
            let _ = writeln!(out, "final_train_acc={a}");
        }
    }
    if let Some(r) = &record.reliability {
        let _ = writeln!(out, "eta={}", r.eta);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
