use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use super::config::{DatasetKind, TrainConfig};
use super::model::Model;
use super::step::{train_step, Sgd};
use crate::autodiff::{kernels::linear_forward, BnMode, Tape};
use crate::data::{batch_plan, gen_synthetic, load_cifar10_pair, AugmentFlags, BatchStream, Dataset, EncodedBatch};
use crate::distill::{argmax, reliability_stats, LossBreakdown, ReliabilityStats};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::snn::{spiking_forward, ForwardOptions};

/// `base·(1 + cos(π·epoch/total))/2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    if total_epochs == 0 {
        return base_lr;
    }
    base_lr * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos()) / 2.0
}

/// Train and test sets for `cfg`. Synthetic data draws both splits from one
/// generator so they share class centres; CIFAR-10 reads `cfg.data_dir`.
pub fn load_datasets<S: Scalar>(cfg: &TrainConfig) -> Result<(Dataset<S>, Dataset<S>)> {
    match cfg.dataset {
        DatasetKind::Synthetic => {
            let per_class = cfg.train_per_class + cfg.test_per_class;
            let all = gen_synthetic::<S>(cfg.classes, per_class, &cfg.input_shape, cfg.noise, cfg.data_seed)?;
            let n_train = cfg.classes * cfg.train_per_class;
            let train_idx: Vec<usize> = (0..n_train).collect();
            let test_idx: Vec<usize> = (n_train..all.len()).collect();
            let (xa, ya) = all.gather(&train_idx)?;
            let (xb, yb) = all.gather(&test_idx)?;
            Ok((Dataset::new(xa, ya, cfg.classes)?, Dataset::new(xb, yb, cfg.classes)?))
        }
        DatasetKind::Cifar10 => {
            let limit = |n: usize| (n > 0).then_some(n);
            load_cifar10_pair(Path::new(&cfg.data_dir), limit(cfg.train_limit), limit(cfg.test_limit))
        }
    }
}

/// Top-1 accuracy of the final head and of each auxiliary head.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub final_acc: f64,
    pub branch_acc: Vec<f64>,
    pub samples: usize,
}

impl EvalReport {
    /// Branch accuracies followed by the final head's.
    pub fn per_head(&self) -> Vec<f64> {
        let mut v = self.branch_acc.clone();
        v.push(self.final_acc);
        v
    }
}

/// Spiking inference over `ds` with frozen statistics. Branches, when the
/// model has them, are scored on the same rates but never influence the
/// final head.
pub fn evaluate<S: Scalar>(model: &Model<S>, ds: &Dataset<S>, t: usize, batch_size: usize) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::EmptyInput("evaluation on an empty dataset".into()));
    }
    let mut m = model.clone();
    let classes = m.net.num_classes;
    let features = m.net.features();
    let mut final_ok = 0usize;
    let mut branch_ok = vec![0usize; m.branches.len()];
    for idx in batch_plan(ds.len(), batch_size, None) {
        let (x, y) = ds.gather(&idx)?;
        let batch = EncodedBatch::direct(&x, y, t)?;
        let pass = spiking_forward(&mut m.net, &batch, ForwardOptions::inference())?;
        let last = pass.rates.last().expect("at least one layer");
        let n = idx.len();
        let mut logits = linear_forward(last.data(), m.net.readout.weight.data(), n, features, classes);
        for row in logits.chunks_mut(classes) {
            row.iter_mut()
                .zip(m.net.readout.bias.data())
                .for_each(|(v, &b)| *v = *v + b);
        }
        for (i, row) in logits.chunks(classes).enumerate() {
            final_ok += usize::from(argmax(row) == batch.labels[i]);
        }
        for (b, (branch, &point)) in m.branches.iter_mut().zip(&m.net.branch_points).enumerate() {
            let mut tape = Tape::new();
            let r = tape.constant(pass.rates[point].clone());
            let out = branch.forward(&mut tape, r, BnMode::Eval)?;
            for (i, row) in tape.value(out.logits).data().chunks(classes).enumerate() {
                branch_ok[b] += usize::from(argmax(row) == batch.labels[i]);
            }
        }
    }
    let total = ds.len() as f64;
    Ok(EvalReport {
        final_acc: final_ok as f64 / total,
        branch_acc: branch_ok.iter().map(|&k| k as f64 / total).collect(),
        samples: ds.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterRecord {
    pub epoch: usize,
    pub iter: usize,
    pub lr: f64,
    pub loss: LossBreakdown<f64>,
    pub head_ce: Vec<f64>,
    pub kd: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Running training accuracy per head, final last.
    pub train_acc: Vec<f64>,
    pub test: EvalReport,
}

/// Append-only history of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub heads: usize,
    pub iterations: Vec<IterRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Final-head reliability over all iterations; `None` without branches.
    pub reliability: Option<ReliabilityStats<f64>>,
}

impl RunRecord {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test.final_acc)
    }
}

fn loss_f64<S: Scalar>(l: &LossBreakdown<S>) -> LossBreakdown<f64> {
    LossBreakdown {
        l_ce: l.l_ce.as_f64(),
        l_esd: l.l_esd.as_f64(),
        l_reg_part: l.l_reg_part.as_f64(),
        l_total: l.l_total.as_f64(),
        beta: l.beta.as_f64(),
        eta_reg: l.eta_reg.as_f64(),
    }
}

/// Trains `model` for `cfg.epochs` epochs, evaluating on `test` after each.
/// Batches are shuffled and encoded on a prefetch thread.
pub fn fit<S: Scalar>(
    model: &mut Model<S>,
    cfg: &TrainConfig,
    train: &Dataset<S>,
    test: &Dataset<S>,
) -> Result<RunRecord> {
    cfg.validate()?;
    let data = Arc::new(train.clone());
    let mut opt = Sgd::new(model, S::lit(cfg.momentum), S::lit(cfg.weight_decay));
    let base_lr = cfg.scaled_lr();
    let aug = AugmentFlags {
        hflip: cfg.hflip,
        crop_pad: cfg.crop_pad,
    };
    let heads = model.heads();
    let mut record = RunRecord {
        heads,
        iterations: Vec::new(),
        epochs: Vec::new(),
        reliability: None,
    };
    let mut iter = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, base_lr);
        let epoch_seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64);
        let plan = batch_plan(data.len(), cfg.batch_size, Some(epoch_seed));
        let stream = BatchStream::spawn(
            data.clone(),
            plan,
            cfg.timesteps,
            aug,
            epoch_seed ^ 0xA5A5,
            cfg.prefetch,
        );
        let mut correct = vec![0usize; heads];
        let mut seen = 0usize;
        for batch in stream {
            let batch = batch?;
            let rep = train_step(model, &mut opt, &batch, cfg, S::lit(lr))?;
            correct.iter_mut().zip(&rep.correct).for_each(|(a, &b)| *a += b);
            seen += rep.batch;
            record.iterations.push(IterRecord {
                epoch,
                iter,
                lr,
                loss: loss_f64(&rep.loss),
                head_ce: rep.head_ce.iter().map(|v| v.as_f64()).collect(),
                kd: rep.kd.iter().map(|v| v.as_f64()).collect(),
            });
            iter += 1;
        }
        let test_report = evaluate(model, test, cfg.timesteps, cfg.batch_size)?;
        let train_acc: Vec<f64> = correct.iter().map(|&c| c as f64 / seen.max(1) as f64).collect();
        log::info!(
            "epoch {epoch}: lr {lr:.5} train acc {:.4} test acc {:.4}",
            train_acc.last().copied().unwrap_or(0.0),
            test_report.final_acc
        );
        record.epochs.push(EpochRecord {
            epoch,
            train_acc,
            test: test_report,
        });
    }
    if heads >= 2 && !record.iterations.is_empty() {
        let losses: Vec<Vec<f64>> = record.iterations.iter().map(|r| r.head_ce.clone()).collect();
        let stats = reliability_stats(&losses)?;
        log::info!("final head not best in a fraction eta = {:.4} of iterations", stats.eta);
        record.reliability = Some(stats);
    }
    Ok(record)
}
