//! Command-line front end: `train`, `eval`, `profile`, `gradcheck` and
//! `stats`, driven by a flat `key=value` config file plus `--set` overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use resd::checkpoint::{load_checkpoint, save_checkpoint};
use resd::distill::{kd_decomposition_check, reliability_stats, KdDecomposition, ReliabilityStats};
use resd::gradcheck::{bptt_suite, op_suite, rate_vs_bptt_t1};
use resd::profiler::{affine_fit, emit_report, measure_cost};
use resd::train::{
    evaluate, fit, load_datasets, parse_pairs, read_metrics, write_metrics, write_summary, GradMode, TrainConfig,
};
use resd::{EncodedBatch, Model};

/// Finite-difference checks pass below this relative error.
pub const GRADCHECK_TOL: f64 = 1e-5;
/// Rate and unrolled gradients must agree to this at T=1.
pub const T1_TOL: f64 = 1e-10;
/// The good/bad split of the distillation loss is exact up to rounding.
pub const DECOMPOSITION_TOL: f64 = 1e-12;

pub const SEED_ENV: &str = "RESD_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "resd",
    version,
    about = "Rate-based spiking network training with self-distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model, writing metrics.csv, checkpoint.json and summary.txt.
    Train(Common),
    /// Per-head test accuracy of a saved checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out>/checkpoint.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Tape size, retained bytes and step time for both gradient modes.
    Profile {
        #[command(flatten)]
        common: Common,
        /// Comma-separated timestep counts.
        #[arg(long, default_value = "1,2,4,8,12")]
        timesteps: String,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Finite-difference and unrolled-graph gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Final-head reliability and the distillation-loss split from a metrics CSV.
    Stats { metrics: PathBuf },
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// `key=value`, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// Why a command stopped.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration; exit code 2.
    Usage(String),
    /// A run that started and failed, including failed checks; exit code 1.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<resd::Error> for CliError {
    fn from(e: resd::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

fn usage(e: resd::Error) -> CliError {
    CliError::Usage(e.to_string())
}

/// Reads a config file and applies `overrides` on top. `RESD_SEED` supplies
/// the seed only when neither source sets one.
pub fn parse_config(path: &Path, overrides: &[String]) -> resd::Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| resd::Error::io(path, e))?;
    let mut pairs = parse_pairs(&text)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| resd::Error::Config(format!("override {o:?} is not key=value")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    if !pairs.iter().any(|(k, _)| k == "seed") {
        if let Ok(seed) = std::env::var(SEED_ENV) {
            pairs.push(("seed".into(), seed));
        }
    }
    TrainConfig::from_pairs(&pairs)
}

fn prepare(common: &Common) -> Result<TrainConfig, CliError> {
    let cfg = parse_config(&common.config, &common.overrides).map_err(usage)?;
    fs::create_dir_all(&common.out).map_err(|e| resd::Error::io(&common.out, e))?;
    Ok(cfg)
}

fn build_model(cfg: &TrainConfig, sample_shape: &[usize], classes: usize) -> resd::Result<Model> {
    Model::build(cfg, sample_shape, classes, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

fn cmd_train(common: &Common) -> Result<String, CliError> {
    let cfg = prepare(common)?;
    let (train, test) = load_datasets::<f64>(&cfg)?;
    let mut model = build_model(&cfg, train.sample_shape(), train.num_classes)?;
    log::info!(
        "training {} parameters over {} samples, {} heads",
        model.param_count(),
        train.len(),
        model.heads()
    );
    let record = fit(&mut model, &cfg, &train, &test)?;
    let out = &common.out;
    fs::write(out.join("config.txt"), cfg.to_text()).map_err(|e| resd::Error::io(out.join("config.txt"), e))?;
    write_metrics(&record, &out.join("metrics.csv"))?;
    write_summary(&record, &cfg, &out.join("summary.txt"))?;
    save_checkpoint(&model, &out.join("checkpoint.json"))?;
    let mut msg = format!(
        "wrote metrics.csv, summary.txt and checkpoint.json to {}\n",
        out.display()
    );
    if let Some(acc) = record.final_test_acc() {
        let _ = writeln!(msg, "final_test_acc={acc}");
    }
    if let Some(r) = &record.reliability {
        let _ = writeln!(msg, "eta={}", r.eta);
    }
    Ok(msg)
}

fn cmd_eval(common: &Common, checkpoint: Option<&Path>) -> Result<String, CliError> {
    let cfg = prepare(common)?;
    let path = checkpoint.map_or_else(|| common.out.join("checkpoint.json"), Path::to_path_buf);
    let model: Model = load_checkpoint(&path)?;
    let (_, test) = load_datasets::<f64>(&cfg)?;
    let report = evaluate(&model, &test, cfg.timesteps, cfg.batch_size)?;
    let mut msg = String::new();
    for (k, a) in report.branch_acc.iter().enumerate() {
        let _ = writeln!(msg, "branch_{}_acc={a}", k + 1);
    }
    let _ = writeln!(msg, "final_acc={}", report.final_acc);
    let _ = writeln!(msg, "samples={}", report.samples);
    let target = common.out.join("eval.txt");
    fs::write(&target, &msg).map_err(|e| resd::Error::io(&target, e))?;
    Ok(msg)
}

fn cmd_profile(common: &Common, timesteps: &str, reps: usize) -> Result<String, CliError> {
    let cfg = prepare(common)?;
    let ts: Vec<usize> = timesteps
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--timesteps expects integers, got {timesteps:?}")))?;
    if ts.is_empty() || ts.contains(&0) {
        return Err(CliError::Usage("--timesteps needs positive values".into()));
    }
    let (train, _) = load_datasets::<f64>(&cfg)?;
    let model = build_model(&cfg, train.sample_shape(), train.num_classes)?;
    let idx: Vec<usize> = (0..cfg.batch_size.min(train.len())).collect();
    let (x, y) = train.gather(&idx)?;
    let batch = EncodedBatch::direct(&x, y, 1)?;
    let mut msg = String::from("mode,T,tape_nodes,retained_bytes,sec_per_batch\n");
    for mode in [GradMode::Rate, GradMode::Bptt] {
        let mut nodes = Vec::new();
        for &t in &ts {
            let r = measure_cost(&model, &batch, &cfg, mode, t, reps)?;
            emit_report(&r, &common.out.join(format!("cost_{}_T{t}.csv", mode.as_str())))?;
            let _ = writeln!(
                msg,
                "{},{},{},{},{}",
                mode.as_str(),
                t,
                r.tape_nodes,
                r.retained_bytes,
                r.sec_per_batch
            );
            nodes.push(r.tape_nodes as f64);
        }
        if ts.len() >= 2 {
            let x: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
            let (_, slope, r2) = affine_fit(&x, &nodes);
            let _ = writeln!(msg, "# {} nodes vs T: slope={slope} r2={r2}", mode.as_str());
        }
    }
    Ok(msg)
}

fn cmd_gradcheck(seed: u64) -> Result<String, CliError> {
    let mut msg = String::new();
    let mut worst = 0.0f64;
    for r in op_suite(seed)?.into_iter().chain(bptt_suite(seed)?) {
        let _ = writeln!(
            msg,
            "{:<28} max_rel_err={:.3e} checked={}",
            r.name, r.max_rel_err, r.checked
        );
        worst = worst.max(r.max_rel_err);
    }
    let t1 = rate_vs_bptt_t1(seed, 32)?;
    let _ = writeln!(msg, "rate_vs_bptt_T1 max_abs_diff={t1:.3e}");
    let _ = writeln!(msg, "max_rel_err={worst:.3e}");
    if worst >= GRADCHECK_TOL || t1 > T1_TOL {
        return Err(CliError::Failed(format!(
            "{msg}gradient check failed: max_rel_err={worst:.3e} (limit {GRADCHECK_TOL:e}), T=1 diff={t1:.3e} (limit {T1_TOL:e})"
        )));
    }
    Ok(msg)
}

/// What `stats` derives from a metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsOutcome {
    pub reliability: ReliabilityStats<f64>,
    pub decomposition: KdDecomposition<f64>,
}

/// Replays per-head losses: the final head's reliability over iterations,
/// and the split of the distillation losses into pairs where the final head
/// had the lower (good teacher) or higher (bad teacher) cross-entropy.
pub fn replay_stats(metrics: &Path) -> resd::Result<StatsOutcome> {
    let rows = read_metrics(metrics)?;
    let ce: Vec<Vec<f64>> = rows.iter().map(|r| r.ce.clone()).collect();
    let reliability = reliability_stats(&ce)?;
    let mut kd = Vec::new();
    let mut good = Vec::new();
    for r in &rows {
        let last = *r.ce.last().expect("reliability_stats checked the head count");
        if r.kd.len() + 1 != r.ce.len() {
            return Err(resd::Error::Format {
                offset: r.iter as u64,
                msg: format!(
                    "iteration {}: {} ce columns but {} kd columns",
                    r.iter,
                    r.ce.len(),
                    r.kd.len()
                ),
            });
        }
        for (k, &v) in r.kd.iter().enumerate() {
            kd.push(v);
            good.push(last <= r.ce[k]);
        }
    }
    let decomposition = kd_decomposition_check(&kd, &good)?;
    Ok(StatsOutcome {
        reliability,
        decomposition,
    })
}

fn cmd_stats(metrics: &Path) -> Result<String, CliError> {
    let s = replay_stats(metrics)?;
    let d = &s.decomposition;
    let mut msg = String::new();
    let _ = writeln!(msg, "iterations={}", s.reliability.delta.len());
    let _ = writeln!(msg, "eta={}", s.reliability.eta);
    let _ = writeln!(msg, "eta_hat={}", d.eta_hat);
    let _ = writeln!(msg, "kd_mean={}", d.lhs);
    let _ = writeln!(msg, "kd_split={}", d.rhs);
    let _ = writeln!(msg, "abs_diff={:e}", d.abs_diff);
    if d.abs_diff > DECOMPOSITION_TOL {
        return Err(CliError::Failed(format!(
            "{msg}decomposition mismatch above {DECOMPOSITION_TOL:e}"
        )));
    }
    Ok(msg)
}

fn dispatch(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Train(c) => cmd_train(&c),
        Command::Eval { common, checkpoint } => cmd_eval(&common, checkpoint.as_deref()),
        Command::Profile {
            common,
            timesteps,
            reps,
        } => cmd_profile(&common, &timesteps, reps),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Stats { metrics } => cmd_stats(&metrics),
    }
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code: 0 on success, 1 when a run or check fails, 2 on usage errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(msg) => {
            print!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("usage: resd <train|eval|profile|gradcheck|stats> --help");
            }
            e.exit_code()
        }
    }
}
