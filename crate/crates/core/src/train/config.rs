use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distill::DistillMode;
use crate::error::{Error, Result};

/// How spiking-layer gradients are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GradMode {
    /// Graph-free spiking pass, one-step rate graph, eligibility traces.
    #[default]
    Rate,
    /// Full time-unrolled graph.
    Bptt,
}

impl GradMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GradMode::Rate => "rate",
            GradMode::Bptt => "bptt",
        }
    }
}

impl FromStr for GradMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rate" => Ok(GradMode::Rate),
            "bptt" => Ok(GradMode::Bptt),
            _ => Err(format!("expected rate|bptt, got {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "synthetic" => Ok(DatasetKind::Synthetic),
            "cifar10" => Ok(DatasetKind::Cifar10),
            _ => Err(format!("expected synthetic|cifar10, got {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Mlp,
    Conv,
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mlp" => Ok(ModelKind::Mlp),
            "conv" => Ok(ModelKind::Conv),
            _ => Err(format!("expected mlp|conv, got {s:?}")),
        }
    }
}

/// Everything a training run needs. Keys of the text format are listed in
/// [`CONFIG_KEYS`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: DatasetKind,
    pub model: ModelKind,
    pub timesteps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate at `lr_reference_batch`; scaled linearly with batch size.
    pub lr: f64,
    pub lr_reference_batch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta: f64,
    pub eta_reg: f64,
    pub epsilon: f64,
    pub mode: GradMode,
    pub distill_mode: DistillMode,
    pub seed: u64,

    pub hidden: Vec<usize>,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Empty means every spiking layer but the last.
    pub branch_points: Vec<usize>,
    /// 0 keeps the channel count of the attachment layer.
    pub branch_channels: usize,
    pub branch_depth: usize,

    pub lambda: f64,
    pub v_th: f64,
    pub alpha: f64,
    pub detach_reset: bool,
    pub spike_bn: bool,

    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub input_shape: Vec<usize>,
    pub noise: f64,
    pub data_seed: u64,

    pub data_dir: String,
    pub train_limit: usize,
    pub test_limit: usize,

    pub hflip: bool,
    pub crop_pad: usize,
    pub prefetch: usize,
}

/// `(key, default, description)`; a `None` default marks a required key.
pub const CONFIG_KEYS: &[(&str, Option<&str>, &str)] = &[
    ("dataset", None, "synthetic | cifar10"),
    ("model", None, "mlp | conv"),
    ("T", None, "timesteps per sample"),
    ("epochs", None, "training epochs"),
    ("batch_size", None, "samples per batch"),
    ("lr", None, "base learning rate at lr_reference_batch"),
    ("lr_reference_batch", Some("128"), "batch size the base lr refers to"),
    ("momentum", Some("0.9"), "SGD momentum in [0,1)"),
    ("weight_decay", Some("0.0005"), "L2 coefficient added to gradients"),
    ("beta", Some("0.3"), "weight of the distillation term"),
    (
        "eta_reg",
        Some("0.1"),
        "weight of the regularizer on unreliable samples",
    ),
    ("epsilon", Some("1e-8"), "teacher denominator guard"),
    ("mode", Some("rate"), "rate | bptt"),
    ("distill_mode", Some("esd"), "off | asd | esd"),
    ("seed", Some("0"), "initialization and shuffling seed"),
    ("hidden", Some("64,64"), "mlp layer widths"),
    ("channels", Some("16,32,32"), "conv layer channels"),
    ("kernel", Some("3"), "conv kernel size"),
    ("stride", Some("1"), "conv stride"),
    ("pad", Some("1"), "conv zero padding"),
    (
        "branch_points",
        Some(""),
        "layers feeding auxiliary heads; empty = all but last",
    ),
    ("branch_channels", Some("0"), "branch width; 0 = attachment width"),
    ("branch_depth", Some("1"), "blocks per branch"),
    ("lambda", Some("0.5"), "membrane decay in [0,1]"),
    ("v_th", Some("1.0"), "firing threshold"),
    ("alpha", Some("4.0"), "surrogate steepness"),
    (
        "detach_reset",
        Some("true"),
        "exclude the reset path from BPTT gradients",
    ),
    ("spike_bn", Some("true"), "batch norm in spiking layers"),
    ("classes", Some("10"), "synthetic class count"),
    ("train_per_class", Some("50"), "synthetic train samples per class"),
    ("test_per_class", Some("20"), "synthetic test samples per class"),
    ("input_shape", Some("3,8,8"), "synthetic sample shape"),
    ("noise", Some("1.0"), "synthetic within-class spread"),
    ("data_seed", Some("1"), "synthetic generator seed"),
    (
        "data_dir",
        Some("data/cifar-10-batches-bin"),
        "CIFAR-10 binary directory",
    ),
    ("train_limit", Some("0"), "CIFAR-10 train records; 0 = all"),
    ("test_limit", Some("0"), "CIFAR-10 test records; 0 = all"),
    ("hflip", Some("false"), "random horizontal flips"),
    ("crop_pad", Some("0"), "pad-then-crop margin"),
    ("prefetch", Some("2"), "batches buffered ahead of training"),
];

pub fn valid_keys() -> String {
    CONFIG_KEYS.iter().map(|(k, _, _)| *k).collect::<Vec<_>>().join(", ")
}

fn parse<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Key {
        key: key.into(),
        msg: format!("expected {what}, got {value:?}"),
    })
}

fn parse_enum<T: FromStr<Err = String>>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|msg| Error::Key { key: key.into(), msg })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let v = value.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|p| parse(key, p, "comma-separated integers"))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Key {
            key: key.into(),
            msg: format!("expected true|false, got {value:?}"),
        }),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Builds a config from `key=value` pairs applied in order; later pairs
    /// win. Every required key must appear.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Result<Self> {
        let mut cfg = Self::defaults_only();
        for (k, v) in pairs {
            cfg.set(k.as_ref(), v.as_ref())?;
        }
        for (key, default, _) in CONFIG_KEYS {
            if default.is_none() && !pairs.iter().any(|(k, _)| k.as_ref() == *key) {
                return Err(Error::Key {
                    key: (*key).into(),
                    msg: "required key is missing".into(),
                });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// All defaults, with placeholders for the required keys.
    fn defaults_only() -> Self {
        let mut cfg = TrainConfig {
            dataset: DatasetKind::Synthetic,
            model: ModelKind::Mlp,
            timesteps: 4,
            epochs: 40,
            batch_size: 128,
            lr: 0.1,
            lr_reference_batch: 128,
            momentum: 0.9,
            weight_decay: 5e-4,
            beta: 0.3,
            eta_reg: 0.1,
            epsilon: 1e-8,
            mode: GradMode::Rate,
            distill_mode: DistillMode::Esd,
            seed: 0,
            hidden: Vec::new(),
            channels: Vec::new(),
            kernel: 3,
            stride: 1,
            pad: 1,
            branch_points: Vec::new(),
            branch_channels: 0,
            branch_depth: 1,
            lambda: 0.5,
            v_th: 1.0,
            alpha: 4.0,
            detach_reset: true,
            spike_bn: true,
            classes: 10,
            train_per_class: 50,
            test_per_class: 20,
            input_shape: Vec::new(),
            noise: 1.0,
            data_seed: 1,
            data_dir: String::new(),
            train_limit: 0,
            test_limit: 0,
            hflip: false,
            crop_pad: 0,
            prefetch: 2,
        };
        for (key, default, _) in CONFIG_KEYS {
            if let Some(d) = default {
                cfg.set(key, d).expect("built-in defaults parse");
            }
        }
        cfg
    }

    /// The desk-scale recipe: 40 epochs, batch 128, T=4, lr 0.1.
    pub fn desk_default(dataset: DatasetKind, model: ModelKind) -> Self {
        let mut cfg = Self::defaults_only();
        cfg.dataset = dataset;
        cfg.model = model;
        cfg
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = parse_enum(key, value)?,
            "model" => self.model = parse_enum(key, value)?,
            "T" => self.timesteps = parse(key, value, "an integer")?,
            "epochs" => self.epochs = parse(key, value, "an integer")?,
            "batch_size" => self.batch_size = parse(key, value, "an integer")?,
            "lr" => self.lr = parse(key, value, "a number")?,
            "lr_reference_batch" => self.lr_reference_batch = parse(key, value, "an integer")?,
            "momentum" => self.momentum = parse(key, value, "a number")?,
            "weight_decay" => self.weight_decay = parse(key, value, "a number")?,
            "beta" => self.beta = parse(key, value, "a number")?,
            "eta_reg" => self.eta_reg = parse(key, value, "a number")?,
            "epsilon" => self.epsilon = parse(key, value, "a number")?,
            "mode" => self.mode = parse_enum(key, value)?,
            "distill_mode" => self.distill_mode = parse_enum(key, value)?,
            "seed" => self.seed = parse(key, value, "an unsigned integer")?,
            "hidden" => self.hidden = parse_list(key, value)?,
            "channels" => self.channels = parse_list(key, value)?,
            "kernel" => self.kernel = parse(key, value, "an integer")?,
            "stride" => self.stride = parse(key, value, "an integer")?,
            "pad" => self.pad = parse(key, value, "an integer")?,
            "branch_points" => self.branch_points = parse_list(key, value)?,
            "branch_channels" => self.branch_channels = parse(key, value, "an integer")?,
            "branch_depth" => self.branch_depth = parse(key, value, "an integer")?,
            "lambda" => self.lambda = parse(key, value, "a number")?,
            "v_th" => self.v_th = parse(key, value, "a number")?,
            "alpha" => self.alpha = parse(key, value, "a number")?,
            "detach_reset" => self.detach_reset = parse_bool(key, value)?,
            "spike_bn" => self.spike_bn = parse_bool(key, value)?,
            "classes" => self.classes = parse(key, value, "an integer")?,
            "train_per_class" => self.train_per_class = parse(key, value, "an integer")?,
            "test_per_class" => self.test_per_class = parse(key, value, "an integer")?,
            "input_shape" => self.input_shape = parse_list(key, value)?,
            "noise" => self.noise = parse(key, value, "a number")?,
            "data_seed" => self.data_seed = parse(key, value, "an unsigned integer")?,
            "data_dir" => self.data_dir = value.trim().to_string(),
            "train_limit" => self.train_limit = parse(key, value, "an integer")?,
            "test_limit" => self.test_limit = parse(key, value, "an integer")?,
            "hflip" => self.hflip = parse_bool(key, value)?,
            "crop_pad" => self.crop_pad = parse(key, value, "an integer")?,
            "prefetch" => self.prefetch = parse(key, value, "an integer")?,
            _ => {
                return Err(Error::Key {
                    key: key.into(),
                    msg: format!("unknown key; valid keys: {}", valid_keys()),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Key {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if self.timesteps == 0 {
            return bad("T", "must be >= 1");
        }
        if self.batch_size == 0 || self.lr_reference_batch == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must be in [0,1)");
        }
        if !(self.beta >= 0.0) {
            return bad("beta", "must be >= 0");
        }
        if !(self.eta_reg >= 0.0) {
            return bad("eta_reg", "must be >= 0");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", "must be > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda", "must be in [0,1]");
        }
        if !(self.v_th > 0.0) {
            return bad("v_th", "must be > 0");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha", "must be > 0");
        }
        let layers = match self.model {
            ModelKind::Mlp => self.hidden.len(),
            ModelKind::Conv => self.channels.len(),
        };
        if layers == 0 {
            return bad(
                if self.model == ModelKind::Mlp {
                    "hidden"
                } else {
                    "channels"
                },
                "needs at least one layer",
            );
        }
        if self.branch_points.windows(2).any(|w| w[0] >= w[1]) || self.branch_points.iter().any(|&p| p >= layers) {
            return bad("branch_points", "must be strictly increasing layer indices");
        }
        if self.branch_depth == 0 {
            return bad("branch_depth", "must be >= 1");
        }
        if self.dataset == DatasetKind::Synthetic && self.classes < 2 {
            return bad("classes", "must be >= 2");
        }
        Ok(())
    }

    /// Learning rate after batch-size scaling.
    pub fn scaled_lr(&self) -> f64 {
        self.lr * self.batch_size as f64 / self.lr_reference_batch as f64
    }

    pub fn num_layers(&self) -> usize {
        match self.model {
            ModelKind::Mlp => self.hidden.len(),
            ModelKind::Conv => self.channels.len(),
        }
    }

    /// Branch attachment layers actually used: none when distillation is off.
    pub fn effective_branch_points(&self) -> Vec<usize> {
        if self.distill_mode == DistillMode::Off {
            Vec::new()
        } else if self.branch_points.is_empty() {
            (0..self.num_layers().saturating_sub(1)).collect()
        } else {
            self.branch_points.clone()
        }
    }

    /// Canonical text form: every key in table order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _, _) in CONFIG_KEYS {
            let _ = writeln!(out, "{key}={}", self.value_of(key));
        }
        out
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "dataset" => match self.dataset {
                DatasetKind::Synthetic => "synthetic".into(),
                DatasetKind::Cifar10 => "cifar10".into(),
            },
            "model" => match self.model {
                ModelKind::Mlp => "mlp".into(),
                ModelKind::Conv => "conv".into(),
            },
            "T" => self.timesteps.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "lr_reference_batch" => self.lr_reference_batch.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "beta" => self.beta.to_string(),
            "eta_reg" => self.eta_reg.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "mode" => self.mode.as_str().into(),
            "distill_mode" => self.distill_mode.as_str().into(),
            "seed" => self.seed.to_string(),
            "hidden" => join(&self.hidden),
            "channels" => join(&self.channels),
            "kernel" => self.kernel.to_string(),
            "stride" => self.stride.to_string(),
            "pad" => self.pad.to_string(),
            "branch_points" => join(&self.branch_points),
            "branch_channels" => self.branch_channels.to_string(),
            "branch_depth" => self.branch_depth.to_string(),
            "lambda" => self.lambda.to_string(),
            "v_th" => self.v_th.to_string(),
            "alpha" => self.alpha.to_string(),
            "detach_reset" => self.detach_reset.to_string(),
            "spike_bn" => self.spike_bn.to_string(),
            "classes" => self.classes.to_string(),
            "train_per_class" => self.train_per_class.to_string(),
            "test_per_class" => self.test_per_class.to_string(),
            "input_shape" => join(&self.input_shape),
            "noise" => self.noise.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "data_dir" => self.data_dir.clone(),
            "train_limit" => self.train_limit.to_string(),
            "test_limit" => self.test_limit.to_string(),
            "hflip" => self.hflip.to_string(),
            "crop_pad" => self.crop_pad.to_string(),
            "prefetch" => self.prefetch.to_string(),
            _ => unreachable!("key table and accessor agree"),
        }
    }
}

/// Parses flat `key=value` text. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
