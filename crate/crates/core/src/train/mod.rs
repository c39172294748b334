//! The training loop: spiking pass, rate graph with auxiliary heads, teacher
//! and losses, trace-approximated backward, SGD.

mod config;
mod metrics;
mod model;
mod run;
mod step;

pub use config::{parse_pairs, valid_keys, DatasetKind, GradMode, ModelKind, TrainConfig, CONFIG_KEYS};
pub use metrics::{read_metrics, write_metrics, write_summary, MetricsRow};
pub use model::Model;
pub use run::{cosine_lr, evaluate, fit, load_datasets, EpochRecord, EvalReport, IterRecord, RunRecord};
pub use step::{compute_grads, sgd_step, train_step, Sgd, StepReport};
