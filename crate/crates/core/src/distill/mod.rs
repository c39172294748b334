//! Auxiliary classifiers, reliability-separated teacher aggregation and the
//! distillation losses, plus the diagnostics that motivate them.

mod branch;
mod loss;
mod reliability;
mod teacher;

pub use branch::{branch_complexity, build_branch, Branch, BranchBlock, BranchComplexity, BranchVars};
pub use loss::{
    ce_loss, esd_loss, kl_divergence, objective, objective_on_tape, total_loss, LossBreakdown, Objective, PROB_FLOOR,
};
pub use reliability::{kd_decomposition_check, reliability_stats, KdDecomposition, ReliabilityStats};
pub use teacher::{aggregate_teacher, aggregate_teacher_over, argmax, BranchOutputs, TeacherLabel, TEACHER_EPS};

use serde::{Deserialize, Serialize};

/// Which heads supply the teacher label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DistillMode {
    /// No auxiliary branches; the final head is trained with CE alone.
    Off,
    /// Final head is the only teacher candidate.
    Asd,
    /// Every correct head contributes to the teacher.
    #[default]
    Esd,
}

impl DistillMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DistillMode::Off => "off",
            DistillMode::Asd => "asd",
            DistillMode::Esd => "esd",
        }
    }
}

impl std::str::FromStr for DistillMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(DistillMode::Off),
            "asd" => Ok(DistillMode::Asd),
            "esd" => Ok(DistillMode::Esd),
            _ => Err(format!("expected off|asd|esd, got {s:?}")),
        }
    }
}
