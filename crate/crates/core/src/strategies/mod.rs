//! Training strategies over an online stream, and the run drivers that bind
//! stream, trainer, probe and budget together.

mod run;
mod trainer;

use serde::{Deserialize, Serialize};

pub use run::{
    continue_iid, continue_iid_with, recorded_final_accuracy, run_experiment, run_iid, IidOutcome,
    ProbeData, RunContext, RunOutcome, RunSession, TraceRow,
};
pub use trainer::{StepTrace, Trainer};

use crate::alignment::{AlignLoss, AlignmentConfig, AlignmentVariant};
use crate::budget::{BudgetSpec, Composition};
use crate::error::{Error, Result};
use crate::networks::NetworkConfig;
use crate::replay::{BufferPolicy, DEFAULT_CAPACITY};
use crate::ssl::SslObjective;
use crate::stream::AugmentationPolicy;

pub const DEFAULT_TAU: f64 = 0.999;
pub const DEFAULT_LUMP_ALPHA: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Finetune,
    Er,
    Lump,
    ClaB,
    ClaE,
    ClaR,
    Cassle,
    CassleR,
    /// Offline multi-epoch SSL on the whole training split.
    Iid,
}

impl StrategyKind {
    pub const STREAMING: [StrategyKind; 8] = [
        StrategyKind::Finetune,
        StrategyKind::Er,
        StrategyKind::Lump,
        StrategyKind::ClaB,
        StrategyKind::ClaE,
        StrategyKind::ClaR,
        StrategyKind::Cassle,
        StrategyKind::CassleR,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Finetune => "finetune",
            StrategyKind::Er => "er",
            StrategyKind::Lump => "lump",
            StrategyKind::ClaB => "cla_b",
            StrategyKind::ClaE => "cla_e",
            StrategyKind::ClaR => "cla_r",
            StrategyKind::Cassle => "cassle",
            StrategyKind::CassleR => "cassle_r",
            StrategyKind::Iid => "iid",
        }
    }

    pub fn composition(self) -> Composition {
        match self {
            StrategyKind::Finetune
            | StrategyKind::Lump
            | StrategyKind::ClaB
            | StrategyKind::Cassle => Composition::Stream,
            StrategyKind::Er
            | StrategyKind::ClaE
            | StrategyKind::ClaR
            | StrategyKind::CassleR
            | StrategyKind::Iid => Composition::StreamPlusReplay,
        }
    }

    /// Replay rows are concatenated to the stream rows.
    pub fn replays_rows(self) -> bool {
        matches!(
            self,
            StrategyKind::Er | StrategyKind::ClaE | StrategyKind::ClaR | StrategyKind::CassleR
        )
    }

    pub fn uses_buffer(self) -> bool {
        self.replays_rows() || self == StrategyKind::Lump
    }

    pub fn alignment_variant(self) -> AlignmentVariant {
        match self {
            StrategyKind::ClaB => AlignmentVariant::ClaB,
            StrategyKind::ClaE => AlignmentVariant::ClaE,
            StrategyKind::ClaR => AlignmentVariant::ClaR,
            StrategyKind::Cassle => AlignmentVariant::Cassle,
            StrategyKind::CassleR => AlignmentVariant::CassleR,
            _ => AlignmentVariant::None,
        }
    }

    pub fn needs_boundaries(self) -> bool {
        self.alignment_variant().needs_boundaries()
    }

    pub fn default_omega(self) -> f64 {
        match self {
            StrategyKind::ClaR | StrategyKind::Cassle | StrategyKind::CassleR => 1.0,
            StrategyKind::ClaE | StrategyKind::ClaB => 0.3,
            _ => 0.0,
        }
    }

    pub fn default_buffer_policy(self) -> BufferPolicy {
        match self {
            StrategyKind::Er | StrategyKind::Lump => BufferPolicy::Reservoir,
            _ => BufferPolicy::Fifo,
        }
    }
}

/// Fully resolved hyperparameters of one strategy cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub label: String,
    pub kind: StrategyKind,
    pub objective: SslObjective,
    pub omega: f64,
    pub buffer_policy: BufferPolicy,
    pub buffer_capacity: usize,
    pub b_s: usize,
    pub b_r: usize,
    pub n_p: usize,
    pub tau: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lump_alpha: f64,
    /// Fixed mixing coefficient instead of a Beta draw.
    pub lump_lambda: Option<f64>,
    pub augmentation: AugmentationPolicy,
    pub network: NetworkConfig,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind, b_s: usize, b_r: usize, n_p: usize) -> Self {
        Self {
            label: kind.name().to_string(),
            kind,
            objective: SslObjective::SimSiam,
            omega: kind.default_omega(),
            buffer_policy: kind.default_buffer_policy(),
            buffer_capacity: DEFAULT_CAPACITY,
            b_s,
            b_r,
            n_p,
            tau: DEFAULT_TAU,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            lump_alpha: DEFAULT_LUMP_ALPHA,
            lump_lambda: None,
            augmentation: AugmentationPolicy::default(),
            network: NetworkConfig::default(),
        }
    }

    pub fn alignment(&self) -> AlignmentConfig {
        AlignmentConfig {
            variant: self.kind.alignment_variant(),
            omega: self.omega,
            align_loss: if self.kind.needs_boundaries() {
                AlignLoss::SslLoss
            } else {
                AlignLoss::NegCosine
            },
        }
    }

    /// Training minibatch size `b`.
    pub fn batch_size(&self) -> usize {
        match self.kind.composition() {
            Composition::Stream => self.b_s,
            Composition::Replay => self.b_r,
            Composition::StreamPlusReplay => self.b_s + self.b_r,
        }
    }

    pub fn budget_spec(&self, n: usize) -> Result<BudgetSpec> {
        BudgetSpec::composed(
            self.objective.n_views(),
            self.b_s as u64,
            if self.kind.composition() == Composition::Stream {
                0
            } else {
                self.b_r as u64
            },
            self.n_p as u64,
            n as u64,
            self.kind.composition(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let fail =
            |key: &str, msg: String| Err(Error::config(format!("{}.{key}", self.label), msg));
        if self.b_s == 0 {
            return fail("b_s", "must be positive".into());
        }
        if self.n_p == 0 {
            return fail("n_p", "must be positive".into());
        }
        if self.kind.replays_rows() && self.b_r == 0 {
            return fail(
                "b_r",
                format!("{} replays rows, b_r must be positive", self.kind.name()),
            );
        }
        if self.buffer_capacity == 0 {
            return fail("buffer_capacity", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return fail("tau", format!("{} outside [0, 1]", self.tau));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail("learning_rate", "must be positive".into());
        }
        if !(self.lump_alpha > 0.0) {
            return fail("lump_alpha", "must be positive".into());
        }
        if let Some(l) = self.lump_lambda {
            if !(0.0..=1.0).contains(&l) {
                return fail("lump_lambda", format!("{l} outside [0, 1]"));
            }
        }
        if self.kind == StrategyKind::Lump && self.buffer_policy == BufferPolicy::MinRed {
            return fail(
                "buffer_policy",
                "lump stores raw samples only; use fifo or reservoir".into(),
            );
        }
        if let SslObjective::SimClr { temperature } = self.objective {
            if !(temperature > 0.0) {
                return fail("objective.temperature", "must be positive".into());
            }
        }
        self.alignment()
            .validate()
            .map_err(|e| Error::config(format!("{}.omega", self.label), e.to_string()))?;
        self.augmentation
            .validate()
            .map_err(|e| Error::config(format!("{}.augmentation", self.label), e.to_string()))?;
        Ok(())
    }
}
