//! Datasets, stream plans and strategy configs shared by the suites.

use cla_core::evaluation::ProbeConfig;
use cla_core::networks::NetworkConfig;
use cla_core::strategies::{ProbeData, RunContext, StrategyConfig, StrategyKind};
use cla_core::stream::{
    make_synthetic, split_class_incremental, ClassIncrementalSplit, Dataset, StreamPlan,
};

pub struct Bench {
    pub dataset: Dataset,
    pub split: ClassIncrementalSplit,
    pub plan: StreamPlan,
    pub probe: ProbeConfig,
    pub probe_data: ProbeData,
    pub network: NetworkConfig,
}

impl Bench {
    pub fn new(dataset: Dataset, experiences: usize, b_s: usize, network: NetworkConfig) -> Self {
        let split = split_class_incremental(&dataset, experiences, 0).unwrap();
        let plan = StreamPlan::new(&split, b_s, 1, true).unwrap();
        let probe_data = ProbeData::new(&dataset, &split);
        Self {
            dataset,
            split,
            plan,
            probe: ProbeConfig::default(),
            probe_data,
            network,
        }
    }

    /// 20 Gaussian classes × 100 samples in 32 dimensions, 10 experiences.
    pub fn default_synthetic() -> Self {
        Self::new(
            make_synthetic(20, 100, 32, 6.0, 0).unwrap(),
            10,
            10,
            NetworkConfig::default(),
        )
    }

    /// A few seconds per full run: 4 classes × 30 samples, 2 experiences,
    /// narrow networks.
    pub fn tiny() -> Self {
        Self::new(
            make_synthetic(4, 30, 8, 6.0, 1).unwrap(),
            2,
            10,
            small_network(8),
        )
    }

    pub fn ctx(&self) -> RunContext<'_> {
        RunContext {
            dataset: &self.dataset,
            plan: &self.plan,
            probe: &self.probe,
            probe_data: &self.probe_data,
            record_wall_time: false,
        }
    }

    pub fn train_len(&self) -> usize {
        self.split.train_len()
    }

    pub fn config(&self, kind: StrategyKind, b_r: usize, n_p: usize) -> StrategyConfig {
        let mut c = StrategyConfig::new(kind, self.plan.b_s, b_r, n_p);
        c.network = self.network.clone();
        c
    }
}

pub fn small_network(input_dim: usize) -> NetworkConfig {
    NetworkConfig {
        input_dim,
        encoder_widths: vec![16, 16],
        projector_dim: 8,
        predictor_hidden: 4,
        align_hidden: 8,
    }
}

/// Replay rows each kind uses in the high-budget setting.
pub fn high_cbp_b_r(kind: StrategyKind) -> usize {
    if kind.replays_rows() || kind == StrategyKind::Iid {
        128
    } else {
        0
    }
}
