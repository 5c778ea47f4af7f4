//! Experiment cells (strategy × seed) run sequentially and on the rayon pool.
//! Without the `parallel` feature both arms take the sequential path.

use std::hint::black_box;

use cla_core::evaluation::ProbeConfig;
use cla_core::networks::NetworkConfig;
use cla_core::par::{map_ordered, Execution};
use cla_core::strategies::{run_experiment, ProbeData, RunContext, StrategyConfig, StrategyKind};
use cla_core::stream::{make_synthetic, split_class_incremental, StreamPlan};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn cells(c: &mut Criterion) {
    let dataset = make_synthetic(6, 40, 12, 6.0, 0).unwrap();
    let split = split_class_incremental(&dataset, 3, 0).unwrap();
    let plan = StreamPlan::new(&split, 10, 1, true).unwrap();
    let probe = ProbeConfig::default();
    let probe_data = ProbeData::new(&dataset, &split);
    let ctx = RunContext {
        dataset: &dataset,
        plan: &plan,
        probe: &probe,
        probe_data: &probe_data,
        record_wall_time: false,
    };
    let network = NetworkConfig {
        input_dim: 12,
        encoder_widths: vec![32, 32],
        projector_dim: 16,
        predictor_hidden: 8,
        align_hidden: 16,
    };
    let grid: Vec<(StrategyKind, u64)> = [
        StrategyKind::Finetune,
        StrategyKind::Er,
        StrategyKind::ClaE,
        StrategyKind::ClaR,
    ]
    .into_iter()
    .flat_map(|k| (0..2).map(move |s| (k, s)))
    .collect();

    let mut group = c.benchmark_group("cells");
    group.sample_size(10);
    for execution in [Execution::Sequential, Execution::Parallel] {
        group.bench_with_input(
            BenchmarkId::new(format!("{execution:?}").to_lowercase(), grid.len()),
            &execution,
            |b, &execution| {
                b.iter(|| {
                    let accs = map_ordered(grid.clone(), execution, 0, |(kind, seed)| {
                        let b_r = if kind.replays_rows() { 20 } else { 0 };
                        let mut cfg = StrategyConfig::new(kind, 10, b_r, 1);
                        cfg.network = network.clone();
                        run_experiment(&ctx, cfg, seed).unwrap().avg_acc
                    });
                    black_box(accs)
                })
            },
        );
    }
    group.finish();
}

criterion_group!(benches, cells);
criterion_main!(benches);
