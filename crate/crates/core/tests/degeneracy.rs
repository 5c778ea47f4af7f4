mod common;

use cla_core::replay::BufferPolicy;
use cla_core::strategies::{run_experiment, RunOutcome, StrategyKind};
use common::bench::Bench;

fn run(
    bench: &Bench,
    kind: StrategyKind,
    omega: f64,
    policy: BufferPolicy,
    b_r: usize,
    seed: u64,
) -> RunOutcome {
    let mut cfg = bench.config(kind, b_r, 2);
    cfg.omega = omega;
    cfg.buffer_policy = policy;
    cfg.buffer_capacity = 30;
    run_experiment(&bench.ctx(), cfg, seed).unwrap()
}

fn assert_same(a: &RunOutcome, b: &RunOutcome, what: &str) {
    assert!(
        a.trainer.nets().theta.bitwise_eq(&b.trainer.nets().theta),
        "{what}: theta differs"
    );
    let bits = |r: &RunOutcome| {
        r.record
            .per_experience
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(a), bits(b), "{what}: accuracy record differs");
    let ssl = |r: &RunOutcome| {
        r.rows
            .iter()
            .map(|t| t.loss_ssl.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(ssl(a), ssl(b), "{what}: ssl loss trace differs");
}

#[test]
fn cla_e_without_alignment_is_fifo_replay() {
    let bench = Bench::tiny();
    for seed in [0, 1] {
        let cla = run(
            &bench,
            StrategyKind::ClaE,
            0.0,
            BufferPolicy::Fifo,
            20,
            seed,
        );
        let er = run(&bench, StrategyKind::Er, 0.0, BufferPolicy::Fifo, 20, seed);
        assert_same(&cla, &er, "cla_e");
    }
}

#[test]
fn cla_r_without_alignment_is_fifo_replay() {
    let bench = Bench::tiny();
    for seed in [0, 1] {
        let cla = run(
            &bench,
            StrategyKind::ClaR,
            0.0,
            BufferPolicy::Fifo,
            20,
            seed,
        );
        let er = run(&bench, StrategyKind::Er, 0.0, BufferPolicy::Fifo, 20, seed);
        assert_same(&cla, &er, "cla_r");
    }
}

#[test]
fn cla_b_without_alignment_is_finetuning() {
    let bench = Bench::tiny();
    for seed in [0, 1] {
        let cla = run(&bench, StrategyKind::ClaB, 0.0, BufferPolicy::Fifo, 0, seed);
        let ft = run(
            &bench,
            StrategyKind::Finetune,
            0.0,
            BufferPolicy::Fifo,
            0,
            seed,
        );
        assert_same(&cla, &ft, "cla_b");
    }
}

#[test]
fn nonzero_alignment_does_change_the_trajectory() {
    let bench = Bench::tiny();
    let cla = run(&bench, StrategyKind::ClaE, 0.3, BufferPolicy::Fifo, 20, 0);
    let er = run(&bench, StrategyKind::Er, 0.0, BufferPolicy::Fifo, 20, 0);
    assert!(!cla
        .trainer
        .nets()
        .theta
        .bitwise_eq(&er.trainer.nets().theta));
}
