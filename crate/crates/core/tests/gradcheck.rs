mod common;

use common::grad::{composite_checks, op_checks, CheckReport, TOL, TRIALS};

fn assert_all(reports: &[CheckReport]) {
    let mut bad = Vec::new();
    for r in reports {
        println!(
            "{:<30} trials {:>3} resampled {:>3} worst {:.2e}",
            r.name, r.trials, r.resampled, r.worst
        );
        if !r.passed() {
            bad.push(r.name);
        }
    }
    assert!(
        bad.is_empty(),
        "gradient checks above {TOL:e} or under {TRIALS} trials: {bad:?}"
    );
}

#[test]
fn every_op_matches_central_differences() {
    assert_all(&op_checks(TRIALS));
}

#[test]
fn every_composite_loss_matches_central_differences() {
    assert_all(&composite_checks(TRIALS));
}
