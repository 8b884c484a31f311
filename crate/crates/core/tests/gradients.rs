mod common;

use common::{gradient_cases, pipeline_gradient_error, sample_for, toy_config};
use dualvol_core::gradcheck::{check_gradients, FD_STEP};

const TOLERANCE: f64 = 1e-4;

#[test]
fn every_operation_matches_central_differences() {
    let mut failures = Vec::new();
    for c in gradient_cases() {
        let r = check_gradients(&c.f, &c.inputs, FD_STEP, 1).unwrap();
        assert!(r.checked > 0, "{} checked nothing", c.name);
        if r.max_rel_error > TOLERANCE {
            failures.push(format!("{}: {:e}", c.name, r.max_rel_error));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}

#[test]
fn full_pipeline_loss_matches_central_differences() {
    let cfg = toy_config();
    let sample = sample_for(&cfg, 3);
    let (err, checked) = pipeline_gradient_error(&cfg, &sample, 7, FD_STEP).unwrap();
    assert!(checked > 50, "only {checked} coordinates checked");
    assert!(err <= TOLERANCE, "pipeline relative error {err:e}");
}

#[test]
fn pipeline_without_ensemble_block_matches_central_differences() {
    let mut cfg = toy_config();
    cfg.mie.enabled = false;
    let sample = sample_for(&cfg, 4);
    let (err, _) = pipeline_gradient_error(&cfg, &sample, 11, FD_STEP).unwrap();
    assert!(err <= TOLERANCE, "pipeline relative error {err:e}");
}
