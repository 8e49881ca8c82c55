mod common;

use common::grad::{check_model, check_op, op_cases};

const SEEDS: u64 = 20;
const TOL: f64 = 1e-5;

#[test]
fn every_op_matches_central_differences() {
    for case in op_cases() {
        for seed in 0..SEEDS {
            let err = check_op(&case, seed);
            assert!(err < TOL, "{} seed {seed}: relative error {err:e}", case.name);
        }
    }
}

#[test]
fn full_model_loss_matches_central_differences() {
    for seed in 0..SEEDS {
        let err = check_model(seed);
        assert!(err < TOL, "seed {seed}: relative error {err:e}");
    }
}
