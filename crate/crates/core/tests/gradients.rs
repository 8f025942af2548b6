//! Analytic gradients against central finite differences, 64-bit.

mod common;

use common::*;

fn run(name: &str, check: fn(u64) -> f64) {
    for seed in 0..FD_INSTANCES as u64 {
        let err = check(seed);
        assert!(err < FD_TOLERANCE, "{name} instance {seed}: relative error {err:e}");
    }
}

#[test]
fn selu_matches_finite_differences() {
    run("selu", check_selu);
}

#[test]
fn relu_matches_finite_differences() {
    run("relu", check_relu);
}

#[test]
fn batchnorm_matches_finite_differences() {
    run("batchnorm", check_batchnorm);
}

#[test]
fn dense_matches_finite_differences() {
    run("dense", check_dense);
}

#[test]
fn conv_matches_finite_differences() {
    run("conv", check_conv);
}

#[test]
fn softmax_xent_matches_finite_differences() {
    run("softmax-xent", check_softmax_xent);
}

#[test]
fn composed_network_matches_finite_differences() {
    run("network", check_network);
}

#[test]
fn rel_error_conventions() {
    assert_eq!(rel_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    assert!((rel_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    // below the floor the error is absolute, scaled by the floor
    assert!((rel_error(&[1e-9], &[2e-9]) - 1e-4).abs() < 1e-12);
    assert!(rel_error(&[3.0, 4.0], &[3.0, 4.0 + 5e-6]) < 1.1e-6);
}
