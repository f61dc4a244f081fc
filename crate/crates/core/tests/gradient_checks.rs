#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use common::{block_cases, kernel_cases, TOLERANCE};

fn assert_cases(cases: &[common::GradCase]) {
    let failures: Vec<String> = cases
        .iter()
        .filter(|c| !(c.rel_error < TOLERANCE))
        .map(|c| format!("{}: {:.3e}", c.name, c.rel_error))
        .collect();
    assert!(failures.is_empty(), "gradient mismatches:\n{}", failures.join("\n"));
}

#[test]
fn kernels_match_finite_differences() {
    for seed in [1, 2] {
        let cases = kernel_cases(seed);
        assert!(cases.len() >= 20);
        assert_cases(&cases);
    }
}

#[test]
fn blocks_match_finite_differences() {
    for seed in [3, 4] {
        assert_cases(&block_cases(seed));
    }
}

#[test]
fn relative_error_of_identical_vectors_is_zero() {
    assert_eq!(common::rel_error(&[1.0, -2.0], &[1.0, -2.0]), 0.0);
    assert!((common::rel_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-12);
}
