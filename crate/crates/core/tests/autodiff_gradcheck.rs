//! Reverse-mode gradients of every primitive against central differences.

mod common;

use common::primitives::{cases, TOL};

fn check_group(group: &str) {
    let selected: Vec<_> = cases().into_iter().filter(|c| c.group == group).collect();
    assert!(!selected.is_empty(), "no cases in {group}");
    for c in selected {
        let err = c.error();
        assert!(err <= TOL, "{}: relative error {err:.3e}", c.name);
    }
}

#[test]
fn matmul_shared_and_batched() {
    check_group("matmul");
}

#[test]
fn broadcasting_arithmetic() {
    check_group("arith");
}

#[test]
fn pointwise_nonlinearities() {
    check_group("pointwise");
}

#[test]
fn row_normalizations() {
    check_group("rows");
}

#[test]
fn dropout_with_fixed_mask() {
    check_group("dropout");
}

#[test]
fn shape_ops() {
    check_group("shape");
}

#[test]
fn reductions() {
    check_group("reduce");
}

#[test]
fn mask_rows_routes_gradients() {
    check_group("mask");
}

#[test]
fn composite_graph() {
    check_group("composite");
}
