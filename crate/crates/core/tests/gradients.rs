//! Finite-difference checks of every tape primitive and of the full
//! classification loss.

mod common;

use common::gradcheck::{self, PRIMITIVES};

fn primitive(name: &str) {
    let (_, check) = PRIMITIVES.iter().find(|(n, _)| *n == name).unwrap();
    if let Err(e) = gradcheck::run_primitive(*check) {
        panic!("{name}: {e}");
    }
}

#[test]
fn every_primitive_is_covered() {
    assert_eq!(PRIMITIVES.len(), 13);
}

#[test]
fn matmul() {
    primitive("matmul");
}

#[test]
fn matmul_t() {
    primitive("matmul_t");
}

#[test]
fn add() {
    primitive("add");
}

#[test]
fn add_row() {
    primitive("add_row");
}

#[test]
fn gelu() {
    primitive("gelu");
}

#[test]
fn tanh() {
    primitive("tanh");
}

#[test]
fn softmax() {
    primitive("softmax");
}

#[test]
fn layer_norm() {
    primitive("layer_norm");
}

#[test]
fn gather_rows() {
    primitive("gather_rows");
}

#[test]
fn dropout() {
    primitive("dropout");
}

#[test]
fn attention() {
    primitive("attention");
}

#[test]
fn cross_entropy() {
    primitive("cross_entropy");
}

#[test]
fn sum() {
    primitive("sum");
}

#[test]
fn full_model_loss() {
    let worst = gradcheck::full_model().unwrap();
    assert!(worst < gradcheck::TOL);
}
