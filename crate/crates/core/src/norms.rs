//! Norms on vectors and matrices.
//!
//! `|x|` and `|A|` are entrywise maxima, `||A||` is the operator norm induced
//! by the max-norm on vectors (largest absolute row sum).

use nalgebra::{DMatrix, DVector};

/// `|x| = max_i |x_i|`.
pub fn vec_max(x: &DVector<f64>) -> f64 {
    x.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// `|A| = max_ij |a_ij|`.
pub fn mat_max(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// `||A|| = max_i sum_j |a_ij|`.
pub fn op_norm(a: &DMatrix<f64>) -> f64 {
    a.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Sup over a field of matrices of the operator norm.
pub fn sup_op(field: &[DMatrix<f64>]) -> f64 {
    field.iter().map(op_norm).fold(0.0, f64::max)
}

/// Sup over a field of matrices of the entrywise max.
pub fn sup_max(field: &[DMatrix<f64>]) -> f64 {
    field.iter().map(mat_max).fold(0.0, f64::max)
}

/// Sup over a field of vectors of the max-norm.
pub fn sup_vec(field: &[DVector<f64>]) -> f64 {
    field.iter().map(vec_max).fold(0.0, f64::max)
}

/// Operator norm bound of a block matrix from the norms of its blocks:
/// `max_i sum_j ||A_ij||`.
pub fn block_op_bound(block_norms: &[Vec<f64>]) -> f64 {
    block_norms
        .iter()
        .map(|row| row.iter().sum::<f64>())
        .fold(0.0, f64::max)
}
