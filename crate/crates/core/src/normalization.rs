//! Reversible per-node instance normalization of a window.

use crate::compute::DenseMatrix;
use crate::error::{contract, Result};

/// Per-node statistics of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub eps: f64,
}

impl NormState {
    /// Multiplier `std + eps` applied on denormalization.
    pub fn scale(&self, node: usize) -> f64 {
        self.std[node] + self.eps
    }
}

/// Standardize each node row with its own mean and population std.
pub fn revin_norm(x: &DenseMatrix, eps: f64) -> Result<(DenseMatrix, NormState)> {
    if !(eps >= 0.0) {
        return Err(contract(format!(
            "revin eps must be non-negative, got {eps}"
        )));
    }
    let (n, t) = (x.rows(), x.cols());
    let mut mean = Vec::with_capacity(n);
    let mut std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let m = row.iter().sum::<f64>() / t as f64;
        let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / t as f64;
        mean.push(m);
        std.push(var.sqrt());
    }
    let state = NormState { mean, std, eps };
    let out = DenseMatrix::from_fn(n, t, |i, j| {
        let s = state.scale(i);
        if s == 0.0 {
            0.0
        } else {
            (x[(i, j)] - state.mean[i]) / s
        }
    });
    Ok((out, state))
}

pub fn revin_denorm(y: &DenseMatrix, state: &NormState) -> Result<DenseMatrix> {
    if y.rows() != state.mean.len() {
        return Err(contract(format!(
            "revin_denorm: {} node rows but state holds {} nodes",
            y.rows(),
            state.mean.len()
        )));
    }
    Ok(DenseMatrix::from_fn(y.rows(), y.cols(), |i, j| {
        y[(i, j)] * state.scale(i) + state.mean[i]
    }))
}
