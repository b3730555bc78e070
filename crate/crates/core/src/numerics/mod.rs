//! Numeric building blocks shared by both networks: dense matrices, seeded
//! random streams, Glorot initialization, dense layers, the optimizer, and a
//! central-difference gradient checker.

mod dense;
mod gradcheck;
mod matrix;
mod optim;
mod rng;

pub use dense::{Activation, AffineGrads, Dense};
pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error};
pub use matrix::{matmul, matmul_at, matmul_bt, Matrix};
pub use optim::{adam_step, OptimizerConfig, OptimizerKind, OptimizerState};
pub use rng::{Rng, RngState};

use crate::error::{Error, Result};

/// Glorot-uniform weights: entries uniform in `[-s, s]`, `s = sqrt(6 / (rows + cols))`.
pub fn init_glorot(rows: usize, cols: usize, rng: &mut Rng) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!(
            "glorot init needs non-zero dimensions, got {rows}x{cols}"
        )));
    }
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform(-s, s)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// A fixed, ordered collection of parameter tensors.
///
/// Gradients use the same type as the parameters they belong to, so the
/// optimizer and the gradient checker can walk both in lockstep.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|t| t.shape()).collect()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

impl Parameters for Vec<Matrix> {
    fn tensors(&self) -> Vec<&Matrix> {
        self.iter().collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.iter_mut().collect()
    }
}
