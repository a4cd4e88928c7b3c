//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records the forward pass as a flat list of operations over
//! dense `f64` tensors; [`Tape::backward`] replays it in reverse and
//! accumulates adjoints. [`ParameterStore`] owns named trainable tensors
//! together with optimizer state, and [`Graph`] binds the two for one
//! training step. [`gradcheck`] provides the central finite-difference
//! oracle used throughout the test suites.

mod gradcheck;
mod graph;
mod optim;
mod store;
mod tape;

pub use gradcheck::{check_gradients, finite_difference, GradCheckReport};
pub(crate) use store::fnv1a;
pub use graph::Graph;
pub use optim::{optimizer_step, OptimizerKind, OptimizerSettings};
pub use store::{Init, ParameterStore};
pub use tape::{Tape, Value};

use crate::error::{Error, Result};

pub(crate) fn fnv1a_str(s: &str) -> u64 {
    fnv1a(s.as_bytes())
}

/// Dense row-major tensor of `f64` values.
///
/// Shapes are rank 1 or rank 2 throughout this crate; the invariant
/// `shape.iter().product() == data.len()` is enforced by every
/// constructor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    /// Row vector `[1, n]`.
    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
        }
    }

    /// Rank-1 vector `[n]`, the shape used for biases.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 matrix from nested rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when viewed as a matrix (rank-1 tensors are a single row).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => panic!("rank > 2 unsupported"),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
