//! Dense `f64` tensors and a tape-based reverse-mode differentiator.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Calling
//! [`Graph::backward`] on a scalar walks the tape once in reverse and leaves
//! `∂loss/∂t` on every node that requires a gradient. Ops whose derivative has
//! a kink (ReLU, max, clamps) fold their branch decisions into a signature so
//! [`grad_check`] can tell when a finite-difference probe crossed a kink.

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, grad_check_smooth, GradCheckReport, Probe};
pub use graph::{BnStats, Graph, Mode, Var, BN_MOMENTUM, BN_VARIANCE_FLOOR};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    pub requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", values.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: positive extents")
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n]).expect("filled: positive extents")
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(&[n], values).expect("vector: non-empty")
    }

    /// Build a `rows × cols` matrix; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::new(&[r, c], rows.concat())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, g: Option<Vec<f64>>) {
        self.grad = g;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows and columns, reading a vector as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let c = *self.shape.last().unwrap();
                (self.values.len() / c, c)
            }
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        let (_, c) = self.dims2();
        self.values[i * c + j]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.values.clone())
    }
}
