//! Dense f64 tensors and a replayable op tape for reverse-mode differentiation.
//!
//! Everything downstream (the toy LM, the unlearning objectives, the score
//! machinery) runs on these two types. Shapes are explicit, rank ≤ 2, and the
//! only broadcast anywhere is the row-wise bias add. Every op validates its
//! input shapes and checks its output for non-finite entries, so a diverging
//! run fails loudly at the op that produced the first NaN/Inf instead of
//! corrupting a whole training trace.

mod check;
pub(crate) mod linalg;
mod tape;

pub use check::{grad_check, GradCheckReport, FD_STEP, FD_TOL};
pub use tape::{Gradients, Tape, Var, NEG_MASK};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({lhs:?} vs {rhs:?})")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range (len {len})")]
    OutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> TensorError {
    TensorError::Invalid(msg.into())
}

/// Row-major dense tensor. Rank 0 (scalar), 1 (vector) or 2 (matrix).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if shape.len() > 2 {
            return Err(invalid(format!("rank {} > 2 unsupported", shape.len())));
        }
        if n != data.len() {
            return Err(invalid(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
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

    /// Rows/cols of a matrix; vectors are treated as a single row where needed.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn as_scalar(&self) -> Result<f64, TensorError> {
        if self.numel() == 1 {
            Ok(self.data[0])
        } else {
            Err(invalid(format!("expected scalar, got shape {:?}", self.shape)))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm with a fixed left-to-right summation order.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Dot product over equal-length slices, fixed summation order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Cosine similarity; errors on zero-norm input so silent NaNs can't leak out.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, TensorError> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch {
            op: "cosine",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(invalid("cosine of zero-norm vector"));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Log-sum-exp of a slice with max subtraction; empty input errors.
pub fn logsumexp(xs: &[f64]) -> Result<f64, TensorError> {
    if xs.is_empty() {
        return Err(invalid("logsumexp of empty slice"));
    }
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(TensorError::NonFinite { op: "logsumexp" });
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    Ok(m + s.ln())
}
