//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! The engine covers exactly what the forecasting model needs: matrix
//! products (with a shared-operand batch layout), broadcasting elementwise
//! arithmetic, last-axis concatenation and reduction, and the `sigmoid`,
//! `tanh`, `relu` and `abs` nonlinearities. Everything is `f64`.
//!
//! ```
//! use causalnet::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let p = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = tape.mul(p, p).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(p).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("function value is not finite ({0}) during gradient check")]
    NonFinite(f64),
    #[error("finite-difference step {0} outside [1e-7, 1e-4]")]
    InvalidStep(f64),
}
