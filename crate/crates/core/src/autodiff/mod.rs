//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node sweeps the tape in reverse and leaves
//! an adjoint on every node that depends on a differentiable leaf.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

use thiserror::Error;

pub use gradcheck::{
    check_gradients, check_gradients_with, noise_floor, relative_error, GradCheckReport,
};
pub use graph::{sigmoid, Graph, Mode, Var, LN_FLOOR};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("loss builder is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
}

/// Arithmetic precision of a graph.
///
/// Storage is always `f64`; in `Single` mode every node value and adjoint is
/// rounded to the nearest `f32` as it is produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    Double,
    Single,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::Double => "double",
            Precision::Single => "single",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "double" => Ok(Precision::Double),
            "single" => Ok(Precision::Single),
            other => Err(format!("unknown precision '{other}' (expected double|single)")),
        }
    }
}
