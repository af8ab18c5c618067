//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records eagerly evaluated operations; [`Tape::backward`]
//! propagates adjoints to every leaf created with [`Tape::param`].

mod error;
mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use error::AutodiffError;
pub use gradcheck::{
    finite_diff_check, finite_diff_check_with, relative_error, GradCheckOptions, GradCheckReport,
};
pub use optim::{Adam, AdamConfig};
pub use tape::{SparseRows, Tape, Var};
pub use tensor::Tensor;
