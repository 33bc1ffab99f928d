//! Dense arrays with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to its [`Var`] handles.
//! [`Tape::backward`] then sweeps the record in reverse and returns gradients
//! for every leaf that was created with [`Tape::leaf`]. Inputs created with
//! [`Tape::constant`] are skipped during the sweep, so the same network code
//! serves parameter training and input-gradient guidance.

mod array;
pub mod kernels;
mod scalar;
mod tape;

pub use array::Array;
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("expected a scalar output, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
}

pub type Result<T, E = DiffError> = std::result::Result<T, E>;

/// Value and gradient of a scalar function with respect to its input.
pub fn grad_wrt_input<F, G>(x: &Array<F>, f: G) -> Result<(F, Array<F>)>
where
    F: Scalar,
    G: for<'t> FnOnce(&'t Tape<F>, Var<'t, F>) -> Result<Var<'t, F>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&tape, xv)?;
    let value = out.value().item()?;
    let mut grads = tape.backward(out)?;
    Ok((value, grads.take(xv)))
}

/// Value and per-parameter gradients of a scalar function of `params`.
pub fn grad_wrt_params<F, G>(params: &[Array<F>], f: G) -> Result<(F, Vec<Array<F>>)>
where
    F: Scalar,
    G: for<'t> FnOnce(&'t Tape<F>, &[Var<'t, F>]) -> Result<Var<'t, F>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let value = out.value().item()?;
    let mut grads = tape.backward(out)?;
    Ok((value, vars.iter().map(|&v| grads.take(v)).collect()))
}

#[cfg(test)]
mod tests;
