//! Small reverse-mode differentiation kernel for the policy network.

mod gradcheck;
mod layers;
mod params;
mod tape;
mod tensor;

use crate::error::DiffError;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use layers::{gated_ff, mha, GatedFfParams, MhaParams};
pub use params::{AdamConfig, Grads, ParamBlock, ParamEntry, ParamId};
pub use tape::{Adjoints, Mask, Tape, Unary, Var, INSTANCE_NORM_EPS, RMS_EPS};
pub use tensor::Tensor;


/// Builds a fresh tape over `params`, evaluates the scalar produced by
/// `build`, and returns it together with parameter gradients.
pub fn value_and_grad<F>(params: &ParamBlock, build: F) -> Result<(f64, Grads), DiffError>
where
    F: for<'a> FnOnce(&mut Tape<'a>) -> Result<Var, DiffError>,
{
    let mut tape = Tape::with_params(params);
    let loss = build(&mut tape)?;
    tape.status()?;
    let value = tape.value(loss).item();
    let adj = tape.backward(loss)?;
    Ok((value, adj.into_params()))
}

/// Forward-only evaluation of a scalar.
pub fn value_of<F>(params: &ParamBlock, build: F) -> Result<f64, DiffError>
where
    F: for<'a> FnOnce(&mut Tape<'a>) -> Result<Var, DiffError>,
{
    let mut tape = Tape::with_params(params);
    let loss = build(&mut tape)?;
    tape.status()?;
    Ok(tape.value(loss).item())
}
