//! Composite layers built from tape primitives.

use super::params::{ParamBlock, ParamId};
use super::tape::{Mask, Tape, Var};
use crate::error::DiffError;

/// Projections for one multi-head attention layer.
#[derive(Clone, Copy, Debug)]
pub struct MhaParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl MhaParams {
    pub fn init(block: &mut ParamBlock, prefix: &str, d: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            wq: block.add_fan_in(format!("{prefix}.wq"), d, d, rng),
            wk: block.add_fan_in(format!("{prefix}.wk"), d, d, rng),
            wv: block.add_fan_in(format!("{prefix}.wv"), d, d, rng),
            wo: block.add_fan_in(format!("{prefix}.wo"), d, d, rng),
        }
    }
}

/// `Concat(head_1..head_H) W^O` with queries from `xq` and keys/values from `xkv`.
pub fn mha(
    tape: &mut Tape<'_>,
    p: &MhaParams,
    xq: Var,
    xkv: Var,
    mask: Option<&Mask>,
    heads: usize,
) -> Result<Var, DiffError> {
    let (wq, wk, wv, wo) = (tape.param(p.wq), tape.param(p.wk), tape.param(p.wv), tape.param(p.wo));
    let q = tape.matmul(xq, wq)?;
    let k = tape.matmul(xkv, wk)?;
    let v = tape.matmul(xkv, wv)?;
    let z = tape.attention(q, k, v, mask, heads)?;
    tape.matmul(z, wo)
}

/// Parameters of the SiLU-gated feed-forward sublayer.
#[derive(Clone, Copy, Debug)]
pub struct GatedFfParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl GatedFfParams {
    pub fn init(block: &mut ParamBlock, prefix: &str, d: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            w1: block.add_fan_in(format!("{prefix}.w1"), d, d, rng),
            b1: block.add_const(format!("{prefix}.b1"), 1, d, 0.0),
            w2: block.add_fan_in(format!("{prefix}.w2"), d, d, rng),
            b2: block.add_const(format!("{prefix}.b2"), 1, d, 0.0),
        }
    }
}

/// `(x ⊙ σ(x W1 + b1)) ⊙ SiLU(x W2 + b2)`, where `x` is already normalized.
///
/// The gate multiplies the input element-wise; the two branches are then
/// combined element-wise as well, since both are `d`-vectors and `d × d`
/// weights leave no other shape-consistent product.
pub fn gated_ff(tape: &mut Tape<'_>, p: &GatedFfParams, x: Var) -> Result<Var, DiffError> {
    let (w1, b1, w2, b2) = (tape.param(p.w1), tape.param(p.b1), tape.param(p.w2), tape.param(p.b2));
    let a = tape.affine(x, w1, Some(b1))?;
    let gate = tape.sigmoid(a);
    let gated = tape.mul(x, gate)?;
    let c = tape.affine(x, w2, Some(b2))?;
    let act = tape.silu(c);
    tape.mul(gated, act)
}
