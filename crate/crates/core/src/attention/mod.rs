//! Point attention operators.
//!
//! Neighborhood attention runs scaled dot-product attention inside each
//! point's neighbor window, with a contextual relative-position bias
//! `b_ij = (x_i W_r) · φ_z(p_i − p_j)`. Coordinates only ever enter through
//! differences, so every operator here is translation invariant.
//!
//! Deformable attention lets each detection query sample point features
//! around learned offsets from its reference point, per head and per scale.

mod deformable;
mod neighborhood;

pub use deformable::{deformable_attention, DeformConfig, ScaleLevel, NUM_SCALES};
pub use neighborhood::{
    attention_bias, neighborhood_attention, patt_block, patt_layer, rel_pos_encode, PattConfig,
};

use crate::autodiff::{ParamSpec, Tape, Var};
use crate::error::Result;

/// Specs for a two-layer perceptron `input -> hidden -> output`.
pub(crate) fn mlp2_specs(prefix: &str, input: usize, hidden: usize, output: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::weight(format!("{prefix}.w1"), input, hidden),
        ParamSpec::zeros(format!("{prefix}.b1"), hidden),
        ParamSpec::weight(format!("{prefix}.w2"), hidden, output),
        ParamSpec::zeros(format!("{prefix}.b2"), output),
    ]
}

pub(crate) fn mlp2(tape: &mut Tape<'_>, prefix: &str, x: Var) -> Result<Var> {
    let w1 = tape.param(&format!("{prefix}.w1"))?;
    let b1 = tape.param(&format!("{prefix}.b1"))?;
    let w2 = tape.param(&format!("{prefix}.w2"))?;
    let b2 = tape.param(&format!("{prefix}.b2"))?;
    tape.mlp2(x, w1, b1, w2, b2)
}

pub(crate) fn linear_specs(prefix: &str, input: usize, output: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::weight(format!("{prefix}.w"), input, output),
        ParamSpec::zeros(format!("{prefix}.b"), output),
    ]
}

pub(crate) fn linear(tape: &mut Tape<'_>, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(&format!("{prefix}.w"))?;
    let b = tape.param(&format!("{prefix}.b"))?;
    tape.linear(x, w, b)
}

pub(crate) fn bn_specs(prefix: &str, dim: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::ones(format!("{prefix}.gamma"), dim),
        ParamSpec::zeros(format!("{prefix}.beta"), dim),
        ParamSpec::buffer(format!("{prefix}.running_mean"), dim, 0.0),
        ParamSpec::buffer(format!("{prefix}.running_var"), dim, 1.0),
    ]
}

pub(crate) fn bn(tape: &mut Tape<'_>, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(&format!("{prefix}.gamma"))?;
    let b = tape.param(&format!("{prefix}.beta"))?;
    tape.batch_norm(x, g, b, prefix)
}
