//! Frame-wise embedding distances: masked mean squared / absolute error.

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Scalar;

fn masked_mean<E: Scalar>(
    tape: &Tape<E>,
    elementwise: Var,
    valid_mask: Option<Var>,
) -> Result<Var> {
    match valid_mask {
        None => tape.mean_all(elementwise),
        Some(mask) => {
            let shape = tape.shape_of(elementwise);
            let mask_shape = tape.shape_of(mask);
            // mask (B, T, 1) against values (B, T, D): each valid position
            // contributes D elements.
            let per_position: usize = shape[mask_shape.len() - 1..].iter().product();
            let valid_positions: f64 = tape
                .value(mask)
                .data()
                .iter()
                .map(|v| v.to_f64c())
                .sum();
            let denom = valid_positions * per_position as f64;
            if denom == 0.0 {
                return Err(Error::Usage("mask selects no valid positions".into()));
            }
            let masked = tape.mul(elementwise, mask)?;
            let total = tape.sum_all(masked)?;
            tape.affine(total, 1.0 / denom, 0.0)
        }
    }
}

fn check_same_shape<E: Scalar>(tape: &Tape<E>, a: Var, b: Var) -> Result<()> {
    let sa = tape.shape_of(a);
    let sb = tape.shape_of(b);
    if sa != sb {
        return Err(Error::Shape(format!(
            "embedding losses need matching shapes, got {sa:?} and {sb:?}"
        )));
    }
    Ok(())
}

/// Mean squared difference over valid (unmasked) positions.
pub fn mse_loss<E: Scalar>(
    tape: &Tape<E>,
    a: Var,
    b: Var,
    valid_mask: Option<Var>,
) -> Result<Var> {
    check_same_shape(tape, a, b)?;
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    masked_mean(tape, sq, valid_mask)
}

/// Mean absolute difference over valid (unmasked) positions.
pub fn mae_loss<E: Scalar>(
    tape: &Tape<E>,
    a: Var,
    b: Var,
    valid_mask: Option<Var>,
) -> Result<Var> {
    check_same_shape(tape, a, b)?;
    let diff = tape.sub(a, b)?;
    let abs = tape.abs(diff)?;
    masked_mean(tape, abs, valid_mask)
}
