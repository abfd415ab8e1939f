//! Symmetric cross-entropy alignment over a cosine-similarity matrix
//! (bidirectional InfoNCE): matching reference/lightweight pairs sit on the
//! diagonal and are pulled together, off-diagonal pairs pushed apart.

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Small constant inside the row-norm sqrt so zero rows stay finite without
/// disturbing cosine scale invariance for ordinary magnitudes.
const NORM_EPS: f64 = 1e-12;

fn l2_normalize_rows<E: Scalar>(tape: &Tape<E>, x: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let sumsq = tape.sum_axis(sq, 1, true)?;
    let shifted = tape.affine(sumsq, 1.0, NORM_EPS)?;
    let norm = tape.sqrt(shifted)?;
    tape.div(x, norm)
}

/// Mean of the diagonal of -log_softmax(S) along `axis`.
fn diagonal_cross_entropy<E: Scalar>(tape: &Tape<E>, scores: Var, axis: usize) -> Result<Var> {
    let b = tape.shape_of(scores)[0];
    let lp = tape.log_softmax(scores, axis)?;
    let mut eye = Tensor::zeros(vec![b, b]);
    for i in 0..b {
        eye.data_mut()[i * b + i] = E::one();
    }
    let picked = tape.mul(lp, tape.constant(eye)?)?;
    let total = tape.sum_all(picked)?;
    tape.affine(total, -1.0 / b as f64, 0.0)
}

/// Bidirectional symmetric cross-entropy between two (B, d) embedding sets.
/// Rows are L2-normalized internally; `temperature` scales the similarity
/// logits. Gradients reach only the inputs that require them, so a frozen
/// reference contributes no gradient.
pub fn clip_loss<E: Scalar>(
    tape: &Tape<E>,
    e_ref: Var,
    e_lw: Var,
    temperature: f64,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "clip temperature must be > 0, got {temperature}"
        )));
    }
    let sa = tape.shape_of(e_ref);
    let sb = tape.shape_of(e_lw);
    if sa != sb || sa.len() != 2 {
        return Err(Error::Shape(format!(
            "clip_loss expects matching (B, d) inputs, got {sa:?} and {sb:?}"
        )));
    }
    if sa[0] == 0 {
        return Err(Error::Usage("clip_loss on an empty batch".into()));
    }

    let na = l2_normalize_rows(tape, e_ref)?;
    let nb = l2_normalize_rows(tape, e_lw)?;
    let nbt = tape.permute(nb, vec![1, 0])?;
    let scores = tape.matmul(na, nbt)?;
    let scores = tape.affine(scores, 1.0 / temperature, 0.0)?;

    let rows = diagonal_cross_entropy(tape, scores, 1)?;
    let cols = diagonal_cross_entropy(tape, scores, 0)?;
    let sum = tape.add(rows, cols)?;
    tape.affine(sum, 0.5, 0.0)
}
