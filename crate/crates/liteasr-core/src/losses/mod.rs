//! Objective functions: CTC negative log-likelihood with greedy decoding,
//! symmetric cross-entropy feature alignment, MSE/MAE embedding matching,
//! the combined representation-learning loss, and tempered softmax.

mod clip;
mod ctc;
mod embed;
mod encrl;

pub use clip::clip_loss;
pub use ctc::{ctc_greedy_decode, ctc_loss, CtcOutput};
pub use embed::{mae_loss, mse_loss};
pub use encrl::{encrl_loss, EncrlLoss, EncrlWeights, LossMode};

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Scalar;

/// softmax(z / temperature) along `axis`. Temperature 1 is plain softmax;
/// large temperatures flatten toward uniform.
pub fn tempered_softmax<E: Scalar>(
    tape: &Tape<E>,
    z: Var,
    temperature: f64,
    axis: usize,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "softmax temperature must be > 0, got {temperature}"
        )));
    }
    let scaled = tape.affine(z, 1.0 / temperature, 0.0)?;
    tape.softmax(scaled, axis)
}
