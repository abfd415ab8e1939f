//! Combined representation-learning objective: a feature-alignment term on
//! time-pooled encoder outputs plus a frame-wise distance on classifier
//! embeddings, selectable per the ablation study modes.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{clip_loss, mae_loss, mse_loss};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Clip,
    Mae,
    Mse,
    ClipMae,
    ClipMse,
}

impl LossMode {
    pub const ALL: [LossMode; 5] = [
        LossMode::Clip,
        LossMode::Mae,
        LossMode::Mse,
        LossMode::ClipMae,
        LossMode::ClipMse,
    ];

    pub fn uses_clip(self) -> bool {
        matches!(self, LossMode::Clip | LossMode::ClipMae | LossMode::ClipMse)
    }

    pub fn embed_term(self) -> Option<EmbedTerm> {
        match self {
            LossMode::Clip => None,
            LossMode::Mae | LossMode::ClipMae => Some(EmbedTerm::Mae),
            LossMode::Mse | LossMode::ClipMse => Some(EmbedTerm::Mse),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedTerm {
    Mse,
    Mae,
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "clip" => Ok(LossMode::Clip),
            "mae" => Ok(LossMode::Mae),
            "mse" => Ok(LossMode::Mse),
            "clip+mae" => Ok(LossMode::ClipMae),
            "clip+mse" => Ok(LossMode::ClipMse),
            other => Err(Error::Config(format!(
                "unknown loss mode `{other}` (expected clip, mae, mse, clip+mae or clip+mse)"
            ))),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LossMode::Clip => "clip",
            LossMode::Mae => "mae",
            LossMode::Mse => "mse",
            LossMode::ClipMae => "clip+mae",
            LossMode::ClipMse => "clip+mse",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncrlWeights {
    pub clip: f64,
    pub embed: f64,
}

impl Default for EncrlWeights {
    fn default() -> Self {
        EncrlWeights {
            clip: 1.0,
            embed: 1.0,
        }
    }
}

pub struct EncrlLoss {
    pub total: Var,
    /// (component name, weighted value) in evaluation order; the weighted
    /// values sum to the total.
    pub components: Vec<(&'static str, Var)>,
}

/// Masked mean over time: (B, T, d) -> (B, d), dividing each item by its own
/// valid length.
fn pool_time<E: Scalar>(
    tape: &Tape<E>,
    x: Var,
    pad_mask: Var,
    lengths: &[usize],
) -> Result<Var> {
    let masked = tape.mul(x, pad_mask)?;
    let summed = tape.sum_axis(masked, 1, false)?;
    let inv: Vec<E> = lengths
        .iter()
        .map(|&l| {
            if l == 0 {
                E::zero()
            } else {
                E::from_f64c(1.0 / l as f64)
            }
        })
        .collect();
    let inv = tape.constant(Tensor::from_vec(vec![lengths.len(), 1], inv)?)?;
    tape.mul(summed, inv)
}

/// Combined loss. `e_*` are encoder outputs (B, T', d); `b_*` classifier
/// embeddings (B, T', V); `pad_mask` the (B, T', 1) validity mask matching
/// `lengths`.
#[allow(clippy::too_many_arguments)]
pub fn encrl_loss<E: Scalar>(
    tape: &Tape<E>,
    e_ref: Var,
    e_lw: Var,
    b_ref: Var,
    b_lw: Var,
    pad_mask: Var,
    lengths: &[usize],
    mode: LossMode,
    weights: EncrlWeights,
    temperature: f64,
) -> Result<EncrlLoss> {
    let mut components: Vec<(&'static str, Var)> = Vec::new();
    let mut total: Option<Var> = None;
    let mut push = |tape: &Tape<E>, name: &'static str, value: Var, weight: f64| -> Result<()> {
        let weighted = tape.affine(value, weight, 0.0)?;
        components.push((name, weighted));
        total = Some(match total {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
        Ok(())
    };

    if mode.uses_clip() {
        let ref_pooled = pool_time(tape, e_ref, pad_mask, lengths)?;
        let lw_pooled = pool_time(tape, e_lw, pad_mask, lengths)?;
        let clip = clip_loss(tape, ref_pooled, lw_pooled, temperature)?;
        push(tape, "clip", clip, weights.clip)?;
    }
    match mode.embed_term() {
        Some(EmbedTerm::Mse) => {
            let mse = mse_loss(tape, b_ref, b_lw, Some(pad_mask))?;
            push(tape, "mse", mse, weights.embed)?;
        }
        Some(EmbedTerm::Mae) => {
            let mae = mae_loss(tape, b_ref, b_lw, Some(pad_mask))?;
            push(tape, "mae", mae, weights.embed)?;
        }
        None => {}
    }
    Ok(EncrlLoss {
        total: total.expect("every mode has at least one component"),
        components,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    struct Setup {
        e_ref: Tensor<f64>,
        e_lw: Tensor<f64>,
        b_ref: Tensor<f64>,
        b_lw: Tensor<f64>,
        mask: Tensor<f64>,
        lengths: Vec<usize>,
    }

    fn setup(identical: bool) -> Setup {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let (b, t, d, v) = (3usize, 4usize, 5usize, 4usize);
        let r = |rng: &mut ChaCha12Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let e_ref = Tensor::from_vec(vec![b, t, d], r(&mut rng, b * t * d)).unwrap();
        let b_ref = Tensor::from_vec(vec![b, t, v], r(&mut rng, b * t * v)).unwrap();
        let (e_lw, b_lw) = if identical {
            (e_ref.clone(), b_ref.clone())
        } else {
            (
                Tensor::from_vec(vec![b, t, d], r(&mut rng, b * t * d)).unwrap(),
                Tensor::from_vec(vec![b, t, v], r(&mut rng, b * t * v)).unwrap(),
            )
        };
        let lengths = vec![4, 3, 2];
        let mut mask = Tensor::zeros(vec![b, t, 1]);
        for (bi, &l) in lengths.iter().enumerate() {
            for ti in 0..l {
                mask.data_mut()[bi * t + ti] = 1.0;
            }
        }
        Setup {
            e_ref,
            e_lw,
            b_ref,
            b_lw,
            mask,
            lengths,
        }
    }

    fn run(s: &Setup, mode: LossMode) -> (f64, Vec<(String, f64)>) {
        let tape = Tape::new();
        let e_ref = tape.leaf(s.e_ref.clone(), false).unwrap();
        let e_lw = tape.leaf(s.e_lw.clone(), true).unwrap();
        let b_ref = tape.leaf(s.b_ref.clone(), false).unwrap();
        let b_lw = tape.leaf(s.b_lw.clone(), true).unwrap();
        let mask = tape.constant(s.mask.clone()).unwrap();
        let out = encrl_loss(
            &tape,
            e_ref,
            e_lw,
            b_ref,
            b_lw,
            mask,
            &s.lengths,
            mode,
            EncrlWeights::default(),
            0.07,
        )
        .unwrap();
        let total = tape.item_of(out.total).unwrap();
        let comps = out
            .components
            .iter()
            .map(|(n, v)| (n.to_string(), tape.item_of(*v).unwrap()))
            .collect();
        (total, comps)
    }

    #[test]
    fn identical_models_leave_only_the_clip_term() {
        let s = setup(true);
        let (total, comps) = run(&s, LossMode::ClipMse);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[1].1, 0.0, "mse of identical embeddings");
        assert!((total - comps[0].1).abs() < 1e-12);
    }

    #[test]
    fn mse_mode_equals_mse_loss_exactly() {
        let s = setup(false);
        let (total, _) = run(&s, LossMode::Mse);
        let tape = Tape::new();
        let a = tape.leaf(s.b_ref.clone(), false).unwrap();
        let b = tape.leaf(s.b_lw.clone(), false).unwrap();
        let mask = tape.constant(s.mask.clone()).unwrap();
        let direct = mse_loss(&tape, a, b, Some(mask)).unwrap();
        assert_eq!(total, tape.item_of(direct).unwrap());
    }

    #[test]
    fn component_breakdown_sums_to_total() {
        let s = setup(false);
        for mode in LossMode::ALL {
            let (total, comps) = run(&s, mode);
            let sum: f64 = comps.iter().map(|(_, v)| v).sum();
            assert!((total - sum).abs() < 1e-7, "{mode}: {total} vs {sum}");
        }
    }

    #[test]
    fn mode_strings_round_trip() {
        for mode in LossMode::ALL {
            assert_eq!(mode.to_string().parse::<LossMode>().unwrap(), mode);
        }
        assert!("kl".parse::<LossMode>().is_err());
    }

    #[test]
    fn combined_gradient_matches_finite_differences() {
        use crate::tensor::gradcheck::grad_check;
        let s = setup(false);
        let lengths = s.lengths.clone();
        let mask = s.mask.clone();
        let err = grad_check(
            |tape, vars| {
                let mask = tape.constant(mask.clone())?;
                let out = encrl_loss(
                    tape,
                    vars[0],
                    vars[1],
                    vars[2],
                    vars[3],
                    mask,
                    &lengths,
                    LossMode::ClipMse,
                    EncrlWeights::default(),
                    0.07,
                )?;
                Ok(out.total)
            },
            &[s.e_ref, s.e_lw, s.b_ref, s.b_lw],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "encrl grad err {err}");
    }
}
