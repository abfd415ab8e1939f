//! The three training phases: reference training (CTC for Z epochs),
//! encoder representation learning against a frozen reference (2Z/3 epochs),
//! and CTC finetuning (Z/3 epochs), with AdamW, warmup + exponential decay,
//! and deterministic seeding throughout.

mod optim;
mod phases;
mod runlog;

pub use optim::{clip_grad_norm, lr_at, AdamW, OptimizerState};
pub use phases::{
    finetune, train_encrl, train_reference, FinetuneSetup, SliceSpec, TrainData, TrainOutcome,
};
pub use runlog::{fmt_float, RunLog};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::losses::{EncrlWeights, LossMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Reference,
    Encrl,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Reference => "reference",
            Phase::Encrl => "encrl",
            Phase::Finetune => "finetune",
        }
    }
}

pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub phase: Phase,
    /// Reference epoch budget Z; phase budgets derive from it.
    pub z: usize,
    /// Overrides the derived epoch count when set.
    pub epochs_override: Option<usize>,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    /// Per-step exponential decay after warmup.
    pub decay_gamma: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; None disables.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Representation-learning objective (encrl phase only).
    pub loss_mode: LossMode,
    pub clip_temperature: f64,
    pub loss_weights: EncrlWeights,
    /// SpecAugment settings; None disables augmentation.
    pub spec_augment: Option<crate::frontend::SpecAugmentConfig>,
    pub sort_by_length: bool,
}

impl TrainConfig {
    pub fn defaults(phase: Phase, z: usize, seed: u64) -> Self {
        TrainConfig {
            phase,
            z,
            epochs_override: None,
            batch_size: 64,
            peak_lr: 3e-4,
            warmup_steps: 10000,
            decay_gamma: 0.99995,
            weight_decay: 1e-6,
            grad_clip: Some(5.0),
            seed,
            loss_mode: LossMode::ClipMse,
            clip_temperature: 0.07,
            loss_weights: EncrlWeights::default(),
            spec_augment: None,
            sort_by_length: true,
        }
    }

    /// Derived epoch budget: Z for reference, round(2Z/3) once for
    /// representation learning, round(Z/3) per finetuned model
    /// (round-half-up).
    pub fn epochs(&self) -> usize {
        if let Some(e) = self.epochs_override {
            return e;
        }
        match self.phase {
            Phase::Reference => self.z,
            Phase::Encrl => round_half_up(2.0 * self.z as f64 / 3.0),
            Phase::Finetune => round_half_up(self.z as f64 / 3.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs() == 0 {
            return Err(Error::Config("epoch budget resolves to 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return Err(Error::Config(format!(
                "decay_gamma must be in (0, 1], got {}",
                self.decay_gamma
            )));
        }
        if self.peak_lr <= 0.0 {
            return Err(Error::Config("peak_lr must be > 0".into()));
        }
        if self.clip_temperature <= 0.0 {
            return Err(Error::Config("clip_temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// Independent, reproducible RNG streams for each stochastic component.
pub struct Seeds {
    pub data: ChaCha12Rng,
    pub init: ChaCha12Rng,
    pub dropout: ChaCha12Rng,
    pub specaug: ChaCha12Rng,
}

/// Derive the per-component streams from one global seed.
pub fn set_global_seed(seed: u64) -> Seeds {
    let stream = |tag: u64| {
        ChaCha12Rng::seed_from_u64(
            seed.wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407)
                .wrapping_add(tag),
        )
    };
    Seeds {
        data: stream(1),
        init: stream(2),
        dropout: stream(3),
        specaug: stream(4),
    }
}
