//! Synthetic dataset generator. Each vocabulary token owns a fixed random
//! 80-dim template frame; an utterance is a random token string rendered as
//! its templates repeated 4-8 frames each plus Gaussian noise. The mapping
//! is frame-wise separable, so tiny models can learn it quickly.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::frontend::manifest::write_manifest;
use crate::frontend::mel::FeatureSequence;
use crate::frontend::tokenizer::Vocabulary;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_items: usize,
    /// Number of distinct transcript symbols (letters 'a'..); 2..=26.
    pub vocab_size: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    pub n_mels: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_items: 100,
            vocab_size: 12,
            seed: 0,
            noise_sigma: 0.1,
            min_tokens: 3,
            max_tokens: 12,
            min_frames_per_token: 4,
            max_frames_per_token: 8,
            n_mels: 80,
        }
    }
}

impl SynthConfig {
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        letters(self.vocab_size).and_then(Vocabulary::new)
    }
}

fn letters(n: usize) -> Result<Vec<char>> {
    if !(2..=26).contains(&n) {
        return Err(Error::Config(format!(
            "synthetic vocab_size must be in 2..=26, got {n}"
        )));
    }
    Ok((0..n).map(|i| (b'a' + i as u8) as char).collect())
}

/// Generate the dataset under `out_dir` and return the manifest path.
/// Token strings avoid immediate repeats so every utterance admits a CTC
/// alignment even at the maximum subsampling rate.
pub fn synth_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    let chars = letters(cfg.vocab_size)?;
    if cfg.min_tokens == 0 || cfg.min_tokens > cfg.max_tokens {
        return Err(Error::Config("invalid token count range".into()));
    }
    if cfg.min_frames_per_token == 0 || cfg.min_frames_per_token > cfg.max_frames_per_token {
        return Err(Error::Config("invalid frames-per-token range".into()));
    }
    let items_dir = out_dir.join("items");
    std::fs::create_dir_all(&items_dir).map_err(|e| Error::io(&items_dir, e))?;

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    // One fixed template frame per token, drawn before any item.
    let templates: Vec<Vec<f32>> = (0..cfg.vocab_size)
        .map(|_| {
            (0..cfg.n_mels)
                .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
                .collect()
        })
        .collect();

    let mut records = Vec::with_capacity(cfg.n_items);
    for item in 0..cfg.n_items {
        let n_tokens = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
        let mut tokens = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            let choice = loop {
                let c = rng.random_range(0..cfg.vocab_size);
                if tokens.last() != Some(&c) {
                    break c;
                }
            };
            tokens.push(choice);
        }
        let mut frames: Vec<f32> = Vec::new();
        for &tok in &tokens {
            let reps = rng.random_range(cfg.min_frames_per_token..=cfg.max_frames_per_token);
            for _ in 0..reps {
                for m in 0..cfg.n_mels {
                    let noise = rng.sample::<f64, _>(StandardNormal) * cfg.noise_sigma;
                    frames.push(templates[tok][m] + noise as f32);
                }
            }
        }
        let n_frames = frames.len() / cfg.n_mels;
        let features =
            FeatureSequence::new(Tensor::from_vec(vec![n_frames, cfg.n_mels], frames)?)?;
        let rel = format!("items/item_{item:05}.shtn");
        features.save(&out_dir.join(&rel))?;
        let transcript: String = tokens.iter().map(|&t| chars[t]).collect();
        records.push((rel, transcript));
    }

    let manifest = out_dir.join("manifest.tsv");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}
