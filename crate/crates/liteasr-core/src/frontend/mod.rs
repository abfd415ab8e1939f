//! Feature ingestion: WAV decoding, log-mel spectrograms, SpecAugment,
//! character tokenization, batching, and the synthetic dataset generator
//! used for desk-scale experiments.

mod augment;
mod batch;
mod manifest;
mod mel;
mod synth;
mod tokenizer;
mod wav;

pub use augment::{spec_augment, SpecAugmentConfig};
pub use batch::{load_items, make_batches, Batch, LoadedItem};
pub use manifest::{read_manifest, write_manifest, ManifestEntry};
pub use mel::{mel_spectrogram, FeatureSequence, MelConfig};
pub use synth::{synth_dataset, SynthConfig};
pub use tokenizer::{Vocabulary, BLANK_ID};
pub use wav::{load_wav, save_wav, AudioClip};
