//! Padded batching of feature sequences and token targets.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::frontend::manifest::ManifestEntry;
use crate::frontend::mel::{mel_spectrogram, FeatureSequence, MelConfig};
use crate::frontend::tokenizer::Vocabulary;
use crate::frontend::wav::load_wav;
use crate::tensor::Tensor;

/// An utterance ready for batching.
#[derive(Debug, Clone)]
pub struct LoadedItem {
    pub features: FeatureSequence,
    pub tokens: Vec<u32>,
    pub transcript: String,
}

/// Load every manifest entry; `.wav` files go through the mel frontend,
/// anything else is read as a feature tensor file.
pub fn load_items(
    entries: &[ManifestEntry],
    vocab: &Vocabulary,
    mel_cfg: &MelConfig,
) -> Result<Vec<LoadedItem>> {
    entries
        .iter()
        .map(|e| {
            let features = if e.path.extension().is_some_and(|x| x == "wav") {
                mel_spectrogram(&load_wav(&e.path)?, mel_cfg)?
            } else {
                FeatureSequence::load(&e.path)?
            };
            Ok(LoadedItem {
                features,
                tokens: vocab.tokenize(&e.transcript)?,
                transcript: e.transcript.clone(),
            })
        })
        .collect()
}

/// Zero-padded mini-batch. Padding regions are excluded from losses via the
/// recorded per-item lengths.
#[derive(Debug, Clone)]
pub struct Batch {
    /// (B, T_max, n_mels), zero padded.
    pub features: Tensor<f32>,
    pub feature_lengths: Vec<usize>,
    /// (B, L_max) row-major, padded with 0 (blank, excluded by lengths).
    pub targets: Vec<u32>,
    pub target_lengths: Vec<usize>,
    pub l_max: usize,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.feature_lengths.len()
    }

    pub fn t_max(&self) -> usize {
        self.features.dim(1)
    }

    pub fn target_of(&self, item: usize) -> &[u32] {
        &self.targets[item * self.l_max..item * self.l_max + self.target_lengths[item]]
    }
}

pub fn batch_from_items(items: &[&LoadedItem]) -> Result<Batch> {
    let b = items.len();
    if b == 0 {
        return Err(Error::Usage("cannot build an empty batch".into()));
    }
    let n_mels = items[0].features.n_mels();
    if items.iter().any(|i| i.features.n_mels() != n_mels) {
        return Err(Error::Shape("items disagree on mel channel count".into()));
    }
    let t_max = items.iter().map(|i| i.features.n_frames()).max().unwrap();
    let l_max = items.iter().map(|i| i.tokens.len()).max().unwrap_or(0);

    let mut features = Tensor::zeros(vec![b, t_max, n_mels]);
    let mut targets = vec![0u32; b * l_max];
    let mut feature_lengths = Vec::with_capacity(b);
    let mut target_lengths = Vec::with_capacity(b);
    for (bi, item) in items.iter().enumerate() {
        let t = item.features.n_frames();
        let src = item.features.frames().data();
        features.data_mut()[bi * t_max * n_mels..bi * t_max * n_mels + t * n_mels]
            .copy_from_slice(src);
        targets[bi * l_max..bi * l_max + item.tokens.len()].copy_from_slice(&item.tokens);
        feature_lengths.push(t);
        target_lengths.push(item.tokens.len());
    }
    Ok(Batch {
        features,
        feature_lengths,
        targets,
        target_lengths,
        l_max,
    })
}

/// Split items into batches of `batch_size` (final partial batch kept).
///
/// With `sort_by_length` the items are grouped by descending frame count
/// before chunking and the batch order is shuffled; otherwise the item order
/// itself is shuffled. Pass no RNG for deterministic manifest order (eval).
pub fn make_batches(
    items: &[LoadedItem],
    batch_size: usize,
    sort_by_length: bool,
    rng: Option<&mut ChaCha12Rng>,
) -> Result<Vec<Batch>> {
    if items.is_empty() {
        return Err(Error::Data("empty manifest: nothing to batch".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    match (sort_by_length, rng) {
        (true, rng) => {
            order.sort_by_key(|&i| std::cmp::Reverse(items[i].features.n_frames()));
            let mut chunks: Vec<Vec<usize>> =
                order.chunks(batch_size).map(|c| c.to_vec()).collect();
            if let Some(rng) = rng {
                chunks.shuffle(rng);
            }
            order = chunks.into_iter().flatten().collect();
        }
        (false, Some(rng)) => order.shuffle(rng),
        (false, None) => {}
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&LoadedItem> = chunk.iter().map(|&i| &items[i]).collect();
            batch_from_items(&refs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn item(t: usize, tokens: &[u32]) -> LoadedItem {
        LoadedItem {
            features: FeatureSequence::new(Tensor::full(vec![t, 4], 1.0f32)).unwrap(),
            tokens: tokens.to_vec(),
            transcript: String::new(),
        }
    }

    #[test]
    fn ten_items_batch_four_gives_4_4_2() {
        let items: Vec<LoadedItem> = (0..10).map(|i| item(5 + i, &[1, 2])).collect();
        let batches = make_batches(&items, 4, false, None).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.size()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn lengths_match_unpadded_frame_counts() {
        let items = vec![item(3, &[1]), item(7, &[1, 2, 3])];
        let batches = make_batches(&items, 2, false, None).unwrap();
        assert_eq!(batches[0].feature_lengths, vec![3, 7]);
        assert_eq!(batches[0].t_max(), 7);
        assert_eq!(batches[0].target_lengths, vec![1, 3]);
        assert_eq!(batches[0].target_of(1), &[1, 2, 3]);
        // padding rows are zero
        let f = &batches[0].features;
        for t in 3..7 {
            for m in 0..4 {
                assert_eq!(f.data()[(t * 4) + m], 0.0);
            }
        }
    }

    #[test]
    fn same_seed_same_order() {
        let items: Vec<LoadedItem> = (0..17).map(|i| item(4 + i % 5, &[1])).collect();
        let a = make_batches(&items, 4, false, Some(&mut ChaCha12Rng::seed_from_u64(3))).unwrap();
        let b = make_batches(&items, 4, false, Some(&mut ChaCha12Rng::seed_from_u64(3))).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.feature_lengths, y.feature_lengths);
        }
    }

    #[test]
    fn sorted_batches_group_similar_lengths() {
        let items: Vec<LoadedItem> = (0..8).map(|i| item(1 + i, &[1])).collect();
        let batches = make_batches(&items, 4, true, None).unwrap();
        assert_eq!(batches[0].feature_lengths, vec![8, 7, 6, 5]);
        assert_eq!(batches[1].feature_lengths, vec![4, 3, 2, 1]);
    }

    #[test]
    fn empty_manifest_is_a_data_error() {
        assert!(matches!(
            make_batches(&[], 4, false, None),
            Err(Error::Data(_))
        ));
    }
}
