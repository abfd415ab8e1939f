//! Transcription scoring: Levenshtein edit distance with a deterministic
//! substitution/deletion/insertion decomposition, pooled corpus WER, and
//! end-to-end model evaluation.

use crate::error::{Error, Result};
use crate::frontend::{load_items, make_batches, ManifestEntry, MelConfig, Vocabulary};
use crate::losses::ctc_greedy_decode;
use crate::model::{ForwardCtx, Model};
use crate::tensor::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditCounts {
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

/// Unit-cost Levenshtein distance with a backtrace that prefers substitution
/// over deletion over insertion on ties, so the S/I/D split is deterministic.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let n = reference.len();
    let m = hypothesis.len();
    let mut d = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        d[idx(i, 0)] = i;
    }
    for j in 0..=m {
        d[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[idx(i, j)] = (d[idx(i - 1, j - 1)] + cost)
                .min(d[idx(i - 1, j)] + 1)
                .min(d[idx(i, j - 1)] + 1);
        }
    }

    let (mut i, mut j) = (n, m);
    let (mut subs, mut ins, mut dels) = (0usize, 0usize, 0usize);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[idx(i, j)] == d[idx(i - 1, j - 1)] + cost {
                subs += cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[idx(i, j)] == d[idx(i - 1, j)] + 1 {
            dels += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    EditCounts {
        distance: d[idx(n, m)],
        substitutions: subs,
        insertions: ins,
        deletions: dels,
    }
}

/// Scoring granularity: whitespace words for text, single tokens for the
/// synthetic corpus (whose transcripts carry no whitespace).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreUnit {
    Word,
    Token,
}

impl ScoreUnit {
    pub fn split(self, text: &str) -> Vec<String> {
        match self {
            ScoreUnit::Word => text.split_whitespace().map(str::to_string).collect(),
            ScoreUnit::Token => text.chars().map(|c| c.to_string()).collect(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScoreUnit::Word => "word",
            ScoreUnit::Token => "token",
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorstEntry {
    pub index: usize,
    pub wer: f64,
    pub reference: String,
    pub hypothesis: String,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub wer: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_words: usize,
    pub n_utterances: usize,
    pub unit: &'static str,
    pub worst: Vec<WorstEntry>,
    pub param_count: Option<usize>,
}

const WORST_K: usize = 5;

/// Pooled corpus WER: error counts summed over all pairs and divided by the
/// total reference word count (not a mean of per-utterance rates).
pub fn corpus_wer(pairs: &[(Vec<String>, Vec<String>)]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Usage("corpus_wer needs at least one utterance".into()));
    }
    let mut subs = 0;
    let mut ins = 0;
    let mut dels = 0;
    let mut total_ref = 0;
    let mut per_utt: Vec<(usize, f64, &(Vec<String>, Vec<String>))> = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        let counts = edit_distance(&pair.0, &pair.1);
        subs += counts.substitutions;
        ins += counts.insertions;
        dels += counts.deletions;
        total_ref += pair.0.len();
        let utt_wer = if pair.0.is_empty() {
            if counts.distance == 0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            counts.distance as f64 / pair.0.len() as f64
        };
        per_utt.push((i, utt_wer, pair));
    }
    let errors = subs + ins + dels;
    let wer = if total_ref == 0 {
        if errors == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        errors as f64 / total_ref as f64
    };

    per_utt.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let worst = per_utt
        .iter()
        .take(WORST_K)
        .map(|(i, w, pair)| WorstEntry {
            index: *i,
            wer: *w,
            reference: pair.0.join(" "),
            hypothesis: pair.1.join(" "),
        })
        .collect();

    Ok(EvalReport {
        wer,
        substitutions: subs,
        insertions: ins,
        deletions: dels,
        ref_words: total_ref,
        n_utterances: pairs.len(),
        unit: "word",
        worst,
        param_count: None,
    })
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// None picks Word when any transcript contains whitespace, else Token.
    pub unit: Option<ScoreUnit>,
    pub mel: MelConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            batch_size: 32,
            unit: None,
            mel: MelConfig::default(),
        }
    }
}

/// Greedy-decode every utterance in manifest order and score against the
/// transcripts. Deterministic: eval mode, no dropout, no augmentation.
pub fn evaluate(
    model: &Model<f32>,
    vocab: &Vocabulary,
    entries: &[ManifestEntry],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if entries.is_empty() {
        return Err(Error::Usage("evaluate needs a non-empty manifest".into()));
    }
    for e in entries {
        if let Err(err) = vocab.tokenize(&e.transcript) {
            return Err(Error::Config(format!(
                "manifest transcript does not fit the checkpoint vocabulary: {err}"
            )));
        }
    }
    let items = load_items(entries, vocab, &opts.mel)?;
    evaluate_items(model, vocab, &items, opts)
}

/// Score already-loaded utterances (used by the training loops for per-epoch
/// evaluation).
pub fn evaluate_items(
    model: &Model<f32>,
    vocab: &Vocabulary,
    items: &[crate::frontend::LoadedItem],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Usage("evaluate needs at least one utterance".into()));
    }
    if vocab.size() != model.config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary of size {} does not match model vocab_size {}",
            vocab.size(),
            model.config.vocab_size
        )));
    }
    let unit = opts.unit.unwrap_or_else(|| {
        if items.iter().any(|e| e.transcript.contains(char::is_whitespace)) {
            ScoreUnit::Word
        } else {
            ScoreUnit::Token
        }
    });

    let batches = make_batches(items, opts.batch_size, false, None)?;
    let mut hyps: Vec<String> = Vec::with_capacity(items.len());
    for batch in &batches {
        let tape = Tape::new();
        let bound = model.bind(&tape, false)?;
        let enc = model.forward_encoder(
            &tape,
            &bound,
            &batch.features,
            &batch.feature_lengths,
            &mut ForwardCtx::eval(),
        )?;
        let logits = model.forward_classifier(&tape, &bound, enc.hidden)?;
        let log_probs = tape.log_softmax(logits, 2)?;
        let decoded = ctc_greedy_decode(&tape.value_clone(log_probs), &enc.lengths)?;
        for tokens in decoded {
            hyps.push(vocab.detokenize(&tokens)?);
        }
    }

    let pairs: Vec<(Vec<String>, Vec<String>)> = items
        .iter()
        .zip(&hyps)
        .map(|(e, h)| (unit.split(&e.transcript), unit.split(h)))
        .collect();
    let mut report = corpus_wer(&pairs)?;
    report.unit = unit.name();
    report.param_count = Some(model.count_params());
    Ok(report)
}

/// Human-readable report: `key=value` lines plus a `worst:` section.
pub fn format_report(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("unit={}\n", report.unit));
    out.push_str(&format!("utterances={}\n", report.n_utterances));
    out.push_str(&format!("ref_words={}\n", report.ref_words));
    out.push_str(&format!("substitutions={}\n", report.substitutions));
    out.push_str(&format!("insertions={}\n", report.insertions));
    out.push_str(&format!("deletions={}\n", report.deletions));
    out.push_str(&format!("wer={:.6}\n", report.wer));
    if let Some(p) = report.param_count {
        out.push_str(&format!("params={p}\n"));
    }
    out.push_str("worst:\n");
    for w in &report.worst {
        out.push_str(&format!(
            "  wer={:.6}\tidx={}\tref={}\thyp={}\n",
            w.wer, w.index, w.reference, w.hypothesis
        ));
    }
    out.push_str(&summary_line(report));
    out.push('\n');
    out
}

/// Single-line machine-readable summary.
pub fn summary_line(report: &EvalReport) -> String {
    format!(
        "SUMMARY wer={:.6} sub={} ins={} del={} ref_words={} utts={} unit={}{}",
        report.wer,
        report.substitutions,
        report.insertions,
        report.deletions,
        report.ref_words,
        report.n_utterances,
        report.unit,
        report
            .param_count
            .map(|p| format!(" params={p}"))
            .unwrap_or_default()
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Plain recursive oracle, no memoization.
    fn recursive_distance(a: &[u8], b: &[u8]) -> usize {
        match (a.len(), b.len()) {
            (0, m) => m,
            (n, 0) => n,
            _ => {
                let cost = usize::from(a[a.len() - 1] != b[b.len() - 1]);
                let sub = recursive_distance(&a[..a.len() - 1], &b[..b.len() - 1]) + cost;
                let del = recursive_distance(&a[..a.len() - 1], b) + 1;
                let ins = recursive_distance(a, &b[..b.len() - 1]) + 1;
                sub.min(del).min(ins)
            }
        }
    }

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identical_sequences_cost_zero() {
        let c = edit_distance(&[1, 2, 3], &[1, 2, 3]);
        assert_eq!(c.distance, 0);
        assert_eq!((c.substitutions, c.insertions, c.deletions), (0, 0, 0));
    }

    #[test]
    fn kitten_sitting_is_three() {
        let a: Vec<char> = "kitten".chars().collect();
        let b: Vec<char> = "sitting".chars().collect();
        let c = edit_distance(&a, &b);
        assert_eq!(c.distance, 3);
        assert_eq!(c.substitutions + c.insertions + c.deletions, 3);
    }

    #[test]
    fn random_pairs_match_recursive_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..300 {
            let n = rng.random_range(0..=6);
            let m = rng.random_range(0..=6);
            let a: Vec<u8> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let b: Vec<u8> = (0..m).map(|_| rng.random_range(0..3)).collect();
            assert_eq!(edit_distance(&a, &b).distance, recursive_distance(&a, &b));
        }
    }

    #[test]
    fn decomposition_accounts_for_distance() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.random_range(0..=8);
            let m = rng.random_range(0..=8);
            let a: Vec<u8> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let b: Vec<u8> = (0..m).map(|_| rng.random_range(0..3)).collect();
            let c = edit_distance(&a, &b);
            assert_eq!(c.distance, c.substitutions + c.insertions + c.deletions);
        }
    }

    #[test]
    fn distance_is_symmetric_and_triangular() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..200 {
            let mk = |rng: &mut ChaCha12Rng| -> Vec<u8> {
                let n = rng.random_range(0..=8);
                (0..n).map(|_| rng.random_range(0..3)).collect()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let c = mk(&mut rng);
            let dab = edit_distance(&a, &b).distance;
            let dba = edit_distance(&b, &a).distance;
            assert_eq!(dab, dba);
            let dac = edit_distance(&a, &c).distance;
            let dcb = edit_distance(&c, &b).distance;
            assert!(dab <= dac + dcb);
        }
    }

    #[test]
    fn corpus_wer_trivial_cases() {
        let pairs = vec![
            (words("a b c"), words("a b c")),
            (words("d e"), words("d e")),
        ];
        assert_eq!(corpus_wer(&pairs).unwrap().wer, 0.0);

        let pairs = vec![(words("a b c d"), words("a c d"))];
        let r = corpus_wer(&pairs).unwrap();
        assert_eq!(r.wer, 0.25);
        assert_eq!(r.deletions, 1);
    }

    #[test]
    fn pooled_not_mean_of_rates() {
        // 1 error / 4 words and 0 / 1 word -> 1/5, not mean(0.25, 0)
        let pairs = vec![
            (words("a b c d"), words("a b c x")),
            (words("e"), words("e")),
        ];
        let r = corpus_wer(&pairs).unwrap();
        assert!((r.wer - 0.2).abs() < 1e-12);
    }

    #[test]
    fn corpus_wer_invariant_to_order() {
        let pairs = vec![
            (words("a b"), words("a x")),
            (words("c d e"), words("c d")),
            (words("f"), words("f g")),
        ];
        let mut reversed = pairs.clone();
        reversed.reverse();
        let a = corpus_wer(&pairs).unwrap();
        let b = corpus_wer(&reversed).unwrap();
        assert_eq!(a.wer, b.wer);
        assert_eq!(
            (a.substitutions, a.insertions, a.deletions),
            (b.substitutions, b.insertions, b.deletions)
        );
    }

    #[test]
    fn empty_pair_list_is_a_usage_error() {
        assert!(matches!(corpus_wer(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn worst_list_ranks_highest_error_first() {
        let pairs = vec![
            (words("a b c d"), words("a b c d")),
            (words("x y"), words("p q")),
            (words("m n o"), words("m n x")),
        ];
        let r = corpus_wer(&pairs).unwrap();
        assert_eq!(r.worst[0].index, 1);
        assert!((r.worst[0].wer - 1.0).abs() < 1e-12);
    }
}
