//! CTC loss and greedy decoding.
//!
//! The loss is the negative log-likelihood of the target under the standard
//! blank-interleaved alignment lattice. The forward recursion runs in log
//! space directly on tape primitives (gather, shift-and-concat, logaddexp),
//! so the gradient falls out of the tape instead of hand-coded alpha/beta
//! formulas. A large negative constant stands in for log(0); it survives
//! exp/multiply without producing NaN.

use crate::error::{Error, Result};
use crate::frontend::BLANK_ID;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

const LOG_ZERO: f64 = -1e30;

pub struct CtcOutput {
    /// Per-item negative log-likelihood, shape (B,).
    pub per_item: Var,
    /// Batch mean, scalar.
    pub mean: Var,
}

/// Validate a CTC instance and return per-item (target length, repeat count).
fn validate(
    shape: &[usize],
    input_lengths: &[usize],
    targets: &[u32],
    target_lengths: &[usize],
    l_max: usize,
) -> Result<()> {
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "ctc_loss expects log_probs (B, T, V), got {shape:?}"
        )));
    }
    let (b, t, v) = (shape[0], shape[1], shape[2]);
    if input_lengths.len() != b || target_lengths.len() != b {
        return Err(Error::Shape(format!(
            "ctc_loss got {b} items but {} input lengths / {} target lengths",
            input_lengths.len(),
            target_lengths.len()
        )));
    }
    if targets.len() != b * l_max {
        return Err(Error::Shape(format!(
            "ctc_loss target table has {} entries, expected {}",
            targets.len(),
            b * l_max
        )));
    }
    for bi in 0..b {
        let len = input_lengths[bi];
        if len == 0 || len > t {
            return Err(Error::Data(format!(
                "item {bi}: input length {len} outside 1..={t}"
            )));
        }
        let l = target_lengths[bi];
        if l > l_max {
            return Err(Error::Shape(format!(
                "item {bi}: target length {l} exceeds padded extent {l_max}"
            )));
        }
        let row = &targets[bi * l_max..bi * l_max + l];
        if row.iter().any(|&tok| tok == 0) {
            return Err(Error::Data(format!(
                "item {bi}: targets must not contain the blank token"
            )));
        }
        if row.iter().any(|&tok| tok as usize >= v) {
            return Err(Error::Data(format!(
                "item {bi}: target token outside vocabulary of size {v}"
            )));
        }
        let repeats = row.windows(2).filter(|w| w[0] == w[1]).count();
        if l + repeats > len {
            return Err(Error::Data(format!(
                "item {bi}: target of length {l} with {repeats} repeats needs at least {} frames, input has {len} (loss would be infinite)",
                l + repeats
            )));
        }
    }
    Ok(())
}

/// CTC negative log-likelihood. `log_probs` is (B, T, V) log-softmax output
/// with blank at index 0; `targets` is a (B, l_max) row-major padded table.
pub fn ctc_loss<E: Scalar>(
    tape: &Tape<E>,
    log_probs: Var,
    input_lengths: &[usize],
    targets: &[u32],
    target_lengths: &[usize],
    l_max: usize,
) -> Result<CtcOutput> {
    let shape = tape.shape_of(log_probs);
    validate(&shape, input_lengths, targets, target_lengths, l_max)?;
    let b = shape[0];
    let s_ext = 2 * l_max + 1;
    let log_zero = E::from_f64c(LOG_ZERO);

    // Blank-interleaved extended targets; positions past an item's own
    // lattice reuse the blank label and are pinned dead by the init mask and
    // the forward-only transition structure.
    let mut ext = vec![0u32; b * s_ext];
    for bi in 0..b {
        for li in 0..target_lengths[bi] {
            ext[bi * s_ext + 2 * li + 1] = targets[bi * l_max + li];
        }
    }

    // init: alpha_0 finite only at s=0 (blank) and s=1 (first label).
    let mut init = Tensor::full(vec![b, s_ext], log_zero);
    for bi in 0..b {
        init.data_mut()[bi * s_ext] = E::zero();
        if target_lengths[bi] >= 1 {
            init.data_mut()[bi * s_ext + 1] = E::zero();
        }
    }
    // skip transitions s-2 -> s: only into a label position whose label
    // differs from the one two slots back.
    let mut skip = Tensor::full(vec![b, s_ext], log_zero);
    for bi in 0..b {
        for li in 1..target_lengths[bi] {
            let s = 2 * li + 1;
            if ext[bi * s_ext + s] != ext[bi * s_ext + s - 2] {
                skip.data_mut()[bi * s_ext + s] = E::zero();
            }
        }
    }
    let init_mask = tape.constant(init)?;
    let skip_mask = tape.constant(skip)?;

    // (B, T, S) emission lattice
    let emissions = tape.gather_classes(log_probs, ext, s_ext)?;
    let emit_at = |t: usize| -> Result<Var> {
        let e = tape.slice(emissions, 1, t, 1)?;
        tape.reshape(e, vec![b, s_ext])
    };

    let capture_mask = |t: usize| -> Option<Tensor<E>> {
        if input_lengths.iter().all(|&len| len != t + 1) {
            return None;
        }
        let mut m = Tensor::zeros(vec![b, 1]);
        for bi in 0..b {
            if input_lengths[bi] == t + 1 {
                m.data_mut()[bi] = E::one();
            }
        }
        Some(m)
    };

    let mut alpha = tape.add(emit_at(0)?, init_mask)?;
    let mut finals = tape.constant(Tensor::zeros(vec![b, s_ext]))?;
    if let Some(m) = capture_mask(0) {
        let masked = tape.mul(alpha, tape.constant(m)?)?;
        finals = tape.add(finals, masked)?;
    }

    let fill1 = tape.constant(Tensor::full(vec![b, 1], log_zero))?;
    let fill2 = tape.constant(Tensor::full(vec![b, 2.min(s_ext)], log_zero))?;
    let max_len = input_lengths.iter().copied().max().unwrap_or(1);
    for t in 1..max_len {
        let stay = alpha;
        let advance = {
            let body = tape.slice(alpha, 1, 0, s_ext - 1)?;
            tape.concat(&[fill1, body], 1)?
        };
        let mut cand = tape.logaddexp(stay, advance)?;
        if s_ext >= 2 {
            let body = tape.slice(alpha, 1, 0, s_ext - 2)?;
            let shifted = tape.concat(&[fill2, body], 1)?;
            let gated = tape.add(shifted, skip_mask)?;
            cand = tape.logaddexp(cand, gated)?;
        }
        alpha = tape.add(emit_at(t)?, cand)?;
        if let Some(m) = capture_mask(t) {
            let masked = tape.mul(alpha, tape.constant(m)?)?;
            finals = tape.add(finals, masked)?;
        }
    }

    // Terminal states: last label (s = 2L-1) and trailing blank (s = 2L).
    let mut sel_label = Tensor::zeros(vec![b, s_ext]);
    let mut sel_blank = Tensor::zeros(vec![b, s_ext]);
    let mut label_bias = Tensor::zeros(vec![b]);
    for bi in 0..b {
        let l = target_lengths[bi];
        sel_blank.data_mut()[bi * s_ext + 2 * l] = E::one();
        if l >= 1 {
            sel_label.data_mut()[bi * s_ext + 2 * l - 1] = E::one();
        } else {
            label_bias.data_mut()[bi] = log_zero;
        }
    }
    let term_label = {
        let picked = tape.mul(finals, tape.constant(sel_label)?)?;
        let summed = tape.sum_axis(picked, 1, false)?;
        tape.add(summed, tape.constant(label_bias)?)?
    };
    let term_blank = {
        let picked = tape.mul(finals, tape.constant(sel_blank)?)?;
        tape.sum_axis(picked, 1, false)?
    };
    let log_like = tape.logaddexp(term_label, term_blank)?;
    let per_item = tape.neg(log_like)?;
    let mean = tape.mean_all(per_item)?;
    Ok(CtcOutput { per_item, mean })
}

/// Per-frame argmax, collapse adjacent repeats, drop blanks.
pub fn ctc_greedy_decode<E: Scalar>(
    log_probs: &Tensor<E>,
    input_lengths: &[usize],
) -> Result<Vec<Vec<u32>>> {
    if log_probs.rank() != 3 {
        return Err(Error::Shape(format!(
            "decode expects (B, T, V), got {:?}",
            log_probs.shape()
        )));
    }
    let (b, t, v) = (log_probs.dim(0), log_probs.dim(1), log_probs.dim(2));
    if input_lengths.len() != b {
        return Err(Error::Shape(format!(
            "decode got {b} items but {} lengths",
            input_lengths.len()
        )));
    }
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let len = input_lengths[bi].min(t);
        let mut tokens = Vec::new();
        let mut prev = u32::MAX;
        for ti in 0..len {
            let row = &log_probs.data()[(bi * t + ti) * v..(bi * t + ti + 1) * v];
            let mut best = 0usize;
            for (k, &val) in row.iter().enumerate() {
                if val > row[best] {
                    best = k;
                }
            }
            let tok = best as u32;
            if tok != prev && tok != BLANK_ID {
                tokens.push(tok);
            }
            prev = tok;
        }
        out.push(tokens);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Brute-force oracle: enumerate every alignment path and sum the
    /// probabilities of those collapsing to the target.
    fn enumerate_nll(log_probs: &[f64], t: usize, v: usize, target: &[u32]) -> f64 {
        let mut total = 0.0f64;
        let n_paths = (v as u64).pow(t as u32);
        for code in 0..n_paths {
            let mut c = code;
            let mut path = Vec::with_capacity(t);
            for _ in 0..t {
                path.push((c % v as u64) as u32);
                c /= v as u64;
            }
            // collapse: remove adjacent repeats then blanks
            let mut collapsed = Vec::new();
            let mut prev = u32::MAX;
            for &tok in &path {
                if tok != prev && tok != 0 {
                    collapsed.push(tok);
                }
                prev = tok;
            }
            if collapsed == target {
                let logp: f64 = path
                    .iter()
                    .enumerate()
                    .map(|(ti, &tok)| log_probs[ti * v + tok as usize])
                    .sum();
                total += logp.exp();
            }
        }
        -total.ln()
    }

    fn uniform_log_probs(t: usize, v: usize) -> Tensor<f64> {
        Tensor::full(vec![1, t, v], (1.0 / v as f64).ln())
    }

    fn run_ctc(
        log_probs: Tensor<f64>,
        input_lengths: &[usize],
        targets: &[u32],
        target_lengths: &[usize],
        l_max: usize,
    ) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let lp = tape.leaf(log_probs, true)?;
        let out = ctc_loss(&tape, lp, input_lengths, targets, target_lengths, l_max)?;
        Ok(tape.value_clone(out.per_item).data().to_vec())
    }

    #[test]
    fn single_frame_single_alignment() {
        // T=1, V=2, p(a)=0.6 -> loss = -ln 0.6
        let lp = Tensor::from_vec(vec![1, 1, 2], vec![0.4f64.ln(), 0.6f64.ln()]).unwrap();
        let loss = run_ctc(lp, &[1], &[1], &[1], 1).unwrap();
        assert!((loss[0] - (-(0.6f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn two_frame_uniform_hand_case() {
        // paths {aa, a-, -a}: P = 0.75, loss = -ln 0.75
        let loss = run_ctc(uniform_log_probs(2, 2), &[2], &[1], &[1], 1).unwrap();
        assert!((loss[0] - (-(0.75f64.ln()))).abs() < 1e-9, "{}", loss[0]);
    }

    #[test]
    fn dp_matches_enumeration_on_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(1234);
        for _ in 0..200 {
            let t = rng.random_range(1..=6);
            let v = rng.random_range(2..=4);
            let l = rng.random_range(0..=3.min(t));
            let mut target = Vec::with_capacity(l);
            for _ in 0..l {
                target.push(rng.random_range(1..v as u32));
            }
            let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
            if l + repeats > t {
                continue;
            }
            // random log-softmax over V
            let mut lp = vec![0.0f64; t * v];
            for ti in 0..t {
                let logits: Vec<f64> = (0..v).map(|_| rng.random_range(-2.0..2.0)).collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + logits.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
                for k in 0..v {
                    lp[ti * v + k] = logits[k] - lse;
                }
            }
            let oracle = enumerate_nll(&lp, t, v, &target);
            let tensor = Tensor::from_vec(vec![1, t, v], lp).unwrap();
            let l_max = l.max(1);
            let mut padded = vec![0u32; l_max];
            padded[..l].copy_from_slice(&target);
            let dp = run_ctc(tensor, &[t], &padded, &[l], l_max).unwrap();
            assert!(
                (dp[0] - oracle).abs() < 1e-8,
                "dp {} vs oracle {} (t={t} v={v} target {target:?})",
                dp[0],
                oracle
            );
        }
    }

    #[test]
    fn infeasible_target_is_a_data_error() {
        // target "aa" needs 3 frames (repeat separator); 2 available
        let lp = uniform_log_probs(2, 2);
        let tape = Tape::new();
        let v = tape.leaf(lp, true).unwrap();
        assert!(matches!(
            ctc_loss(&tape, v, &[2], &[1, 1], &[2], 2),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn blank_in_target_rejected() {
        let lp = uniform_log_probs(3, 2);
        let tape = Tape::new();
        let v = tape.leaf(lp, true).unwrap();
        assert!(matches!(
            ctc_loss(&tape, v, &[3], &[0], &[1], 1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn batch_mean_invariant_to_item_order() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let (t, v) = (5, 3);
        let mut make_lp = |len: usize| -> Vec<f64> {
            let mut lp = vec![f64::NEG_INFINITY; t * v];
            for ti in 0..len {
                let logits: Vec<f64> = (0..v).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + logits.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
                for k in 0..v {
                    lp[ti * v + k] = logits[k] - lse;
                }
            }
            // pad frames with uniform (unused)
            for ti in len..t {
                for k in 0..v {
                    lp[ti * v + k] = (1.0 / v as f64).ln();
                }
            }
            lp
        };
        let lp_a = make_lp(5);
        let lp_b = make_lp(4);
        let build = |order_ab: bool| -> f64 {
            let (first, second, lens, targets, tlens) = if order_ab {
                (&lp_a, &lp_b, [5, 4], [1u32, 2, 2, 1], [2usize, 2])
            } else {
                (&lp_b, &lp_a, [4, 5], [2u32, 1, 1, 2], [2usize, 2])
            };
            let mut data = first.clone();
            data.extend_from_slice(second);
            let tensor = Tensor::from_vec(vec![2, t, v], data).unwrap();
            let tape = Tape::new();
            let lpv = tape.leaf(tensor, true).unwrap();
            let out = ctc_loss(&tape, lpv, &lens, &targets, &tlens, 2).unwrap();
            tape.item_of(out.mean).unwrap()
        };
        let ab = build(true);
        let ba = build(false);
        assert!((ab - ba).abs() < 1e-7, "{ab} vs {ba}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use crate::tensor::gradcheck::grad_check;
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for case in 0..5 {
            let (b, t, v, l) = (2usize, 4usize, 3usize, 2usize);
            let logits: Vec<f64> = (0..b * t * v).map(|_| rng.random_range(-1.0..1.0)).collect();
            let logits = Tensor::from_vec(vec![b, t, v], logits).unwrap();
            let targets = vec![1u32, 2, 2, 1];
            let err = grad_check(
                |tape, vars| {
                    let lp = tape.log_softmax(vars[0], 2)?;
                    let out = ctc_loss(tape, lp, &[t, t - 1], &targets, &[l, l], l)?;
                    Ok(out.mean)
                },
                &[logits],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "ctc grad err {err} at case {case}");
        }
    }

    #[test]
    fn greedy_decode_collapse_rule() {
        // frame argmaxes [a, a, blank, a, b, b] -> "aab"
        let mut lp = Tensor::full(vec![1, 6, 3], -10.0f64);
        let picks = [1usize, 1, 0, 1, 2, 2];
        for (t, &k) in picks.iter().enumerate() {
            lp.data_mut()[t * 3 + k] = -0.1;
        }
        let decoded = ctc_greedy_decode(&lp, &[6]).unwrap();
        assert_eq!(decoded[0], vec![1, 1, 2]);
    }

    #[test]
    fn all_blank_decodes_empty() {
        let mut lp = Tensor::full(vec![1, 4, 3], -10.0f64);
        for t in 0..4 {
            lp.data_mut()[t * 3] = -0.1;
        }
        let decoded = ctc_greedy_decode(&lp, &[4]).unwrap();
        assert!(decoded[0].is_empty());
    }

    #[test]
    fn one_hot_paths_decode_to_their_collapse() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..100 {
            let t = rng.random_range(1..=8);
            let v = rng.random_range(2..=5);
            let path: Vec<u32> = (0..t).map(|_| rng.random_range(0..v as u32)).collect();
            let mut lp = Tensor::full(vec![1, t, v], -20.0f64);
            for (ti, &tok) in path.iter().enumerate() {
                lp.data_mut()[ti * v + tok as usize] = -0.01;
            }
            let mut expected = Vec::new();
            let mut prev = u32::MAX;
            for &tok in &path {
                if tok != prev && tok != 0 {
                    expected.push(tok);
                }
                prev = tok;
            }
            let decoded = ctc_greedy_decode(&lp, &[t]).unwrap();
            assert_eq!(decoded[0], expected);
        }
    }
}
