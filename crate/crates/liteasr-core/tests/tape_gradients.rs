//! Finite-difference spot checks for individual tape primitives. The full
//! 100-seed sweep over every primitive lives in the acceptance suite; these
//! pin the per-op contracts with a handful of seeds for fast iteration.

use liteasr_core::tensor::gradcheck::grad_check;
use liteasr_core::tensor::tape::{Tape, Var};
use liteasr_core::tensor::Tensor;
use liteasr_core::Result;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn rand_t(rng: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Reduce an arbitrary output to a scalar with fixed random weights so the
/// check exercises every output element.
fn weighted_sum(tape: &Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone())?;
    let prod = tape.mul(y, w)?;
    tape.sum_all(prod)
}

#[test]
fn matmul_gradients_match_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let a = rand_t(&mut rng, &[4, 5], -1.0, 1.0);
        let b = rand_t(&mut rng, &[5, 3], -1.0, 1.0);
        let w = rand_t(&mut rng, &[4, 3], -1.0, 1.0);
        let err = grad_check(
            |tape, vars| {
                let y = tape.matmul(vars[0], vars[1])?;
                weighted_sum(tape, y, &w)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "matmul grad err {err} at seed {seed}");
    }
}

#[test]
fn batched_matmul_with_broadcast_rhs() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let a = rand_t(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let b = rand_t(&mut rng, &[4, 2], -1.0, 1.0);
    let w = rand_t(&mut rng, &[2, 3, 2], -1.0, 1.0);
    let err = grad_check(
        |tape, vars| {
            let y = tape.matmul(vars[0], vars[1])?;
            weighted_sum(tape, y, &w)
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "batched matmul grad err {err}");
}

#[test]
fn softmax_gradients_match_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha12Rng::seed_from_u64(100 + seed);
        let x = rand_t(&mut rng, &[3, 4], -2.0, 2.0);
        let w = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
        let err = grad_check(
            |tape, vars| {
                let y = tape.softmax(vars[0], 1)?;
                weighted_sum(tape, y, &w)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "softmax grad err {err} at seed {seed}");
    }
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha12Rng::seed_from_u64(200 + seed);
        let x = rand_t(&mut rng, &[3, 6], -1.0, 1.0);
        let gamma = rand_t(&mut rng, &[6], 0.5, 1.5);
        let beta = rand_t(&mut rng, &[6], -0.5, 0.5);
        let w = rand_t(&mut rng, &[3, 6], -1.0, 1.0);
        let err = grad_check(
            |tape, vars| {
                let y = tape.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
                weighted_sum(tape, y, &w)
            },
            &[x, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "layer_norm grad err {err} at seed {seed}");
    }
}

#[test]
fn depthwise_conv_gradients_match_finite_differences() {
    for (seed, stride) in [(0u64, 1usize), (1, 1), (2, 2), (3, 2)] {
        let mut rng = ChaCha12Rng::seed_from_u64(300 + seed);
        let x = rand_t(&mut rng, &[2, 7, 3], -1.0, 1.0);
        let k = rand_t(&mut rng, &[3, 3], -1.0, 1.0);
        let t_out = if stride == 1 { 7 } else { 4 };
        let w = rand_t(&mut rng, &[2, t_out, 3], -1.0, 1.0);
        let err = grad_check(
            |tape, vars| {
                let y = tape.depthwise_conv1d(vars[0], vars[1], stride)?;
                weighted_sum(tape, y, &w)
            },
            &[x, k],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "conv grad err {err} at seed {seed} stride {stride}");
    }
}

#[test]
fn logaddexp_and_gather_gradients() {
    let mut rng = ChaCha12Rng::seed_from_u64(42);
    let a = rand_t(&mut rng, &[2, 3], -2.0, 2.0);
    let b = rand_t(&mut rng, &[3], -2.0, 2.0);
    let w = rand_t(&mut rng, &[2, 3], -1.0, 1.0);
    let err = grad_check(
        |tape, vars| {
            let y = tape.logaddexp(vars[0], vars[1])?;
            weighted_sum(tape, y, &w)
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "logaddexp grad err {err}");

    let x = rand_t(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let idx = vec![0u32, 3, 1, 2, 2, 0];
    let w = rand_t(&mut rng, &[2, 3, 3], -1.0, 1.0);
    let err = grad_check(
        |tape, vars| {
            let y = tape.gather_classes(vars[0], idx.clone(), 3)?;
            weighted_sum(tape, y, &w)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "gather_classes grad err {err}");
}

#[test]
fn composition_gradient_matches_oracle() {
    // grad of a composition (not just per-op): linear -> swish -> norm-like
    // pooling -> weighted sum.
    for seed in 0..3 {
        let mut rng = ChaCha12Rng::seed_from_u64(500 + seed);
        let x = rand_t(&mut rng, &[2, 5], -1.0, 1.0);
        let w1 = rand_t(&mut rng, &[5, 4], -0.7, 0.7);
        let b1 = rand_t(&mut rng, &[4], -0.2, 0.2);
        let w = rand_t(&mut rng, &[2, 4], -1.0, 1.0);
        let err = grad_check(
            |tape, vars| {
                let h = tape.matmul(vars[0], vars[1])?;
                let h = tape.add(h, vars[2])?;
                let h = tape.swish(h)?;
                let s = tape.softmax(h, 1)?;
                weighted_sum(tape, s, &w)
            },
            &[x, w1, b1],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "composition grad err {err} at seed {seed}");
    }
}

#[test]
fn identical_seeds_give_bit_identical_gradients() {
    let run = || -> Vec<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let x = rand_t(&mut rng, &[4, 4], -1.0, 1.0);
        let w = rand_t(&mut rng, &[4, 4], -1.0, 1.0);
        let tape = Tape::new();
        let xv = tape.leaf(x, true).unwrap();
        let wv = tape.constant(w).unwrap();
        let y = tape.matmul(xv, wv).unwrap();
        let s = tape.softmax(y, 1).unwrap();
        let loss = tape.mean_all(s).unwrap();
        tape.backward(loss).unwrap();
        tape.grad(xv).unwrap().data().to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
