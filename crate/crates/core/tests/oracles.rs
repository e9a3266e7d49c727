//! Cross-checks the optimized tape kernels against naive loop oracles on
//! randomized instances.

mod common;

use common::*;
use mga_core::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 50;
const TOLERANCE: f64 = 1e-12;

fn assert_close(got: &[f64], want: &[f64], what: &str, instance: usize) {
    assert_eq!(got.len(), want.len(), "{what} #{instance}: length mismatch");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!(
            (g - w).abs() <= TOLERANCE,
            "{what} #{instance}: index {i} differs, {g} vs {w}"
        );
    }
}

fn random_chw<R: Rng>(rng: &mut R) -> (usize, usize, usize) {
    (
        rng.gen_range(1..=8),
        rng.gen_range(1..=16),
        rng.gen_range(1..=16),
    )
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0);
    let mut done = 0;
    while done < INSTANCES {
        let (c_in, h, w) = random_chw(&mut rng);
        let c_out = rng.gen_range(1..=6);
        let k = rng.gen_range(1..=3);
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=1);
        if h + 2 * pad < k || w + 2 * pad < k {
            continue;
        }
        done += 1;

        let input = randn(c_in * h * w, &mut rng);
        let weight = randn(c_out * c_in * k * k, &mut rng);
        let bias = randn(c_out, &mut rng);
        let want = naive_conv2d(
            &input,
            (c_in, h, w),
            &weight,
            (c_out, k, k),
            &bias,
            stride,
            pad,
        );

        let mut tape = Tape::new();
        let x = tape.leaf(&[c_in, h, w], input, false).unwrap();
        let wt = tape.leaf(&[c_out, c_in, k, k], weight, false).unwrap();
        let b = tape.leaf(&[c_out], bias, false).unwrap();
        let y = tape.conv2d(x, wt, b, stride, pad).unwrap();
        assert_close(tape.value(y), &want, "conv2d", done);
    }
}

#[test]
fn avg_pool_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa7);
    for instance in 0..INSTANCES {
        let c = rng.gen_range(1..=8);
        let (kh, kw) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let (bh, bw) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let (h, w) = (kh * bh, kw * bw);
        let input = randn(c * h * w, &mut rng);
        let want = naive_avg_pool(&input, (c, h, w), kh, kw);

        let mut tape = Tape::new();
        let x = tape.leaf(&[c, h, w], input, false).unwrap();
        let y = tape.avg_pool2d(x, kh, kw).unwrap();
        assert_close(tape.value(y), &want, "avg_pool2d", instance);
    }
}

#[test]
fn global_avg_pool_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x91);
    for instance in 0..INSTANCES {
        let (c, h, w) = random_chw(&mut rng);
        let input = randn(c * h * w, &mut rng);
        let want = naive_global_avg_pool(&input, (c, h, w));

        let mut tape = Tape::new();
        let x = tape.leaf(&[c, h, w], input, false).unwrap();
        let y = tape.global_avg_pool(x).unwrap();
        assert_close(tape.value(y), &want, "global_avg_pool", instance);
    }
}

#[test]
fn channel_summaries_match_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e);
    for instance in 0..INSTANCES {
        let (c, h, w) = random_chw(&mut rng);
        let mut input = randn(c * h * w, &mut rng);
        // Plant exact ties at a few positions to exercise the tie rule.
        if c > 1 && h * w > 2 {
            input[h * w] = input[0];
            input[(c - 1) * h * w + 1] = input[1];
        }
        let want_mean = naive_channel_mean(&input, (c, h, w));
        let want_max = naive_channel_max(&input, (c, h, w));

        let mut tape = Tape::new();
        let x = tape.leaf(&[c, h, w], input, false).unwrap();
        let mean = tape.channel_mean(x).unwrap();
        let max = tape.channel_max(x).unwrap();
        assert_close(tape.value(mean), &want_mean, "channel_mean", instance);
        assert_close(tape.value(max), &want_max, "channel_max", instance);
    }
}

#[test]
fn linear_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x11);
    for instance in 0..INSTANCES {
        let in_f = rng.gen_range(1..=64);
        let out_f = rng.gen_range(1..=16);
        let input = randn(in_f, &mut rng);
        let weight = randn(out_f * in_f, &mut rng);
        let bias = randn(out_f, &mut rng);
        let want = naive_linear(&input, &weight, &bias, out_f, in_f);

        let mut tape = Tape::new();
        let x = tape.leaf(&[in_f], input, false).unwrap();
        let wt = tape.leaf(&[out_f, in_f], weight, false).unwrap();
        let b = tape.leaf(&[out_f], bias, false).unwrap();
        let y = tape.linear(x, wt, b).unwrap();
        assert_close(tape.value(y), &want, "linear", instance);
    }
}
