//! Naive reference implementations used to cross-check the tape ops.
//!
//! Everything here is written as the flattest possible loop with no reuse
//! of the library's own kernels, so a bug in an optimized op cannot hide
//! in its oracle.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Output spatial size of a convolution along one axis.
pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Plain quadruple-loop convolution over a CxHxW input with an
/// OxCxKhxKw kernel and per-output-channel bias.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    input: &[f64],
    (c_in, h, w): (usize, usize, usize),
    weight: &[f64],
    (c_out, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = conv_out(h, kh, stride, pad);
    let ow = conv_out(w, kw, stride, pad);
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[o];
                for c in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let iv = input[(c * h + iy as usize) * w + ix as usize];
                            let wv = weight[((o * c_in + c) * kh + ky) * kw + kx];
                            acc += iv * wv;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// Non-overlapping average pooling; both spatial dims must divide.
pub fn naive_avg_pool(input: &[f64], (c, h, w): (usize, usize, usize), kh: usize, kw: usize) -> Vec<f64> {
    let (oh, ow) = (h / kh, w / kw);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..kh {
                    for dx in 0..kw {
                        acc += input[(ch * h + oy * kh + dy) * w + ox * kw + dx];
                    }
                }
                out[(ch * oh + oy) * ow + ox] = acc / (kh * kw) as f64;
            }
        }
    }
    out
}

pub fn naive_global_avg_pool(input: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    (0..c)
        .map(|ch| input[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
        .collect()
}

pub fn naive_channel_mean(input: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for (i, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for ch in 0..c {
            acc += input[ch * h * w + i];
        }
        *slot = acc / c as f64;
    }
    out
}

/// Channel-wise maximum; ties resolve to the lowest channel index, which
/// only matters for gradients but is part of the forward contract too.
pub fn naive_channel_max(input: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for (i, slot) in out.iter_mut().enumerate() {
        let mut best = input[i];
        for ch in 1..c {
            let v = input[ch * h * w + i];
            if v > best {
                best = v;
            }
        }
        *slot = best;
    }
    out
}

pub fn naive_linear(input: &[f64], weight: &[f64], bias: &[f64], out_f: usize, in_f: usize) -> Vec<f64> {
    (0..out_f)
        .map(|o| {
            let mut acc = bias[o];
            for i in 0..in_f {
                acc += weight[o * in_f + i] * input[i];
            }
            acc
        })
        .collect()
}

pub fn randn<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
