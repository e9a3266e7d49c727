//! Mask-guided spatial attention.
//!
//! From a C x H x W feature block, two H x W summaries are taken (channel
//! mean and channel max), stacked, mixed by a learned 1x1 convolution and
//! squashed through a sigmoid into an attention map strictly inside (0, 1).
//! During training the map can be pulled towards a downsampled, normalized
//! segmentation mask via a mean-squared-error penalty; at inference no mask
//! is needed.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Guard against dividing by the pooled maximum of an empty mask.
pub const MASK_NORM_EPS: f64 = 1e-12;

/// Learned parameters of the 1x1 fusion convolution (2 channels in, 1 out).
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl FusionParams {
    /// Zero initialization: the attention map starts flat at sigmoid(0) =
    /// 0.5, a neutral gate that neither mutes nor saturates features.
    pub fn zeros() -> Self {
        let mut weight = Tensor::zeros(&[1, 2, 1, 1]);
        let mut bias = Tensor::zeros(&[1]);
        weight.set_requires_grad(true);
        bias.set_requires_grad(true);
        FusionParams { weight, bias }
    }
}

/// Per-position average over channels.
pub fn mean_attention(tape: &mut Tape, features: NodeId) -> Result<NodeId> {
    tape.channel_mean(features)
}

/// Per-position maximum over channels (ties go to the lowest channel).
pub fn max_attention(tape: &mut Tape, features: NodeId) -> Result<NodeId> {
    tape.channel_max(features)
}

/// Stacks the two summary maps, applies the 1x1 convolution and a sigmoid.
/// Returns an H x W map with every value strictly inside (0, 1).
pub fn fuse_attention(
    tape: &mut Tape,
    mean_map: NodeId,
    max_map: NodeId,
    weight: NodeId,
    bias: NodeId,
) -> Result<NodeId> {
    let stacked = tape.stack2(mean_map, max_map)?;
    let mixed = tape.conv2d(stacked, weight, bias, 1, 0)?;
    let squashed = tape.sigmoid(mixed);
    let shape = tape.shape(squashed).to_vec();
    // 1 x H x W down to H x W so the map composes with spatial_mul.
    tape.reshape(squashed, &shape[1..])
}

/// Full attention path: features -> summaries -> fused map.
pub fn attention_map(
    tape: &mut Tape,
    features: NodeId,
    weight: NodeId,
    bias: NodeId,
) -> Result<NodeId> {
    let mean_map = mean_attention(tape, features)?;
    let max_map = max_attention(tape, features)?;
    fuse_attention(tape, mean_map, max_map, weight, bias)
}

/// Downsamples a binary H x W mask to the feature resolution by block
/// averaging, then rescales so the strongest cell is exactly 1. An all-zero
/// mask stays all zero.
pub fn resize_mask(mask: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    if mask.rank() != 2 {
        return Err(Error::shape(format!(
            "resize_mask wants an H x W mask, got {:?}",
            mask.shape()
        )));
    }
    if target_h == 0 || target_w == 0 {
        return Err(Error::config("resize_mask target must be at least 1x1"));
    }
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    if h % target_h != 0 || w % target_w != 0 {
        return Err(Error::shape(format!(
            "mask {h}x{w} does not divide evenly into {target_h}x{target_w} blocks"
        )));
    }
    let (kh, kw) = (h / target_h, w / target_w);
    let norm = 1.0 / (kh * kw) as f64;
    let mut pooled = vec![0.0; target_h * target_w];
    for ty in 0..target_h {
        for tx in 0..target_w {
            let mut acc = 0.0;
            for dy in 0..kh {
                let row = (ty * kh + dy) * w + tx * kw;
                acc += mask.data()[row..row + kw].iter().sum::<f64>();
            }
            pooled[ty * target_w + tx] = acc * norm;
        }
    }
    let max = pooled.iter().cloned().fold(0.0f64, f64::max);
    if max > MASK_NORM_EPS {
        for v in pooled.iter_mut() {
            *v /= max;
        }
    }
    Tensor::new(&[target_h, target_w], pooled)
}

/// Mean squared error between the mask target and the attention map, both
/// H x W. Composed from tape ops so its gradient comes for free.
pub fn attention_loss(tape: &mut Tape, target: NodeId, attention: NodeId) -> Result<NodeId> {
    let (ts, as_) = (tape.shape(target), tape.shape(attention));
    if ts != as_ || ts.len() != 2 {
        return Err(Error::shape(format!(
            "attention_loss wants matching H x W maps, got {ts:?} and {as_:?}"
        )));
    }
    let diff = tape.sub(target, attention)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq))
}
