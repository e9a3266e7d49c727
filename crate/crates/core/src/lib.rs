//! Compact deep-learning stack for mask-guided attention classification.
//!
//! Everything runs on the CPU in f64: a tape-based reverse-mode autodiff
//! core, a small convolutional backbone, a spatial attention module that can
//! be supervised by segmentation masks, a synthetic vein-image generator,
//! and an SGD trainer with cosine annealing. The `parallel` feature (on by
//! default) runs per-sample work through rayon; results are bitwise
//! identical to the sequential path because reductions always happen in
//! sample order.

#![forbid(unsafe_code)]

pub mod augment;
pub mod backbone;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod mga;
pub mod model;
pub mod netpbm;
pub mod parallel;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

/// Seed derivation used everywhere a run seed fans out into independent
/// streams (init, shuffling, per-sample noise). splitmix64 finalizer.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(stream)
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
