//! Attention application, feature blending and the classification head.
//!
//! The attended features are the raw features gated spatially by the
//! attention map; the final representation is a convex blend of raw and
//! attended features; classification is global average pooling into a
//! linear layer. The combined training objective adds a weighted attention
//! penalty on top of cross entropy.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

const BLEND_SUM_TOL: f64 = 1e-12;

/// Convex combination weights for raw vs attended features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendWeights {
    lambda: f64,
    mu: f64,
}

impl BlendWeights {
    /// Both weights stated explicitly; they must be in [0, 1] and sum to 1.
    pub fn new(lambda: f64, mu: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) || !(0.0..=1.0).contains(&mu) {
            return Err(Error::config(format!(
                "blend weights must lie in [0, 1], got lambda={lambda}, mu={mu}"
            )));
        }
        if (lambda + mu - 1.0).abs() > BLEND_SUM_TOL {
            return Err(Error::config(format!(
                "blend weights must sum to 1, got lambda={lambda}, mu={mu}"
            )));
        }
        Ok(BlendWeights { lambda, mu })
    }

    /// The usual entry point: mu is derived as 1 - lambda.
    pub fn from_lambda(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::config(format!(
                "lambda must lie in [0, 1], got {lambda}"
            )));
        }
        Ok(BlendWeights {
            lambda,
            mu: 1.0 - lambda,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }
}

impl Default for BlendWeights {
    fn default() -> Self {
        BlendWeights {
            lambda: 0.5,
            mu: 0.5,
        }
    }
}

/// Weight on the attention penalty inside the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    tau: f64,
}

impl LossWeights {
    pub fn new(tau: f64) -> Result<Self> {
        if !tau.is_finite() || tau < 0.0 {
            return Err(Error::config(format!("tau must be finite and >= 0, got {tau}")));
        }
        Ok(LossWeights { tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { tau: 0.1 }
    }
}

/// Linear classifier over pooled features.
#[derive(Debug, Clone)]
pub struct LinearHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearHead {
    pub fn new<R: Rng>(in_features: usize, num_classes: usize, rng: &mut R) -> Result<Self> {
        if in_features == 0 || num_classes == 0 {
            return Err(Error::config("linear head dims must be positive"));
        }
        let mut weight = Tensor::he_init(&[num_classes, in_features], in_features, rng)?;
        let mut bias = Tensor::zeros(&[num_classes]);
        weight.set_requires_grad(true);
        bias.set_requires_grad(true);
        Ok(LinearHead { weight, bias })
    }
}

/// Gates a C x H x W feature block by an H x W attention map.
pub fn apply_attention(tape: &mut Tape, features: NodeId, attention: NodeId) -> Result<NodeId> {
    tape.spatial_mul(features, attention)
}

/// lambda * raw + mu * attended, elementwise over matching blocks.
pub fn blend(
    tape: &mut Tape,
    features: NodeId,
    attended: NodeId,
    weights: &BlendWeights,
) -> Result<NodeId> {
    if tape.shape(features) != tape.shape(attended) {
        return Err(Error::shape(format!(
            "blend wants matching shapes, got {:?} and {:?}",
            tape.shape(features),
            tape.shape(attended)
        )));
    }
    let raw = tape.scale(features, weights.lambda());
    let att = tape.scale(attended, weights.mu());
    tape.add(raw, att)
}

/// Global average pool followed by the linear classifier.
pub fn classify(tape: &mut Tape, features: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
    let pooled = tape.global_avg_pool(features)?;
    tape.linear(pooled, weight, bias)
}

/// Cross entropy plus tau times the attention penalty. With tau = 0 (or no
/// penalty term) the result is the cross entropy node itself, bit for bit.
pub fn total_loss(
    tape: &mut Tape,
    logits: NodeId,
    label: usize,
    att_loss: Option<NodeId>,
    weights: &LossWeights,
) -> Result<NodeId> {
    let ce = tape.softmax_cross_entropy(logits, label)?;
    if weights.tau() == 0.0 {
        return Ok(ce);
    }
    match att_loss {
        Some(al) => {
            let weighted = tape.scale(al, weights.tau());
            tape.add(ce, weighted)
        }
        None => Err(Error::config(
            "attention penalty weight is positive but no attention loss was computed",
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blend_weights_enforce_convexity() {
        assert!(BlendWeights::new(0.5, 0.5).is_ok());
        assert!(BlendWeights::new(0.3, 0.8).is_err());
        assert!(BlendWeights::new(-0.1, 1.1).is_err());
        let w = BlendWeights::from_lambda(0.3).unwrap();
        assert!((w.mu() - 0.7).abs() < 1e-15);
        assert!(BlendWeights::from_lambda(1.5).is_err());
    }

    #[test]
    fn loss_weights_reject_negative_tau() {
        assert!(LossWeights::new(0.0).is_ok());
        assert!(LossWeights::new(-0.1).is_err());
        assert!(LossWeights::new(f64::NAN).is_err());
    }

    #[test]
    fn apply_attention_identity_and_annihilation() {
        let mut tape = Tape::new();
        let f = tape
            .leaf(&[2, 2, 2], vec![1.0, -2.0, 3.0, 0.5, 4.0, 5.0, -6.0, 7.0], true)
            .unwrap();
        let ones = tape.leaf(&[2, 2], vec![1.0; 4], false).unwrap();
        let gated = apply_attention(&mut tape, f, ones).unwrap();
        assert_eq!(tape.value(gated), tape.value(f));
        let zeros = tape.leaf(&[2, 2], vec![0.0; 4], false).unwrap();
        let muted = apply_attention(&mut tape, f, zeros).unwrap();
        assert!(tape.value(muted).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_attention_hand_product() {
        let mut tape = Tape::new();
        let f = tape.leaf(&[2, 1, 2], vec![2.0, 4.0, -1.0, 3.0], true).unwrap();
        let m = tape.leaf(&[1, 2], vec![0.5, 0.25], false).unwrap();
        let gated = apply_attention(&mut tape, f, m).unwrap();
        assert_eq!(tape.value(gated), &[1.0, 1.0, -0.5, 0.75]);
    }

    #[test]
    fn blend_examples() {
        let mut tape = Tape::new();
        let raw = tape.leaf(&[1, 1, 2], vec![2.0, 4.0], true).unwrap();
        let att = tape.leaf(&[1, 1, 2], vec![0.0, 8.0], true).unwrap();
        let half = blend(&mut tape, raw, att, &BlendWeights::default()).unwrap();
        assert_eq!(tape.value(half), &[1.0, 6.0]);
        let all_raw = blend(&mut tape, raw, att, &BlendWeights::from_lambda(1.0).unwrap()).unwrap();
        assert_eq!(tape.value(all_raw), tape.value(raw));
        let skew = blend(&mut tape, raw, att, &BlendWeights::from_lambda(0.25).unwrap()).unwrap();
        assert_eq!(tape.value(skew), &[0.5, 7.0]);
        let wrong = tape.leaf(&[1, 2, 1], vec![0.0; 2], true).unwrap();
        assert!(blend(&mut tape, raw, wrong, &BlendWeights::default()).is_err());
    }

    #[test]
    fn classify_zero_weight_returns_bias() {
        let mut tape = Tape::new();
        let f = tape
            .leaf(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, -1.0, -2.0, -3.0, -4.0], true)
            .unwrap();
        let w = tape.leaf(&[3, 2], vec![0.0; 6], true).unwrap();
        let b = tape.leaf(&[3], vec![0.7, -0.2, 0.0], true).unwrap();
        let logits = classify(&mut tape, f, w, b).unwrap();
        assert_eq!(tape.value(logits), &[0.7, -0.2, 0.0]);
    }

    #[test]
    fn classify_constant_planes_hit_linear_form() {
        // Channel planes at constant 2 and -1 pool to exactly those values.
        let mut tape = Tape::new();
        let mut data = vec![2.0; 4];
        data.extend(vec![-1.0; 4]);
        let f = tape.leaf(&[2, 2, 2], data, true).unwrap();
        let w = tape.leaf(&[2, 2], vec![1.0, 1.0, 0.5, -0.5], true).unwrap();
        let b = tape.leaf(&[2], vec![0.0, 0.25], true).unwrap();
        let logits = classify(&mut tape, f, w, b).unwrap();
        assert_eq!(tape.value(logits), &[1.0, 1.75]);
    }

    #[test]
    fn total_loss_weighted_sum() {
        let mut tape = Tape::new();
        // Logits chosen so CE is exactly ln 2 on two classes.
        let logits = tape.leaf(&[2], vec![0.0, 0.0], true).unwrap();
        let al = tape.leaf(&[1], vec![0.25], true).unwrap();
        let total = total_loss(&mut tape, logits, 0, Some(al), &LossWeights::default()).unwrap();
        let expect = std::f64::consts::LN_2 + 0.1 * 0.25;
        assert!((tape.scalar(total) - expect).abs() < 1e-15);
    }

    #[test]
    fn total_loss_with_zero_tau_is_ce_exactly() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&[3], vec![0.3, -0.2, 1.1], true).unwrap();
        let al = tape.leaf(&[1], vec![123.0], true).unwrap();
        let ce = tape.softmax_cross_entropy(logits, 2).unwrap();
        let total = total_loss(
            &mut tape,
            logits,
            2,
            Some(al),
            &LossWeights::new(0.0).unwrap(),
        )
        .unwrap();
        assert_eq!(tape.scalar(total), tape.scalar(ce));
    }

    #[test]
    fn total_loss_needs_penalty_when_tau_positive() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&[2], vec![0.0, 0.0], true).unwrap();
        assert!(total_loss(&mut tape, logits, 0, None, &LossWeights::default()).is_err());
    }

    #[test]
    fn total_loss_monotone_in_attention_penalty() {
        let run = |al_value: f64| {
            let mut tape = Tape::new();
            let logits = tape.leaf(&[2], vec![0.4, -0.4], true).unwrap();
            let al = tape.leaf(&[1], vec![al_value], true).unwrap();
            let total =
                total_loss(&mut tape, logits, 0, Some(al), &LossWeights::default()).unwrap();
            tape.scalar(total)
        };
        assert!(run(0.5) > run(0.1));
        assert!(run(0.1) > run(0.0));
    }
}
