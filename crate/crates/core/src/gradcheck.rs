//! Finite-difference gradient verification.
//!
//! Every backward rule on the tape is checked against central differences:
//! perturb one coordinate by +-h, re-run the forward pass, and compare the
//! slope against the analytic gradient. The relative error uses
//! |a - n| / max(1e-8, |a| + |n|) so tiny gradients near zero do not blow
//! the ratio up.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::mga;
use crate::model::{Model, ModelConfig, Variant};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Central-difference half step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Random coordinates probed per input tensor.
pub const DEFAULT_PROBES: usize = 20;
/// Gate applied to every op by the suite and the CLI.
pub const SUITE_TOLERANCE: f64 = 1e-4;
/// Floor of the relative-error denominator.
const REL_DENOM_FLOOR: f64 = 1e-8;

/// Maximum relative error between analytic and numeric gradients of a
/// scalar-valued graph builder.
///
/// `build` receives leaves registered in the same order as `inputs` and must
/// return the loss node. Only inputs flagged `requires_grad` are probed.
pub fn max_relative_error<F, R>(
    build: &F,
    inputs: &[Tensor],
    step: f64,
    probes: usize,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    R: Rng,
{
    if step <= 0.0 {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.input(t)).collect();
    let loss = build(&mut tape, &ids)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::shape(format!(
            "gradient check needs a scalar loss, got shape {:?}",
            tape.shape(loss)
        )));
    }
    tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|x| t.input(x)).collect();
        let l = build(&mut t, &ids)?;
        Ok(t.scalar(l))
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let analytic: Vec<f64> = match tape.grad(ids[i]) {
            Some(g) => g.to_vec(),
            // A differentiable input the loss never touches has gradient 0.
            None => vec![0.0; input.numel()],
        };
        for coord in probe_coords(input.numel(), probes, rng) {
            let original = work[i].data()[coord];
            work[i].data_mut()[coord] = original + step;
            let plus = eval(&work)?;
            work[i].data_mut()[coord] = original - step;
            let minus = eval(&work)?;
            work[i].data_mut()[coord] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[coord];
            let rel = (a - numeric).abs() / REL_DENOM_FLOOR.max(a.abs() + numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// All coordinates when the tensor is small, otherwise a random subset
/// without replacement.
fn probe_coords<R: Rng>(numel: usize, probes: usize, rng: &mut R) -> Vec<usize> {
    let mut coords: Vec<usize> = (0..numel).collect();
    if numel <= probes {
        return coords;
    }
    coords.shuffle(rng);
    coords.truncate(probes);
    coords
}

/// Result of checking one op.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: &'static str,
    pub max_rel_err: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= SUITE_TOLERANCE
    }
}

/// Names accepted by [`run_suite`]'s `only` filter, in execution order.
pub fn suite_op_names() -> &'static [&'static str] {
    &[
        "conv2d",
        "conv1x1",
        "linear",
        "add",
        "sub",
        "mul",
        "scale",
        "sigmoid",
        "relu",
        "global_avg_pool",
        "avg_pool2d",
        "channel_mean",
        "channel_max",
        "spatial_mul",
        "stack2",
        "reshape",
        "sum_all",
        "mean_all",
        "softmax_cross_entropy",
        "attention_loss",
        "end_to_end",
    ]
}

/// Runs the whole gradient-check suite (or a single named op) with inputs
/// derived from `seed`. Reports are returned pass or fail; callers decide
/// what to do with offenders.
pub fn run_suite(seed: u64, only: Option<&str>) -> Result<Vec<OpReport>> {
    if let Some(name) = only {
        if !suite_op_names().contains(&name) {
            return Err(Error::config(format!(
                "unknown op '{name}', expected one of {}",
                suite_op_names().join(", ")
            )));
        }
    }
    let mut reports = Vec::new();
    for (index, &name) in suite_op_names().iter().enumerate() {
        if only.is_some_and(|o| o != name) {
            continue;
        }
        // One independent stream per op so a filtered run sees the same
        // inputs as the full suite.
        let mut rng = ChaCha8Rng::seed_from_u64(crate::mix_seed(seed, index as u64));
        let max_rel_err = check_op(name, &mut rng)?;
        reports.push(OpReport { name, max_rel_err });
    }
    Ok(reports)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| normal.sample(rng)).collect();
    let mut t = Tensor::new(shape, data).expect("randn shape");
    t.set_requires_grad(true);
    t
}

/// Like [`randn`] but pushed away from zero, for ops with a kink there.
fn randn_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = randn(shape, rng);
    for v in t.data_mut() {
        *v += if *v >= 0.0 { 0.2 } else { -0.2 };
    }
    t
}

/// Random channel stack whose per-position channel gaps are large enough
/// that a finite-difference step cannot flip the argmax.
fn randn_max_safe(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let plane = shape[1] * shape[2];
    let c = shape[0];
    loop {
        let t = randn(shape, rng);
        let mut ok = true;
        'scan: for p in 0..plane {
            for i in 0..c {
                for j in (i + 1)..c {
                    if (t.data()[i * plane + p] - t.data()[j * plane + p]).abs() < 1e-3 {
                        ok = false;
                        break 'scan;
                    }
                }
            }
        }
        if ok {
            return t;
        }
    }
}

fn check_op(name: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
    let step = DEFAULT_STEP;
    let probes = DEFAULT_PROBES;
    match name {
        "conv2d" => {
            // Padding and stride both exercised; worst case wins.
            let mut worst = 0.0f64;
            for &(stride, padding, k) in &[(1usize, 1usize, 3usize), (2, 0, 2), (1, 2, 5)] {
                let x = randn(&[3, 6, 7], rng);
                let w = randn(&[4, 3, k, k], rng);
                let b = randn(&[4], rng);
                let build = move |t: &mut Tape, ids: &[NodeId]| {
                    let y = t.conv2d(ids[0], ids[1], ids[2], stride, padding)?;
                    Ok(t.sum_all(y))
                };
                worst = worst.max(max_relative_error(&build, &[x, w, b], step, probes, rng)?);
            }
            Ok(worst)
        }
        "conv1x1" => {
            let x = randn(&[2, 5, 5], rng);
            let w = randn(&[1, 2, 1, 1], rng);
            let b = randn(&[1], rng);
            let build = |t: &mut Tape, ids: &[NodeId]| {
                let y = t.conv2d(ids[0], ids[1], ids[2], 1, 0)?;
                Ok(t.sum_all(y))
            };
            max_relative_error(&build, &[x, w, b], step, probes, rng)
        }
        "linear" => {
            let x = randn(&[5], rng);
            let w = randn(&[4, 5], rng);
            let b = randn(&[4], rng);
            let build = |t: &mut Tape, ids: &[NodeId]| {
                let y = t.linear(ids[0], ids[1], ids[2])?;
                Ok(t.sum_all(y))
            };
            max_relative_error(&build, &[x, w, b], step, probes, rng)
        }
        "add" | "sub" | "mul" => {
            let a = randn(&[3, 4], rng);
            let b = randn(&[3, 4], rng);
            let s = randn(&[1], rng);
            let op = name.to_string();
            let build = move |t: &mut Tape, ids: &[NodeId]| {
                let full = match op.as_str() {
                    "add" => t.add(ids[0], ids[1])?,
                    "sub" => t.sub(ids[0], ids[1])?,
                    _ => t.mul(ids[0], ids[1])?,
                };
                // Also push the scalar-broadcast path through the same loss.
                let scaled = match op.as_str() {
                    "add" => t.add(full, ids[2])?,
                    "sub" => t.sub(full, ids[2])?,
                    _ => t.mul(full, ids[2])?,
                };
                Ok(t.sum_all(scaled))
            };
            max_relative_error(&build, &[a, b, s], step, probes, rng)
        }
        "scale" => {
            let a = randn(&[3, 4], rng);
            let build = |t: &mut Tape, ids: &[NodeId]| {
                let y = t.scale(ids[0], -1.7);
                Ok(t.sum_all(y))
            };
            max_relative_error(&build, &[a], step, probes, rng)
        }
        "sigmoid" => {
            let a = randn(&[4, 4], rng);
            let build = |t: &mut Tape, ids: &[NodeId]| {
                let y = t.sigmoid(ids[0]);
                Ok(t.sum_all(y))
            };
            max_relative_error(&build, &[a], step, probes, rng)
        }
        "relu" => {
            let a = randn_off_zero(&[4, 4], rng);
            let build = |t: &mut Tape, ids: &[NodeId]| {
                let y = t.relu(ids[0]);
                Ok(t.sum_all(y))
            };
            max_relative_error(&build, &[a], step, probes, rng)
        }
        "global_avg_pool" => {
            let a = randn(&[3, 4, 5], rng);
            let build = |t: &mut Tape, ids: &[NodeId]| {
                let y = t.global_avg_pool(ids[0])?;
                Ok(t.sum_all(y))
            };
            max_relative_error(&build, &[a], step, probes, rng)
        }
        "avg_pool2d" => {
            let a = randn(&[2, 6, 4], rng);
            let build = |t: &mut Tape, ids: &[NodeId]| {
                let y = t.avg_pool2d(ids[0], 2, 2)?;
                Ok(t.sum_all(y))
            };
            max_relative_error(&build, &[a], step, probes, rng)
        }
        "channel_mean" => {
            let a = randn(&[5, 3, 4], rng);
            let build = |t: &mut Tape, ids: &[NodeId]| {
                let y = t.channel_mean(ids[0])?;
                Ok(t.sum_all(y))
            };
            max_relative_error(&build, &[a], step, probes, rng)
        }
        "channel_max" => {
            let a = randn_max_safe(&[5, 3, 4], rng);
            let build = |t: &mut Tape, ids: &[NodeId]| {
                let y = t.channel_max(ids[0])?;
                Ok(t.sum_all(y))
            };
            max_relative_error(&build, &[a], step, probes, rng)
        }
        "spatial_mul" => {
            let f = randn(&[3, 4, 4], rng);
            let m = randn(&[4, 4], rng);
            let build = |t: &mut Tape, ids: &[NodeId]| {
                let y = t.spatial_mul(ids[0], ids[1])?;
                Ok(t.sum_all(y))
            };
            max_relative_error(&build, &[f, m], step, probes, rng)
        }
        "stack2" => {
            let a = randn(&[3, 4], rng);
            let b = randn(&[3, 4], rng);
            let build = |t: &mut Tape, ids: &[NodeId]| {
                let y = t.stack2(ids[0], ids[1])?;
                // Weight the two slabs differently so a swapped backward
                // would not cancel out.
                let w = t.leaf(&[2, 3, 4], (0..24).map(|v| 0.1 * v as f64).collect(), false)?;
                let z = t.mul(y, w)?;
                Ok(t.sum_all(z))
            };
            max_relative_error(&build, &[a, b], step, probes, rng)
        }
        "reshape" => {
            let a = randn(&[3, 4], rng);
            let build = |t: &mut Tape, ids: &[NodeId]| {
                let y = t.reshape(ids[0], &[2, 6])?;
                let s = t.sigmoid(y);
                Ok(t.sum_all(s))
            };
            max_relative_error(&build, &[a], step, probes, rng)
        }
        "sum_all" => {
            let a = randn(&[7], rng);
            let build = |t: &mut Tape, ids: &[NodeId]| Ok(t.sum_all(ids[0]));
            max_relative_error(&build, &[a], step, probes, rng)
        }
        "mean_all" => {
            let a = randn(&[7], rng);
            let build = |t: &mut Tape, ids: &[NodeId]| Ok(t.mean_all(ids[0]));
            max_relative_error(&build, &[a], step, probes, rng)
        }
        "softmax_cross_entropy" => {
            let logits = randn(&[7], rng);
            let build = |t: &mut Tape, ids: &[NodeId]| t.softmax_cross_entropy(ids[0], 3);
            max_relative_error(&build, &[logits], step, probes, rng)
        }
        "attention_loss" => {
            let am = randn(&[4, 4], rng);
            let mut target = Tensor::new(
                &[4, 4],
                (0..16).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect(),
            )?;
            target.set_requires_grad(false);
            // ids[1] is the frozen target; only the map is probed.
            let build = move |t: &mut Tape, ids: &[NodeId]| mga::attention_loss(t, ids[1], ids[0]);
            max_relative_error(&build, &[am, target], step, probes, rng)
        }
        "end_to_end" => {
            let cfg = ModelConfig {
                backbone: BackboneConfig {
                    in_channels: 3,
                    stage_channels: vec![4, 6],
                    blocks_per_stage: 1,
                    frozen_stages: 0,
                },
                num_classes: 2,
                variant: Variant::Mga,
                lambda: 0.5,
            };
            let model = Model::new(&cfg, rng.gen())?;
            let mut image = randn(&[3, 16, 16], rng);
            image.set_requires_grad(false);
            let mask_data: Vec<f64> = (0..256).map(|_| f64::from(rng.gen_bool(0.2))).collect();
            let mask = Tensor::new(&[16, 16], mask_data)?;
            let target = mga::resize_mask(&mask, 4, 4)?;
            let inputs: Vec<Tensor> = model
                .named_parameters()
                .into_iter()
                .map(|(_, t)| t.clone())
                .collect();
            let weights = crate::head::LossWeights::default();
            let build = move |t: &mut Tape, ids: &[NodeId]| {
                let binding = model.binding_from(ids)?;
                let pass = model.forward(t, &binding, &image, Some(&target))?;
                model.loss(t, &pass, 1, &weights)
            };
            max_relative_error(&build, &inputs, step, probes, rng)
        }
        other => Err(Error::config(format!("unknown op '{other}'"))),
    }
}
