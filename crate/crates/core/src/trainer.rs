//! Training loop, evaluation and the three-variant ablation.
//!
//! Optimization is SGD with momentum under a cosine-annealed learning
//! rate. Each batch runs one forward/backward pass per sample on its own
//! tape; per-sample gradients are summed in sample order and averaged, so
//! results are bitwise reproducible for a fixed seed in both execution
//! modes. Augmentation draws come from per-(epoch, slot) streams, never
//! from a shared mutable generator, for the same reason.
//!
//! Mask supervision is only consulted for a variant that trains with it;
//! evaluation never reads masks, so a test set without them scores fine.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment;
use crate::dataset::{self, Sample};
use crate::error::{Error, Result};
use crate::head::LossWeights;
use crate::mga;
use crate::model::{Model, ModelConfig, Variant};
use crate::parallel::{self, ExecMode};
use crate::synth::SynthSpec;
use crate::tape::Tape;
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 0x7368_7566;
const AUGMENT_STREAM: u64 = 0x6175_6766;

/// Cosine-annealed learning rate for epoch `t` of `total`:
/// `lr0 * 0.5 * (1 + cos(pi * t / total))`. `t` counts from zero.
pub fn lr_schedule(lr0: f64, t: usize, total: usize) -> Result<f64> {
    if total == 0 || t >= total {
        return Err(Error::config(format!(
            "epoch index {t} outside schedule of length {total}"
        )));
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

/// One SGD momentum update: `v <- momentum * v + grad`, `p <- p - lr * v`.
/// Parameters without a gradient contribute zero; frozen parameters are
/// skipped entirely.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    velocity: &mut [Vec<f64>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != velocity.len() {
        return Err(Error::shape(format!(
            "{} parameters but {} velocity buffers",
            params.len(),
            velocity.len()
        )));
    }
    for (param, vel) in params.iter_mut().zip(velocity.iter_mut()) {
        if vel.len() != param.numel() {
            return Err(Error::shape(format!(
                "velocity buffer of length {} for a parameter of {} elements",
                vel.len(),
                param.numel()
            )));
        }
        if !param.requires_grad() {
            continue;
        }
        match param.grad() {
            Some(grad) => {
                // Collect first: grad borrows param immutably.
                let grad = grad.to_vec();
                for (v, g) in vel.iter_mut().zip(&grad) {
                    *v = momentum * *v + g;
                }
            }
            None => {
                for v in vel.iter_mut() {
                    *v *= momentum;
                }
            }
        }
        for (p, v) in param.data_mut().iter_mut().zip(vel.iter()) {
            *p -= lr * v;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub loss: LossWeights,
    pub augment: bool,
    pub seed: u64,
    pub mode: ExecMode,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 20,
            batch_size: 16,
            lr0: 0.05,
            momentum: 0.9,
            loss: LossWeights::default(),
            augment: true,
            seed: 42,
            mode: ExecMode::default(),
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !self.lr0.is_finite() || self.lr0 < 0.0 {
            return Err(Error::config(format!("learning rate must be >= 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Per-epoch training statistics. Losses average over the augmented
/// training passes; accuracies come from clean evaluation passes.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_att: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

pub const CSV_HEADER: &str = "epoch,lr,loss_ce,loss_att,train_acc,test_acc";

pub fn records_to_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        // f64 Display prints the shortest exact representation, so the
        // file is deterministic and parses back to the same bits.
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.lr, r.loss_ce, r.loss_att, r.train_acc, r.test_acc
        )
        .expect("writing to a String cannot fail");
    }
    out
}

pub fn write_records_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    fs::write(path, records_to_csv(records))?;
    Ok(())
}

/// What one sample pass hands back to the batch reducer.
struct SamplePass {
    ce: f64,
    att: f64,
    grads: Vec<Option<Vec<f64>>>,
}

/// Trains the model in place and returns one record per epoch.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    test_set: &[Sample],
    opts: &TrainOptions,
) -> Result<Vec<EpochRecord>> {
    train_with(model, train_set, test_set, opts, |_| {})
}

/// [`train`] with an observer called after every finished epoch, for
/// progress reporting during long runs.
pub fn train_with<F: FnMut(&EpochRecord)>(
    model: &mut Model,
    train_set: &[Sample],
    test_set: &[Sample],
    opts: &TrainOptions,
    mut observer: F,
) -> Result<Vec<EpochRecord>> {
    opts.validate()?;
    if train_set.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    for (i, sample) in train_set.iter().chain(test_set).enumerate() {
        if sample.label >= model.num_classes() {
            return Err(Error::data(format!(
                "sample {i} has label {} but the model knows {} classes",
                sample.label,
                model.num_classes()
            )));
        }
    }
    let needs_masks = model.variant().uses_masks();
    if needs_masks {
        if let Some((i, sample)) = train_set.iter().enumerate().find(|(_, s)| s.mask.is_none()) {
            return Err(Error::data(format!(
                "training sample {i} (label {}) has no mask; this variant trains with mask supervision on every sample",
                sample.label
            )));
        }
    }
    // The attention penalty only exists where attention is supervised.
    let weights = if needs_masks {
        opts.loss.clone()
    } else {
        LossWeights::new(0.0)?
    };
    let feature_hw = {
        let first = &train_set[0];
        model.backbone().feature_hw(first.height(), first.width())?
    };

    let sizes: Vec<usize> = model
        .named_parameters()
        .iter()
        .map(|(_, t)| t.numel())
        .collect();
    let mut velocity: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();

    let mut records = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let lr = lr_schedule(opts.lr0, epoch, opts.epochs)?;
        let mut order: Vec<(usize, usize)> = (0..train_set.len()).map(|i| (0, i)).collect();
        let shuffle_seed = crate::mix_seed(crate::mix_seed(opts.seed, SHUFFLE_STREAM), epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        for (slot, entry) in order.iter_mut().enumerate() {
            entry.0 = slot;
        }

        let mut ce_sum = 0.0;
        let mut att_sum = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let passes = parallel::map_collect(opts.mode, chunk, |&(slot, index)| {
                sample_pass(model, &train_set[index], epoch, slot, opts, &weights, feature_hw)
            });
            let mut batch_grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for pass in passes {
                let pass = pass?;
                ce_sum += pass.ce;
                att_sum += pass.att;
                for (sum, grad) in batch_grads.iter_mut().zip(&pass.grads) {
                    if let Some(grad) = grad {
                        for (s, g) in sum.iter_mut().zip(grad) {
                            *s += g;
                        }
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            let mut params = model.parameters_mut();
            for (param, grad) in params.iter_mut().zip(batch_grads.iter_mut()) {
                if !param.requires_grad() {
                    continue;
                }
                for g in grad.iter_mut() {
                    *g *= inv;
                }
                param.zero_grad();
                param.accumulate_grad(grad)?;
            }
            sgd_step(&mut params, &mut velocity, lr, opts.momentum)?;
        }

        let n = train_set.len() as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            loss_ce: ce_sum / n,
            loss_att: att_sum / n,
            train_acc: evaluate(model, train_set, opts.mode)?,
            test_acc: evaluate(model, test_set, opts.mode)?,
        };
        observer(&record);
        records.push(record);
    }
    Ok(records)
}

/// One augmented forward/backward pass on a private tape.
fn sample_pass(
    model: &Model,
    sample: &Sample,
    epoch: usize,
    slot: usize,
    opts: &TrainOptions,
    weights: &LossWeights,
    feature_hw: (usize, usize),
) -> Result<SamplePass> {
    let prepared;
    let sample = if opts.augment {
        let aug_seed = crate::mix_seed(
            crate::mix_seed(crate::mix_seed(opts.seed, AUGMENT_STREAM), epoch as u64),
            slot as u64,
        );
        prepared = augment::augment(sample, &mut ChaCha8Rng::seed_from_u64(aug_seed))?;
        &prepared
    } else {
        sample
    };

    let mask_target = if model.variant().uses_masks() {
        let mask = sample.mask.as_ref().ok_or_else(|| {
            Error::data("sample lost its mask during augmentation".to_string())
        })?;
        Some(mga::resize_mask(mask, feature_hw.0, feature_hw.1)?)
    } else {
        None
    };

    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let pass = model.forward(&mut tape, &binding, &sample.image, mask_target.as_ref())?;
    let total = model.loss(&mut tape, &pass, sample.label, weights)?;
    tape.backward(total)?;

    let total_v = tape.scalar(total);
    let att_v = pass.att_loss.map(|id| tape.scalar(id)).unwrap_or(0.0);
    let ce_v = if pass.att_loss.is_some() && weights.tau() > 0.0 {
        total_v - weights.tau() * att_v
    } else {
        total_v
    };
    let grads = binding
        .all_ids()
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()))
        .collect();
    Ok(SamplePass {
        ce: ce_v,
        att: att_v,
        grads,
    })
}

/// Fraction of correct predictions on clean images. Masks and augmentation
/// play no part here.
pub fn evaluate(model: &Model, samples: &[Sample], mode: ExecMode) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::data("cannot evaluate on an empty sample set"));
    }
    let outcomes = parallel::map_collect(mode, samples, |s| {
        model.predict(&s.image).map(|p| p == s.label)
    });
    let mut correct = 0usize;
    for outcome in outcomes {
        if outcome? {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Fraction of samples whose mean attention over mask foreground exceeds
/// the mean over background, both taken at feature resolution. Needs an
/// attention-capable model and a mask per sample.
pub fn localization_fraction(model: &Model, samples: &[Sample], mode: ExecMode) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::data("cannot measure localization on an empty sample set"));
    }
    let outcomes = parallel::map_collect(mode, samples, |s| -> Result<bool> {
        let mask = s.mask.as_ref().ok_or_else(|| {
            Error::data("attention localization needs a mask for every sample".to_string())
        })?;
        let attention = model.attention_map(&s.image)?;
        let (fh, fw) = (attention.shape()[0], attention.shape()[1]);
        let target = mga::resize_mask(mask, fh, fw)?;
        let mut fg = (0.0f64, 0usize);
        let mut bg = (0.0f64, 0usize);
        for (&a, &m) in attention.data().iter().zip(target.data()) {
            if m > 0.0 {
                fg = (fg.0 + a, fg.1 + 1);
            } else {
                bg = (bg.0 + a, bg.1 + 1);
            }
        }
        if fg.1 == 0 || bg.1 == 0 {
            return Ok(false);
        }
        Ok(fg.0 / fg.1 as f64 > bg.0 / bg.1 as f64)
    });
    let mut localized = 0usize;
    for outcome in outcomes {
        if outcome? {
            localized += 1;
        }
    }
    Ok(localized as f64 / samples.len() as f64)
}

/// Ablation setup: one synthetic dataset and training run per seed, all
/// three variants trained from identical initial weights on identical
/// splits.
#[derive(Debug, Clone)]
pub struct AblationOptions {
    /// Dataset template; its seed field is replaced by each run seed.
    pub data: SynthSpec,
    /// Model template; its variant field is replaced per run.
    pub model: ModelConfig,
    /// Training template; its seed field is replaced by each run seed.
    pub train: TrainOptions,
    pub split: (u32, u32),
    pub seeds: Vec<u64>,
}

/// Per-seed ablation outcome. Test accuracies are indexed like
/// [`Variant::all`]: baseline, attention, mga. The trained mga model and
/// the test split stick around for attention inspection.
#[derive(Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub accs: [f64; 3],
    pub mga_model: Model,
    pub test_set: Vec<Sample>,
}

#[derive(Debug)]
pub struct AblationReport {
    pub rows: Vec<SeedOutcome>,
    /// Median test accuracy per variant, baseline / attention / mga.
    pub medians: [f64; 3],
}

impl AblationReport {
    /// Row whose mga accuracy realizes the mga median (the first one, if
    /// several tie).
    pub fn median_mga_row(&self) -> &SeedOutcome {
        let target = self.medians[2];
        self.rows
            .iter()
            .find(|r| r.accs[2] == target)
            .unwrap_or(&self.rows[0])
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("accuracies are finite"));
    sorted[(sorted.len() - 1) / 2]
}

/// Runs the full ablation grid. For every seed the three variants see the
/// same samples, the same split and the same initial shared weights, so
/// accuracy differences come from the wiring, not from initialization
/// luck.
pub fn ablate(opts: &AblationOptions) -> Result<AblationReport> {
    ablate_with(opts, |_, _, _| {})
}

/// [`ablate`] with an observer called after each (seed, variant) run with
/// its final test accuracy.
pub fn ablate_with<F: FnMut(u64, Variant, f64)>(
    opts: &AblationOptions,
    mut observer: F,
) -> Result<AblationReport> {
    if opts.seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let mut rows = Vec::with_capacity(opts.seeds.len());
    for &seed in &opts.seeds {
        let mut spec = opts.data.clone();
        spec.seed = seed;
        let samples = crate::synth::generate_with_mode(&spec, opts.train.mode)?;
        let (train_set, test_set) =
            dataset::split_dataset(samples, opts.split.0, opts.split.1, seed)?;

        let mut accs = [0.0f64; 3];
        let mut mga_model = None;
        for (slot, variant) in Variant::all().into_iter().enumerate() {
            let mut cfg = opts.model.clone();
            cfg.variant = variant;
            let mut model = Model::new(&cfg, seed)?;
            let mut train_opts = opts.train.clone();
            train_opts.seed = seed;
            train(&mut model, &train_set, &test_set, &train_opts)?;
            accs[slot] = evaluate(&model, &test_set, train_opts.mode)?;
            observer(seed, variant, accs[slot]);
            if variant == Variant::Mga {
                mga_model = Some(model);
            }
        }
        rows.push(SeedOutcome {
            seed,
            accs,
            mga_model: mga_model.expect("Variant::all always contains Mga"),
            test_set,
        });
    }
    let medians = [
        median(&rows.iter().map(|r| r.accs[0]).collect::<Vec<_>>()),
        median(&rows.iter().map(|r| r.accs[1]).collect::<Vec<_>>()),
        median(&rows.iter().map(|r| r.accs[2]).collect::<Vec<_>>()),
    ];
    Ok(AblationReport { rows, medians })
}
