//! Run configuration: defaults, key=value files, and override layering.
//!
//! A config file is plain text, one `key = value` per line, `#` for
//! comments. Values layer in a fixed order: built-in defaults, then the
//! file, then command-line flags, and a run echoes the effective result
//! back to disk so it can be reproduced by pointing `--config` at the
//! echo. Unknown keys are errors rather than warnings; silently ignoring
//! a typo like `epochz` costs hours.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::head::LossWeights;
use crate::model::{ModelConfig, Variant};
use crate::synth::SynthSpec;
use crate::trainer::TrainOptions;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Dataset generation.
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub branch_angle_base: f64,
    pub angle_delta: f64,
    pub noise_std: f64,
    // Model.
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub frozen_stages: usize,
    pub variant: Variant,
    pub lambda: f64,
    // Training.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub tau: f64,
    pub augment: bool,
    pub train_ratio: u32,
    pub test_ratio: u32,
    pub seed: u64,
    // Paths. `data` stays empty until a dataset directory is named.
    pub data: String,
    pub out: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            classes: 10,
            per_class: 20,
            image_size: 64,
            branch_angle_base: 20.0,
            angle_delta: 6.0,
            noise_std: 0.05,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 2,
            frozen_stages: 0,
            variant: Variant::Mga,
            lambda: 0.5,
            epochs: 20,
            batch_size: 16,
            lr: 0.05,
            momentum: 0.9,
            tau: 0.1,
            augment: true,
            train_ratio: 2,
            test_ratio: 1,
            seed: 42,
            data: String::new(),
            out: String::from("out"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("cannot parse `{value}` as a value for `{key}`")))
}

impl RunConfig {
    /// Applies one key/value pair. Shared by the file parser and the flag
    /// layer so both speak the same vocabulary.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "classes" => self.classes = parse_value(key, value)?,
            "per_class" => self.per_class = parse_value(key, value)?,
            "image_size" => self.image_size = parse_value(key, value)?,
            "branch_angle_base" => self.branch_angle_base = parse_value(key, value)?,
            "angle_delta" => self.angle_delta = parse_value(key, value)?,
            "noise_std" => self.noise_std = parse_value(key, value)?,
            "stage_channels" => {
                let parsed: Result<Vec<usize>> = value
                    .split(',')
                    .map(|part| parse_value(key, part.trim()))
                    .collect();
                let parsed = parsed?;
                if parsed.is_empty() || parsed.contains(&0) {
                    return Err(Error::config(format!(
                        "stage_channels needs positive entries, got `{value}`"
                    )));
                }
                self.stage_channels = parsed;
            }
            "blocks_per_stage" => self.blocks_per_stage = parse_value(key, value)?,
            "frozen_stages" => self.frozen_stages = parse_value(key, value)?,
            "variant" => self.variant = value.parse()?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "augment" => self.augment = parse_value(key, value)?,
            "split" => {
                let (a, b) = value.split_once(':').ok_or_else(|| {
                    Error::config(format!("split wants the form `train:test`, got `{value}`"))
                })?;
                self.train_ratio = parse_value(key, a.trim())?;
                self.test_ratio = parse_value(key, b.trim())?;
            }
            "seed" => self.seed = parse_value(key, value)?,
            "data" => self.data = value.to_string(),
            "out" => self.out = value.to_string(),
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` text on top of the current values.
    pub fn apply_str(&mut self, text: &str, origin: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "{origin}:{}: expected `key = value`, got `{line}`",
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::config(format!("{origin}:{}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_str(&text, &path.display().to_string())
    }

    /// Serializes every setting in a stable order; the output parses back
    /// to an equal config.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let channels = self
            .stage_channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(out, "classes = {}", self.classes);
        let _ = writeln!(out, "per_class = {}", self.per_class);
        let _ = writeln!(out, "image_size = {}", self.image_size);
        let _ = writeln!(out, "branch_angle_base = {}", self.branch_angle_base);
        let _ = writeln!(out, "angle_delta = {}", self.angle_delta);
        let _ = writeln!(out, "noise_std = {}", self.noise_std);
        let _ = writeln!(out, "stage_channels = {channels}");
        let _ = writeln!(out, "blocks_per_stage = {}", self.blocks_per_stage);
        let _ = writeln!(out, "frozen_stages = {}", self.frozen_stages);
        let _ = writeln!(out, "variant = {}", self.variant);
        let _ = writeln!(out, "lambda = {}", self.lambda);
        let _ = writeln!(out, "epochs = {}", self.epochs);
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "lr = {}", self.lr);
        let _ = writeln!(out, "momentum = {}", self.momentum);
        let _ = writeln!(out, "tau = {}", self.tau);
        let _ = writeln!(out, "augment = {}", self.augment);
        let _ = writeln!(out, "split = {}:{}", self.train_ratio, self.test_ratio);
        let _ = writeln!(out, "seed = {}", self.seed);
        if !self.data.is_empty() {
            let _ = writeln!(out, "data = {}", self.data);
        }
        let _ = writeln!(out, "out = {}", self.out);
        out
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            classes: self.classes,
            samples_per_class: self.per_class,
            image_size: self.image_size,
            branch_angle_base: self.branch_angle_base,
            angle_delta: self.angle_delta,
            noise_std: self.noise_std,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                in_channels: 3,
                stage_channels: self.stage_channels.clone(),
                blocks_per_stage: self.blocks_per_stage,
                frozen_stages: self.frozen_stages,
            },
            num_classes: self.classes,
            variant: self.variant,
            lambda: self.lambda,
        }
    }

    pub fn train_options(&self) -> Result<TrainOptions> {
        Ok(TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr,
            momentum: self.momentum,
            loss: LossWeights::new(self.tau)?,
            augment: self.augment,
            seed: self.seed,
            ..TrainOptions::default()
        })
    }
}
