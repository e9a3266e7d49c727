//! Convolutional feature extractor.
//!
//! A stack of stages, each a run of 3x3 conv + ReLU blocks followed by a 2x2
//! average downsample. Three default stages turn a 3 x 64 x 64 image into a
//! 64 x 8 x 8 feature block. Early stages can be frozen; their parameters
//! are excluded from the trainable set and receive no gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels per stage, e.g. [16, 32, 64].
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Leading stages whose parameters stay fixed during training.
    pub frozen_stages: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 2,
            frozen_stages: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("backbone needs at least one input channel"));
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::config(format!(
                "stage_channels must be nonempty and positive, got {:?}",
                self.stage_channels
            )));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::config("blocks_per_stage must be at least 1"));
        }
        if self.frozen_stages > self.stage_channels.len() {
            return Err(Error::config(format!(
                "cannot freeze {} of {} stages",
                self.frozen_stages,
                self.stage_channels.len()
            )));
        }
        Ok(())
    }

    /// Every stage halves the spatial size, so inputs must divide by this.
    pub fn downsample_factor(&self) -> usize {
        1 << self.stage_channels.len()
    }

    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated nonempty")
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    weight: Tensor,
    bias: Tensor,
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<ConvBlock>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    stages: Vec<Stage>,
}

impl Backbone {
    /// He-initialized backbone. Weights draw from the rng in stage/block
    /// order; biases start at zero so the draw sequence is just the conv
    /// kernels.
    pub fn new<R: Rng>(cfg: BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.stage_channels.len());
        let mut in_ch = cfg.in_channels;
        for (s, &out_ch) in cfg.stage_channels.iter().enumerate() {
            let trainable = s >= cfg.frozen_stages;
            let mut blocks = Vec::with_capacity(cfg.blocks_per_stage);
            for _ in 0..cfg.blocks_per_stage {
                let fan_in = in_ch * 9;
                let mut weight = Tensor::he_init(&[out_ch, in_ch, 3, 3], fan_in, rng)?;
                let mut bias = Tensor::zeros(&[out_ch]);
                weight.set_requires_grad(trainable);
                bias.set_requires_grad(trainable);
                blocks.push(ConvBlock { weight, bias });
                in_ch = out_ch;
            }
            stages.push(Stage { blocks });
        }
        Ok(Backbone { cfg, stages })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Number of parameter tensors (a weight and a bias per block).
    pub fn param_tensor_count(&self) -> usize {
        self.stages.len() * self.cfg.blocks_per_stage * 2
    }

    /// All parameters in a stable order, frozen ones included.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.param_tensor_count());
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.blocks.iter().enumerate() {
                out.push((format!("backbone.stage{s}.block{b}.weight"), &block.weight));
                out.push((format!("backbone.stage{s}.block{b}.bias"), &block.bias));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.param_tensor_count());
        for stage in &mut self.stages {
            for block in &mut stage.blocks {
                out.push(&mut block.weight);
                out.push(&mut block.bias);
            }
        }
        out
    }

    /// Spatial size of the feature block produced from an H x W input.
    pub fn feature_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let div = self.cfg.downsample_factor();
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} must be divisible by {div} ({} downsampling stages)",
                self.stages.len()
            )));
        }
        Ok((h / div, w / div))
    }

    /// Runs the feature extractor on an image node already on the tape.
    /// `param_ids` must follow [`Backbone::named_params`] order.
    pub fn forward(&self, tape: &mut Tape, param_ids: &[NodeId], image: NodeId) -> Result<NodeId> {
        if param_ids.len() != self.param_tensor_count() {
            return Err(Error::config(format!(
                "backbone got {} parameter ids, wants {}",
                param_ids.len(),
                self.param_tensor_count()
            )));
        }
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "backbone wants {} x H x W input, got {shape:?}",
                self.cfg.in_channels
            )));
        }
        self.feature_hw(shape[1], shape[2])?;
        let mut x = image;
        let mut next = param_ids.iter();
        for stage in &self.stages {
            for _ in &stage.blocks {
                let w = *next.next().expect("count checked");
                let b = *next.next().expect("count checked");
                let conv = tape.conv2d(x, w, b, 1, 1)?;
                x = tape.relu(conv);
            }
            x = tape.avg_pool2d(x, 2, 2)?;
        }
        Ok(x)
    }
}
