//! Full classifier: backbone + attention + blended head, over three
//! ablation variants.
//!
//! `baseline` skips the attention path entirely, `attention` learns the map
//! without supervision, and `mga` additionally pulls the map towards a mask
//! target during training. All three share identical parameter shapes and
//! the same init draw order, so models built from the same seed start from
//! bitwise-identical weights regardless of variant.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::head::{self, BlendWeights, LinearHead, LossWeights};
use crate::mga::FusionParams;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Stream tag for parameter initialization (see [`crate::mix_seed`]).
const INIT_STREAM: u64 = 0x6d67615f_696e6974;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Attention,
    Mga,
}

impl Variant {
    pub fn all() -> [Variant; 3] {
        [Variant::Baseline, Variant::Attention, Variant::Mga]
    }

    pub fn uses_attention(self) -> bool {
        !matches!(self, Variant::Baseline)
    }

    pub fn uses_masks(self) -> bool {
        matches!(self, Variant::Mga)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Variant::Baseline => "baseline",
            Variant::Attention => "attention",
            Variant::Mga => "mga",
        };
        f.write_str(name)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "attention" => Ok(Variant::Attention),
            "mga" => Ok(Variant::Mga),
            other => Err(Error::config(format!(
                "unknown variant '{other}', expected baseline, attention or mga"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub variant: Variant,
    pub lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            num_classes: 10,
            variant: Variant::Mga,
            lambda: 0.5,
        }
    }
}

/// Node ids of all model parameters on some tape, in
/// [`Model::named_parameters`] order.
#[derive(Debug, Clone)]
pub struct Binding {
    ids: Vec<NodeId>,
    backbone_count: usize,
}

impl Binding {
    pub fn all_ids(&self) -> &[NodeId] {
        &self.ids
    }

    fn backbone_ids(&self) -> &[NodeId] {
        &self.ids[..self.backbone_count]
    }

    fn fusion_weight(&self) -> NodeId {
        self.ids[self.backbone_count]
    }

    fn fusion_bias(&self) -> NodeId {
        self.ids[self.backbone_count + 1]
    }

    fn head_weight(&self) -> NodeId {
        self.ids[self.backbone_count + 2]
    }

    fn head_bias(&self) -> NodeId {
        self.ids[self.backbone_count + 3]
    }
}

/// Result of one forward pass; node ids stay valid as long as the tape
/// lives.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: NodeId,
    /// Present for the attention and mga variants.
    pub attention: Option<NodeId>,
    /// Present when a mask target was supplied to an mga forward.
    pub att_loss: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub struct Model {
    backbone: Backbone,
    fusion: FusionParams,
    head: LinearHead,
    blend: BlendWeights,
    variant: Variant,
    num_classes: usize,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.num_classes < 2 {
            return Err(Error::config(format!(
                "need at least 2 classes, got {}",
                cfg.num_classes
            )));
        }
        let blend = BlendWeights::from_lambda(cfg.lambda)?;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::mix_seed(seed, INIT_STREAM));
        let backbone = Backbone::new(cfg.backbone.clone(), &mut rng)?;
        // The fusion conv starts at zero: a flat 0.5 attention map is a
        // neutral gate and keeps the sigmoid well away from saturation.
        let fusion = FusionParams::zeros();
        let head = LinearHead::new(cfg.backbone.out_channels(), cfg.num_classes, &mut rng)?;
        Ok(Model {
            backbone,
            fusion,
            head,
            blend,
            variant: cfg.variant,
            num_classes: cfg.num_classes,
        })
    }

    /// Same parameters, different wiring; used for paired ablations.
    pub fn with_variant(mut self, variant: Variant) -> Model {
        self.variant = variant;
        self
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn blend(&self) -> &BlendWeights {
        &self.blend
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.config().clone(),
            num_classes: self.num_classes,
            variant: self.variant,
            lambda: self.blend.lambda(),
        }
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.backbone.named_params();
        out.push(("fusion.weight".to_string(), &self.fusion.weight));
        out.push(("fusion.bias".to_string(), &self.fusion.bias));
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out
    }

    /// Mutable view of every parameter, frozen ones included, in the same
    /// order as [`Model::named_parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.backbone.params_mut();
        out.push(&mut self.fusion.weight);
        out.push(&mut self.fusion.bias);
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn param_tensor_count(&self) -> usize {
        self.backbone.param_tensor_count() + 4
    }

    /// Copies all parameters onto a tape and returns their ids.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let ids = self
            .named_parameters()
            .iter()
            .map(|(_, t)| tape.input(t))
            .collect();
        Binding {
            ids,
            backbone_count: self.backbone.param_tensor_count(),
        }
    }

    /// Wraps externally created leaves (finite-difference probing) in a
    /// binding. Order must match [`Model::named_parameters`].
    pub fn binding_from(&self, ids: &[NodeId]) -> Result<Binding> {
        if ids.len() != self.param_tensor_count() {
            return Err(Error::config(format!(
                "binding wants {} parameter ids, got {}",
                self.param_tensor_count(),
                ids.len()
            )));
        }
        Ok(Binding {
            ids: ids.to_vec(),
            backbone_count: self.backbone.param_tensor_count(),
        })
    }

    /// Forward pass for one image. `mask_target` is the already-resized
    /// mask at feature resolution; it only matters for the mga variant
    /// during training.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        image: &Tensor,
        mask_target: Option<&Tensor>,
    ) -> Result<ForwardPass> {
        let img = tape.constant(image);
        let f_img = self.backbone.forward(tape, binding.backbone_ids(), img)?;
        if !self.variant.uses_attention() {
            let logits = head::classify(tape, f_img, binding.head_weight(), binding.head_bias())?;
            return Ok(ForwardPass {
                logits,
                attention: None,
                att_loss: None,
            });
        }
        let am = crate::mga::attention_map(
            tape,
            f_img,
            binding.fusion_weight(),
            binding.fusion_bias(),
        )?;
        let f_att = head::apply_attention(tape, f_img, am)?;
        let f_final = head::blend(tape, f_img, f_att, &self.blend)?;
        let att_loss = match mask_target {
            Some(target) if self.variant.uses_masks() => {
                let t = tape.constant(target);
                Some(crate::mga::attention_loss(tape, t, am)?)
            }
            _ => None,
        };
        let logits = head::classify(tape, f_final, binding.head_weight(), binding.head_bias())?;
        Ok(ForwardPass {
            logits,
            attention: Some(am),
            att_loss,
        })
    }

    /// Combined objective for one forward pass.
    pub fn loss(
        &self,
        tape: &mut Tape,
        pass: &ForwardPass,
        label: usize,
        weights: &LossWeights,
    ) -> Result<NodeId> {
        head::total_loss(tape, pass.logits, label, pass.att_loss, weights)
    }

    /// Class prediction for a single image; ties resolve to the lowest
    /// class index.
    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let pass = self.forward(&mut tape, &binding, image, None)?;
        Ok(argmax_lowest(tape.value(pass.logits)))
    }

    /// Attention map for a single image as a plain tensor. Errors for the
    /// baseline variant, which has no attention path.
    pub fn attention_map(&self, image: &Tensor) -> Result<Tensor> {
        if !self.variant.uses_attention() {
            return Err(Error::config(
                "the baseline variant does not produce an attention map",
            ));
        }
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let pass = self.forward(&mut tape, &binding, image, None)?;
        let am = pass.attention.expect("attention variant produces a map");
        Tensor::new(tape.shape(am), tape.value(am).to_vec())
    }

    // ---- checkpointing ----

    /// Writes `manifest.txt` and `params.bin` into `dir` (created if
    /// needed). Byte-for-byte deterministic for a given model state.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        manifest.push_str("format mga-model 1\n");
        manifest.push_str(&format!("variant {}\n", self.variant));
        manifest.push_str(&format!("num_classes {}\n", self.num_classes));
        manifest.push_str(&format!("lambda {}\n", self.blend.lambda()));
        let bc = self.backbone.config();
        manifest.push_str(&format!("in_channels {}\n", bc.in_channels));
        let stages: Vec<String> = bc.stage_channels.iter().map(|c| c.to_string()).collect();
        manifest.push_str(&format!("stage_channels {}\n", stages.join(",")));
        manifest.push_str(&format!("blocks_per_stage {}\n", bc.blocks_per_stage));
        manifest.push_str(&format!("frozen_stages {}\n", bc.frozen_stages));
        for (name, tensor) in self.named_parameters() {
            let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("tensor {name} {}\n", dims.join(" ")));
        }
        fs::write(dir.join("manifest.txt"), manifest)?;

        let file = fs::File::create(dir.join("params.bin"))?;
        let mut out = BufWriter::new(file);
        for (_, tensor) in self.named_parameters() {
            tensor.write_record(&mut out)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Rebuilds a model from [`Model::save_checkpoint`] output.
    pub fn load_checkpoint(dir: &Path) -> Result<Model> {
        let manifest_path = dir.join("manifest.txt");
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", manifest_path.display())))?;
        let mut lines = text.lines();
        if lines.next() != Some("format mga-model 1") {
            return Err(Error::data(format!(
                "{} is not a model manifest",
                manifest_path.display()
            )));
        }
        let mut variant = None;
        let mut num_classes = None;
        let mut lambda = None;
        let mut bc = BackboneConfig::default();
        let mut tensor_specs: Vec<(String, Vec<usize>)> = Vec::new();
        for line in lines {
            let mut parts = line.split_whitespace();
            let Some(key) = parts.next() else { continue };
            match key {
                "variant" => variant = Some(Variant::from_str(parts.next().unwrap_or(""))?),
                "num_classes" => num_classes = Some(parse_field(parts.next(), "num_classes")?),
                "lambda" => lambda = Some(parse_field(parts.next(), "lambda")?),
                "in_channels" => bc.in_channels = parse_field(parts.next(), "in_channels")?,
                "stage_channels" => {
                    let raw = parts.next().unwrap_or("");
                    bc.stage_channels = raw
                        .split(',')
                        .map(|c| {
                            c.parse::<usize>().map_err(|_| {
                                Error::data(format!("bad stage_channels entry '{c}'"))
                            })
                        })
                        .collect::<Result<Vec<usize>>>()?;
                }
                "blocks_per_stage" => {
                    bc.blocks_per_stage = parse_field(parts.next(), "blocks_per_stage")?
                }
                "frozen_stages" => bc.frozen_stages = parse_field(parts.next(), "frozen_stages")?,
                "tensor" => {
                    let name = parts
                        .next()
                        .ok_or_else(|| Error::data("tensor line without a name"))?
                        .to_string();
                    let dims = parts
                        .map(|d| {
                            d.parse::<usize>()
                                .map_err(|_| Error::data(format!("bad dim '{d}' for {name}")))
                        })
                        .collect::<Result<Vec<usize>>>()?;
                    tensor_specs.push((name, dims));
                }
                other => {
                    return Err(Error::data(format!("unknown manifest key '{other}'")));
                }
            }
        }
        let cfg = ModelConfig {
            backbone: bc,
            num_classes: num_classes
                .ok_or_else(|| Error::data("manifest missing num_classes"))?,
            variant: variant.ok_or_else(|| Error::data("manifest missing variant"))?,
            lambda: lambda.ok_or_else(|| Error::data("manifest missing lambda"))?,
        };
        let mut model = Model::new(&cfg, 0)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_parameters()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        if tensor_specs != expected {
            return Err(Error::data(format!(
                "manifest tensors do not match the declared architecture in {}",
                dir.display()
            )));
        }

        let params_path = dir.join("params.bin");
        let file = fs::File::open(&params_path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", params_path.display())))?;
        let mut input = BufReader::new(file);
        for ((name, dims), param) in tensor_specs.iter().zip(model.parameters_mut()) {
            let stored = Tensor::read_record(&mut input).map_err(|e| {
                Error::data(format!("{}: while reading {name}: {e}", params_path.display()))
            })?;
            if stored.shape() != dims.as_slice() {
                return Err(Error::data(format!(
                    "{name} stored with shape {:?}, manifest says {dims:?}",
                    stored.shape()
                )));
            }
            param.data_mut().copy_from_slice(stored.data());
        }
        Ok(model)
    }
}

fn parse_field<T: FromStr>(raw: Option<&str>, key: &str) -> Result<T> {
    raw.and_then(|r| r.parse::<T>().ok())
        .ok_or_else(|| Error::data(format!("bad or missing manifest value for {key}")))
}

/// Index of the largest value; the first occurrence wins ties.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
