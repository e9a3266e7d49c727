//! Reverse-mode autodiff on a flat tape.
//!
//! Every op appends one node holding its forward value and enough metadata
//! to replay its backward rule. Nodes are addressed by [`NodeId`]; inputs of
//! a node always have smaller ids, so [`Tape::backward`] is a single reverse
//! sweep. Gradients accumulate additively, which makes graphs that reuse a
//! tensor (the attention map feeds both the product and the loss) come out
//! right without any special casing.
//!
//! A tape is built per forward pass and dropped afterwards; parameters are
//! copied onto it as leaves. Repeated `backward` calls recompute gradients
//! from scratch rather than accumulating across calls.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Rule {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    Sigmoid { a: NodeId },
    Relu { a: NodeId },
    GlobalAvgPool { a: NodeId },
    AvgPool2d { a: NodeId, kh: usize, kw: usize },
    ChannelMean { a: NodeId },
    /// `winners[y*w + x]` is the channel that won the max at that position.
    ChannelMax { a: NodeId, winners: Vec<u32> },
    SpatialMul { features: NodeId, map: NodeId },
    Stack2 { a: NodeId, b: NodeId },
    Reshape { a: NodeId },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    /// Saved softmax probabilities make the backward rule a one-liner.
    SoftmaxCrossEntropy {
        logits: NodeId,
        label: usize,
        probs: Vec<f64>,
    },
    /// Test fixture: forward x^2 with a wrong backward rule, so the
    /// gradient checker has something real to catch.
    #[cfg(test)]
    BrokenSquare { a: NodeId },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    rule: Rule,
}

/// Computation tape: an append-only arena of nodes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

#[cfg(debug_assertions)]
fn debug_check_finite(values: &[f64], context: &str) {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        panic!("non-finite value {v} produced by {context}");
    }
}

#[cfg(not(debug_assertions))]
fn debug_check_finite(_values: &[f64], _context: &str) {}

fn axpy(dst: &mut [f64], scale: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, rule: Rule) -> NodeId {
        debug_check_finite(&data, "forward op");
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            rule,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    /// Registers a raw leaf.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::shape(format!(
                "leaf shape {shape:?} wants {numel} values, got {}",
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Rule::Leaf))
    }

    /// Copies a tensor onto the tape, keeping its `requires_grad` flag.
    pub fn input(&mut self, t: &Tensor) -> NodeId {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Rule::Leaf,
        )
    }

    /// Copies a tensor onto the tape as a non-differentiable constant.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Rule::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.node(id).data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.node(id).data.len(), 1);
        self.node(id).data[0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.node(id).requires_grad
    }

    /// Gradient of the last `backward` target with respect to `id`, if one
    /// was computed.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).filter(|g| !g.is_empty()).map(|g| g.as_slice())
    }

    // ---- convolution and linear ----

    /// 2-d convolution: input C_in x H x W, weight C_out x C_in x kh x kw,
    /// bias C_out. Zero padding on all sides.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::config("conv2d stride must be at least 1"));
        }
        let (ishape, wshape, bshape) = (
            self.node(input).shape.clone(),
            self.node(weight).shape.clone(),
            self.node(bias).shape.clone(),
        );
        if ishape.len() != 3 || wshape.len() != 4 || bshape.len() != 1 {
            return Err(Error::shape(format!(
                "conv2d wants ranks 3/4/1, got {ishape:?}/{wshape:?}/{bshape:?}"
            )));
        }
        let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (c_out, kc, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        if kc != c_in {
            return Err(Error::shape(format!(
                "conv2d weight expects {kc} input channels, input has {c_in}"
            )));
        }
        if bshape[0] != c_out {
            return Err(Error::shape(format!(
                "conv2d bias length {} does not match {c_out} output channels",
                bshape[0]
            )));
        }
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if ph < kh || pw < kw {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        let oh = (ph - kh) / stride + 1;
        let ow = (pw - kw) / stride + 1;
        let padded = pad_planes(&self.node(input).data, c_in, h, w, padding);
        let wdata = &self.node(weight).data;
        let bdata = &self.node(bias).data;
        let mut out = vec![0.0; c_out * oh * ow];
        for co in 0..c_out {
            let oplane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            oplane.fill(bdata[co]);
            for ci in 0..c_in {
                let pplane = &padded[ci * ph * pw..(ci + 1) * ph * pw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wdata[((co * c_in + ci) * kh + ky) * kw + kx];
                        for oy in 0..oh {
                            let prow = &pplane[(oy * stride + ky) * pw + kx..];
                            let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                for (o, &p) in orow.iter_mut().zip(&prow[..ow]) {
                                    *o += wv * p;
                                }
                            } else {
                                for (ox, o) in orow.iter_mut().enumerate() {
                                    *o += wv * prow[ox * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
        let req = self.node(input).requires_grad
            || self.node(weight).requires_grad
            || self.node(bias).requires_grad;
        Ok(self.push(
            vec![c_out, oh, ow],
            out,
            req,
            Rule::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Fully connected layer: input N, weight M x N, bias M.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ishape, wshape, bshape) = (
            &self.node(input).shape,
            &self.node(weight).shape,
            &self.node(bias).shape,
        );
        if ishape.len() != 1 || wshape.len() != 2 || bshape.len() != 1 {
            return Err(Error::shape(format!(
                "linear wants ranks 1/2/1, got {ishape:?}/{wshape:?}/{bshape:?}"
            )));
        }
        let (m, n) = (wshape[0], wshape[1]);
        if ishape[0] != n || bshape[0] != m {
            return Err(Error::shape(format!(
                "linear weight {m}x{n} with input {} and bias {}",
                ishape[0], bshape[0]
            )));
        }
        let x = &self.node(input).data;
        let wd = &self.node(weight).data;
        let bd = &self.node(bias).data;
        let mut out = Vec::with_capacity(m);
        for row in 0..m {
            let wr = &wd[row * n..(row + 1) * n];
            let dot: f64 = wr.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
            out.push(bd[row] + dot);
        }
        let req = self.node(input).requires_grad
            || self.node(weight).requires_grad
            || self.node(bias).requires_grad;
        Ok(self.push(vec![m], out, req, Rule::Linear { input, weight, bias }))
    }

    // ---- elementwise ----

    fn binary_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa == sb {
            return Ok(sa.clone());
        }
        if self.node(a).data.len() == 1 {
            return Ok(sb.clone());
        }
        if self.node(b).data.len() == 1 {
            return Ok(sa.clone());
        }
        Err(Error::shape(format!(
            "{op} on mismatched shapes {sa:?} and {sb:?} (only scalar broadcast is supported)"
        )))
    }

    fn binary_req(&self, a: NodeId, b: NodeId) -> bool {
        self.node(a).requires_grad || self.node(b).requires_grad
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shape("add", a, b)?;
        let (da, db) = (&self.node(a).data, &self.node(b).data);
        let out = if da.len() == db.len() {
            da.iter().zip(db.iter()).map(|(x, y)| x + y).collect()
        } else if da.len() == 1 {
            db.iter().map(|y| da[0] + y).collect()
        } else {
            da.iter().map(|x| x + db[0]).collect()
        };
        let req = self.binary_req(a, b);
        Ok(self.push(shape, out, req, Rule::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shape("sub", a, b)?;
        let (da, db) = (&self.node(a).data, &self.node(b).data);
        let out = if da.len() == db.len() {
            da.iter().zip(db.iter()).map(|(x, y)| x - y).collect()
        } else if da.len() == 1 {
            db.iter().map(|y| da[0] - y).collect()
        } else {
            da.iter().map(|x| x - db[0]).collect()
        };
        let req = self.binary_req(a, b);
        Ok(self.push(shape, out, req, Rule::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_shape("mul", a, b)?;
        let (da, db) = (&self.node(a).data, &self.node(b).data);
        let out = if da.len() == db.len() {
            da.iter().zip(db.iter()).map(|(x, y)| x * y).collect()
        } else if da.len() == 1 {
            db.iter().map(|y| da[0] * y).collect()
        } else {
            da.iter().map(|x| x * db[0]).collect()
        };
        let req = self.binary_req(a, b);
        Ok(self.push(shape, out, req, Rule::Mul { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let shape = self.node(a).shape.clone();
        let out = self.node(a).data.iter().map(|x| factor * x).collect();
        let req = self.node(a).requires_grad;
        self.push(shape, out, req, Rule::Scale { a, factor })
    }

    /// Numerically stable logistic; output is clamped a hair inside (0, 1)
    /// so downstream logs and the strict-range invariant hold even for
    /// saturating inputs.
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let shape = self.node(a).shape.clone();
        let out = self
            .node(a)
            .data
            .iter()
            .map(|&x| {
                let s = if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                };
                s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
            })
            .collect();
        let req = self.node(a).requires_grad;
        self.push(shape, out, req, Rule::Sigmoid { a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.node(a).shape.clone();
        let out = self.node(a).data.iter().map(|&x| x.max(0.0)).collect();
        let req = self.node(a).requires_grad;
        self.push(shape, out, req, Rule::Relu { a })
    }

    // ---- pooling and reductions ----

    /// C x H x W -> C, averaging each channel plane.
    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.node(a).shape.clone();
        if shape.len() != 3 {
            return Err(Error::shape(format!("global_avg_pool wants rank 3, got {shape:?}")));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let plane = h * w;
        let data = &self.node(a).data;
        let out = (0..c)
            .map(|ci| data[ci * plane..(ci + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let req = self.node(a).requires_grad;
        Ok(self.push(vec![c], out, req, Rule::GlobalAvgPool { a }))
    }

    /// Non-overlapping average pooling; the spatial dims must divide evenly.
    pub fn avg_pool2d(&mut self, a: NodeId, kh: usize, kw: usize) -> Result<NodeId> {
        let shape = self.node(a).shape.clone();
        if shape.len() != 3 {
            return Err(Error::shape(format!("avg_pool2d wants rank 3, got {shape:?}")));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::config("avg_pool2d window must be at least 1x1"));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if h % kh != 0 || w % kw != 0 {
            return Err(Error::shape(format!(
                "avg_pool2d window {kh}x{kw} does not divide input {h}x{w}"
            )));
        }
        let (oh, ow) = (h / kh, w / kw);
        let data = &self.node(a).data;
        let norm = 1.0 / (kh * kw) as f64;
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..kh {
                        let row = (ci * h + oy * kh + dy) * w + ox * kw;
                        acc += data[row..row + kw].iter().sum::<f64>();
                    }
                    out[(ci * oh + oy) * ow + ox] = acc * norm;
                }
            }
        }
        let req = self.node(a).requires_grad;
        Ok(self.push(vec![c, oh, ow], out, req, Rule::AvgPool2d { a, kh, kw }))
    }

    /// C x H x W -> H x W, averaging across channels per position.
    pub fn channel_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.node(a).shape.clone();
        if shape.len() != 3 {
            return Err(Error::shape(format!("channel_mean wants rank 3, got {shape:?}")));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let plane = h * w;
        let data = &self.node(a).data;
        let mut out = vec![0.0; plane];
        for ci in 0..c {
            axpy(&mut out, 1.0, &data[ci * plane..(ci + 1) * plane]);
        }
        let norm = 1.0 / c as f64;
        for v in out.iter_mut() {
            *v *= norm;
        }
        let req = self.node(a).requires_grad;
        Ok(self.push(vec![h, w], out, req, Rule::ChannelMean { a }))
    }

    /// C x H x W -> H x W, per-position max over channels. Ties go to the
    /// lowest channel index, and the backward pass routes the gradient only
    /// to the winning channel.
    pub fn channel_max(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.node(a).shape.clone();
        if shape.len() != 3 {
            return Err(Error::shape(format!("channel_max wants rank 3, got {shape:?}")));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let plane = h * w;
        let data = &self.node(a).data;
        let mut out = vec![0.0; plane];
        let mut winners = vec![0u32; plane];
        for p in 0..plane {
            let mut best = data[p];
            let mut win = 0u32;
            for ci in 1..c {
                let v = data[ci * plane + p];
                if v > best {
                    best = v;
                    win = ci as u32;
                }
            }
            out[p] = best;
            winners[p] = win;
        }
        let req = self.node(a).requires_grad;
        Ok(self.push(vec![h, w], out, req, Rule::ChannelMax { a, winners }))
    }

    /// Broadcast multiply of a C x H x W feature block by an H x W map.
    pub fn spatial_mul(&mut self, features: NodeId, map: NodeId) -> Result<NodeId> {
        let fshape = self.node(features).shape.clone();
        let mshape = self.node(map).shape.clone();
        if fshape.len() != 3 || mshape.len() != 2 || fshape[1..] != mshape[..] {
            return Err(Error::shape(format!(
                "spatial_mul wants C x H x W features with H x W map, got {fshape:?} and {mshape:?}"
            )));
        }
        let (c, h, w) = (fshape[0], fshape[1], fshape[2]);
        let plane = h * w;
        let fdata = &self.node(features).data;
        let mdata = &self.node(map).data;
        let mut out = vec![0.0; c * plane];
        for ci in 0..c {
            for p in 0..plane {
                out[ci * plane + p] = fdata[ci * plane + p] * mdata[p];
            }
        }
        let req = self.binary_req(features, map);
        Ok(self.push(vec![c, h, w], out, req, Rule::SpatialMul { features, map }))
    }

    /// Stacks two H x W maps into a 2 x H x W block.
    pub fn stack2(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa.len() != 2 || sa != sb {
            return Err(Error::shape(format!(
                "stack2 wants two equal H x W maps, got {sa:?} and {sb:?}"
            )));
        }
        let mut out = self.node(a).data.clone();
        out.extend_from_slice(&self.node(b).data);
        let req = self.binary_req(a, b);
        Ok(self.push(vec![2, sa[0], sa[1]], out, req, Rule::Stack2 { a, b }))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != self.node(a).data.len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.node(a).shape
            )));
        }
        let out = self.node(a).data.clone();
        let req = self.node(a).requires_grad;
        Ok(self.push(shape.to_vec(), out, req, Rule::Reshape { a }))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.node(a).data.iter().sum();
        let req = self.node(a).requires_grad;
        self.push(vec![1], vec![s], req, Rule::SumAll { a })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.node(a).data.len();
        let s: f64 = self.node(a).data.iter().sum();
        let req = self.node(a).requires_grad;
        self.push(vec![1], vec![s / n as f64], req, Rule::MeanAll { a })
    }

    /// Cross entropy of a softmax over 1-d logits against an integer label.
    /// Stabilized by max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let shape = self.node(logits).shape.clone();
        if shape.len() != 1 {
            return Err(Error::shape(format!(
                "softmax_cross_entropy wants rank-1 logits, got {shape:?}"
            )));
        }
        let k = shape[0];
        if label >= k {
            return Err(Error::config(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let data = &self.node(logits).data;
        let m = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = data.iter().map(|&v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
        let loss = sum.ln() + m - data[label];
        let req = self.node(logits).requires_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            req,
            Rule::SoftmaxCrossEntropy { logits, label, probs },
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss node. Gradients are then available
    /// through [`Tape::grad`] for every node that requires one.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        self.grads = vec![Vec::new(); self.nodes.len()];
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = vec![1.0];
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.grads[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            self.apply_rule(i, &g);
            self.grads[i] = g;
        }
        #[cfg(debug_assertions)]
        for (i, g) in self.grads.iter().enumerate() {
            if !g.is_empty() {
                debug_check_finite(g, &format!("backward of node {i}"));
            }
        }
        Ok(())
    }

    /// Lazily allocates the gradient buffer for `id` if that node wants one.
    fn slot<'g>(grads: &'g mut [Vec<f64>], nodes: &[Node], id: NodeId) -> Option<&'g mut Vec<f64>> {
        if !nodes[id.0].requires_grad {
            return None;
        }
        let numel = nodes[id.0].data.len();
        let g = &mut grads[id.0];
        if g.is_empty() {
            g.resize(numel, 0.0);
        }
        Some(g)
    }

    fn apply_rule(&mut self, index: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        match &nodes[index].rule {
            Rule::Leaf => {}
            Rule::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                conv2d_backward(nodes, grads, index, g, *input, *weight, *bias, *stride, *padding);
            }
            Rule::Linear { input, weight, bias } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let (m, n) = (nodes[weight.0].shape[0], nodes[weight.0].shape[1]);
                let x = &nodes[input.0].data;
                let wd = &nodes[weight.0].data;
                if let Some(dx) = Tape::slot(grads, nodes, input) {
                    for row in 0..m {
                        axpy(dx, g[row], &wd[row * n..(row + 1) * n]);
                    }
                }
                if let Some(dw) = Tape::slot(grads, nodes, weight) {
                    for row in 0..m {
                        axpy(&mut dw[row * n..(row + 1) * n], g[row], x);
                    }
                }
                if let Some(db) = Tape::slot(grads, nodes, bias) {
                    axpy(db, 1.0, g);
                }
            }
            Rule::Add { a, b } => {
                let (a, b) = (*a, *b);
                let na = nodes[a.0].data.len();
                let nb = nodes[b.0].data.len();
                if let Some(da) = Tape::slot(grads, nodes, a) {
                    if na == g.len() {
                        axpy(da, 1.0, g);
                    } else {
                        da[0] += g.iter().sum::<f64>();
                    }
                }
                if let Some(db) = Tape::slot(grads, nodes, b) {
                    if nb == g.len() {
                        axpy(db, 1.0, g);
                    } else {
                        db[0] += g.iter().sum::<f64>();
                    }
                }
            }
            Rule::Sub { a, b } => {
                let (a, b) = (*a, *b);
                let na = nodes[a.0].data.len();
                let nb = nodes[b.0].data.len();
                if let Some(da) = Tape::slot(grads, nodes, a) {
                    if na == g.len() {
                        axpy(da, 1.0, g);
                    } else {
                        da[0] += g.iter().sum::<f64>();
                    }
                }
                if let Some(db) = Tape::slot(grads, nodes, b) {
                    if nb == g.len() {
                        axpy(db, -1.0, g);
                    } else {
                        db[0] -= g.iter().sum::<f64>();
                    }
                }
            }
            Rule::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let na = nodes[a.0].data.len();
                let nb = nodes[b.0].data.len();
                if let Some(da) = Tape::slot(grads, nodes, a) {
                    let bd = &nodes[b.0].data;
                    if na == g.len() {
                        if nb == g.len() {
                            for i in 0..g.len() {
                                da[i] += g[i] * bd[i];
                            }
                        } else {
                            axpy(da, bd[0], g);
                        }
                    } else {
                        da[0] += g.iter().zip(bd).map(|(gv, bv)| gv * bv).sum::<f64>();
                    }
                }
                if let Some(db) = Tape::slot(grads, nodes, b) {
                    let ad = &nodes[a.0].data;
                    if nb == g.len() {
                        if na == g.len() {
                            for i in 0..g.len() {
                                db[i] += g[i] * ad[i];
                            }
                        } else {
                            axpy(db, ad[0], g);
                        }
                    } else {
                        db[0] += g.iter().zip(ad).map(|(gv, av)| gv * av).sum::<f64>();
                    }
                }
            }
            Rule::Scale { a, factor } => {
                let (a, factor) = (*a, *factor);
                if let Some(da) = Tape::slot(grads, nodes, a) {
                    axpy(da, factor, g);
                }
            }
            Rule::Sigmoid { a } => {
                let a = *a;
                let y = &nodes[index].data;
                if let Some(da) = Tape::slot(grads, nodes, a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Rule::Relu { a } => {
                let a = *a;
                let x = &nodes[a.0].data;
                if let Some(da) = Tape::slot(grads, nodes, a) {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                }
            }
            Rule::GlobalAvgPool { a } => {
                let a = *a;
                let shape = &nodes[a.0].shape;
                let plane = shape[1] * shape[2];
                let norm = 1.0 / plane as f64;
                if let Some(da) = Tape::slot(grads, nodes, a) {
                    for (ci, &gv) in g.iter().enumerate() {
                        for v in da[ci * plane..(ci + 1) * plane].iter_mut() {
                            *v += gv * norm;
                        }
                    }
                }
            }
            Rule::AvgPool2d { a, kh, kw } => {
                let (a, kh, kw) = (*a, *kh, *kw);
                let shape = &nodes[a.0].shape;
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (h / kh, w / kw);
                let norm = 1.0 / (kh * kw) as f64;
                if let Some(da) = Tape::slot(grads, nodes, a) {
                    for ci in 0..c {
                        for y in 0..h {
                            let grow = &g[(ci * oh + y / kh) * ow..];
                            let drow = &mut da[(ci * h + y) * w..(ci * h + y + 1) * w];
                            for (x, d) in drow.iter_mut().enumerate() {
                                *d += grow[x / kw] * norm;
                            }
                        }
                    }
                }
            }
            Rule::ChannelMean { a } => {
                let a = *a;
                let shape = &nodes[a.0].shape;
                let (c, plane) = (shape[0], shape[1] * shape[2]);
                let norm = 1.0 / c as f64;
                if let Some(da) = Tape::slot(grads, nodes, a) {
                    for ci in 0..c {
                        axpy(&mut da[ci * plane..(ci + 1) * plane], norm, g);
                    }
                }
            }
            Rule::ChannelMax { a, winners } => {
                let a = *a;
                let plane = winners.len();
                if let Some(da) = Tape::slot(grads, nodes, a) {
                    for (p, (&win, &gv)) in winners.iter().zip(g).enumerate() {
                        da[win as usize * plane + p] += gv;
                    }
                }
            }
            Rule::SpatialMul { features, map } => {
                let (features, map) = (*features, *map);
                let fshape = &nodes[features.0].shape;
                let (c, plane) = (fshape[0], fshape[1] * fshape[2]);
                if let Some(df) = Tape::slot(grads, nodes, features) {
                    let md = &nodes[map.0].data;
                    for ci in 0..c {
                        for p in 0..plane {
                            df[ci * plane + p] += g[ci * plane + p] * md[p];
                        }
                    }
                }
                if let Some(dm) = Tape::slot(grads, nodes, map) {
                    let fd = &nodes[features.0].data;
                    for ci in 0..c {
                        for p in 0..plane {
                            dm[p] += g[ci * plane + p] * fd[ci * plane + p];
                        }
                    }
                }
            }
            Rule::Stack2 { a, b } => {
                let (a, b) = (*a, *b);
                let plane = nodes[a.0].data.len();
                if let Some(da) = Tape::slot(grads, nodes, a) {
                    axpy(da, 1.0, &g[..plane]);
                }
                if let Some(db) = Tape::slot(grads, nodes, b) {
                    axpy(db, 1.0, &g[plane..]);
                }
            }
            Rule::Reshape { a } => {
                let a = *a;
                if let Some(da) = Tape::slot(grads, nodes, a) {
                    axpy(da, 1.0, g);
                }
            }
            Rule::SumAll { a } => {
                let a = *a;
                if let Some(da) = Tape::slot(grads, nodes, a) {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Rule::MeanAll { a } => {
                let a = *a;
                let norm = 1.0 / nodes[a.0].data.len() as f64;
                if let Some(da) = Tape::slot(grads, nodes, a) {
                    let gv = g[0] * norm;
                    for d in da.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Rule::SoftmaxCrossEntropy { logits, label, probs } => {
                let (logits, label) = (*logits, *label);
                let probs = probs.clone();
                if let Some(dl) = Tape::slot(grads, nodes, logits) {
                    for (k, &p) in probs.iter().enumerate() {
                        let ind = if k == label { 1.0 } else { 0.0 };
                        dl[k] += g[0] * (p - ind);
                    }
                }
            }
            #[cfg(test)]
            Rule::BrokenSquare { a } => {
                let a = *a;
                let x = &nodes[a.0].data;
                if let Some(da) = Tape::slot(grads, nodes, a) {
                    // Deliberately wrong: should be 2x.
                    for i in 0..g.len() {
                        da[i] += g[i] * x[i];
                    }
                }
            }
        }
    }

    /// Forward x^2 with a corrupted backward rule. Exists only so tests can
    /// prove the gradient checker rejects bad rules.
    #[cfg(test)]
    pub(crate) fn broken_square(&mut self, a: NodeId) -> NodeId {
        let shape = self.node(a).shape.clone();
        let out = self.node(a).data.iter().map(|x| x * x).collect();
        let req = self.node(a).requires_grad;
        self.push(shape, out, req, Rule::BrokenSquare { a })
    }
}

/// Copies channel planes into a zero-padded buffer.
fn pad_planes(data: &[f64], c: usize, h: usize, w: usize, padding: usize) -> Vec<f64> {
    if padding == 0 {
        return data.to_vec();
    }
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    let mut out = vec![0.0; c * ph * pw];
    for ci in 0..c {
        for y in 0..h {
            let src = &data[(ci * h + y) * w..(ci * h + y + 1) * w];
            let dst = (ci * ph + y + padding) * pw + padding;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    nodes: &[Node],
    grads: &mut [Vec<f64>],
    index: usize,
    g: &[f64],
    input: NodeId,
    weight: NodeId,
    bias: NodeId,
    stride: usize,
    padding: usize,
) {
    let ishape = &nodes[input.0].shape;
    let wshape = &nodes[weight.0].shape;
    let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
    let (c_out, _, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    let oshape = &nodes[index].shape;
    let (oh, ow) = (oshape[1], oshape[2]);
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);

    let need_input = nodes[input.0].requires_grad;
    let need_weight = nodes[weight.0].requires_grad;

    let padded = if need_weight {
        Some(pad_planes(&nodes[input.0].data, c_in, h, w, padding))
    } else {
        None
    };
    let mut dpadded = if need_input {
        Some(vec![0.0; c_in * ph * pw])
    } else {
        None
    };

    let wdata = &nodes[weight.0].data;
    for co in 0..c_out {
        let gplane = &g[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..c_in {
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((co * c_in + ci) * kh + ky) * kw + kx;
                    let wv = wdata[widx];
                    let mut wgrad = 0.0;
                    for oy in 0..oh {
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let pbase = (ci * ph + oy * stride + ky) * pw + kx;
                        if let Some(dp) = dpadded.as_mut() {
                            let drow = &mut dp[pbase..];
                            if stride == 1 {
                                for (d, &gv) in drow[..ow].iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            } else {
                                for (ox, &gv) in grow.iter().enumerate() {
                                    drow[ox * stride] += wv * gv;
                                }
                            }
                        }
                        if let Some(p) = padded.as_ref() {
                            let prow = &p[pbase..];
                            if stride == 1 {
                                wgrad += grow.iter().zip(&prow[..ow]).map(|(a, b)| a * b).sum::<f64>();
                            } else {
                                wgrad += grow
                                    .iter()
                                    .enumerate()
                                    .map(|(ox, &gv)| gv * prow[ox * stride])
                                    .sum::<f64>();
                            }
                        }
                    }
                    if need_weight {
                        if let Some(dw) = Tape::slot(grads, nodes, weight) {
                            dw[widx] += wgrad;
                        }
                    }
                }
            }
        }
    }
    if let Some(dp) = dpadded {
        if let Some(di) = Tape::slot(grads, nodes, input) {
            for ci in 0..c_in {
                for y in 0..h {
                    let src = (ci * ph + y + padding) * pw + padding;
                    let dst = &mut di[(ci * h + y) * w..(ci * h + y + 1) * w];
                    axpy(dst, 1.0, &dp[src..src + w]);
                }
            }
        }
    }
    if nodes[bias.0].requires_grad {
        if let Some(db) = Tape::slot(grads, nodes, bias) {
            for co in 0..c_out {
                db[co] += g[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: &[f64]) -> NodeId {
        tape.leaf(shape, data.to_vec(), true).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel_passes_input_through() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let w = leaf(&mut tape, &[1, 1, 1, 1], &[1.0]);
        let b = leaf(&mut tape, &[1], &[0.0]);
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv2d_ones_kernel_counts_neighbourhood() {
        // 3x3 ones input, 3x3 ones kernel, padding 1: each output counts the
        // pixels covered, so corners see 4, edges 6, center 9.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 3, 3], &[1.0; 9]);
        let w = leaf(&mut tape, &[1, 1, 3, 3], &[1.0; 9]);
        let b = leaf(&mut tape, &[1], &[0.0]);
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.value(y), &[9.0]);
        let y1 = tape.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.shape(y1), &[1, 3, 3]);
        assert_eq!(tape.value(y1), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv2d_bias_adds_per_channel() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2, 2], &[0.0; 4]);
        let w = leaf(&mut tape, &[2, 1, 1, 1], &[1.0, 1.0]);
        let b = leaf(&mut tape, &[2], &[0.25, -0.5]);
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), &[0.25, 0.25, 0.25, 0.25, -0.5, -0.5, -0.5, -0.5]);
    }

    #[test]
    fn conv2d_rejects_zero_sized_output_and_bad_channels() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2, 2], &[0.0; 4]);
        let w = leaf(&mut tape, &[1, 1, 3, 3], &[0.0; 9]);
        let b = leaf(&mut tape, &[1], &[0.0]);
        assert!(tape.conv2d(x, w, b, 1, 0).is_err());
        let w2 = leaf(&mut tape, &[1, 2, 1, 1], &[0.0; 2]);
        assert!(tape.conv2d(x, w2, b, 1, 0).is_err());
    }

    #[test]
    fn linear_matches_hand_example() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[1.0, 1.0]);
        let w = leaf(&mut tape, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, &[2], &[0.5, -0.5]);
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y), &[3.5, 6.5]);
    }

    #[test]
    fn elementwise_and_scalar_broadcast() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[3], &[1.0, 2.0, 3.0]);
        let b = leaf(&mut tape, &[3], &[10.0, 20.0, 30.0]);
        let s = leaf(&mut tape, &[1], &[2.0]);
        let sum = tape.add(a, b).unwrap();
        assert_eq!(tape.value(sum), &[11.0, 22.0, 33.0]);
        let diff = tape.sub(b, a).unwrap();
        assert_eq!(tape.value(diff), &[9.0, 18.0, 27.0]);
        let prod = tape.mul(a, s).unwrap();
        assert_eq!(tape.value(prod), &[2.0, 4.0, 6.0]);
        let shifted = tape.sub(s, a).unwrap();
        assert_eq!(tape.value(shifted), &[1.0, 0.0, -1.0]);
        let c = leaf(&mut tape, &[2], &[0.0, 0.0]);
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn sigmoid_and_relu_basics() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], &[0.0, -2.0, 1000.0]);
        let s = tape.sigmoid(x);
        let v = tape.value(s);
        assert_eq!(v[0], 0.5);
        assert!(v[1] > 0.0 && v[1] < 0.5);
        assert!(v[2] > 0.0 && v[2] < 1.0, "sigmoid must stay strictly inside (0,1)");
        let r = tape.relu(x);
        assert_eq!(tape.value(r), &[0.0, 0.0, 1000.0]);
    }

    #[test]
    fn pooling_examples() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let g = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(g), &[2.5]);
        let p = tape.avg_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.shape(p), &[1, 1, 1]);
        assert_eq!(tape.value(p), &[2.5]);
        let odd = leaf(&mut tape, &[1, 3, 3], &[0.0; 9]);
        assert!(tape.avg_pool2d(odd, 2, 2).is_err());
    }

    #[test]
    fn channel_mean_and_max_with_tie_break() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 1, 2], &[1.0, 5.0, 3.0, 5.0]);
        let mean = tape.channel_mean(x).unwrap();
        assert_eq!(tape.value(mean), &[2.0, 5.0]);
        let max = tape.channel_max(x).unwrap();
        assert_eq!(tape.value(max), &[3.0, 5.0]);
        // The tie at position 1 must send all gradient to channel 0.
        let s = tape.sum_all(max);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn spatial_mul_and_stack() {
        let mut tape = Tape::new();
        let f = leaf(&mut tape, &[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let m = leaf(&mut tape, &[1, 2], &[0.5, 2.0]);
        let y = tape.spatial_mul(f, m).unwrap();
        assert_eq!(tape.value(y), &[0.5, 4.0, 1.5, 8.0]);
        let a = leaf(&mut tape, &[1, 2], &[1.0, 2.0]);
        let b = leaf(&mut tape, &[1, 2], &[3.0, 4.0]);
        let st = tape.stack2(a, b).unwrap();
        assert_eq!(tape.shape(st), &[2, 1, 2]);
        assert_eq!(tape.value(st), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut tape = Tape::new();
        let even = leaf(&mut tape, &[2], &[0.3, 0.3]);
        let l = tape.softmax_cross_entropy(even, 0).unwrap();
        assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);
        // Strongly separated logits: the loss collapses to ln(1 + e^-20),
        // about 2.06e-9.
        let hard = leaf(&mut tape, &[2], &[10.0, -10.0]);
        let l2 = tape.softmax_cross_entropy(hard, 0).unwrap();
        let expect = (-20.0f64).exp().ln_1p();
        assert!((tape.scalar(l2) - expect).abs() < 1e-15);
        assert!(tape.scalar(l2) > 0.0);
        assert!(tape.softmax_cross_entropy(hard, 2).is_err());
    }

    #[test]
    fn backward_square_doubles() {
        // y = x * x uses x twice; accumulation must give dy/dx = 2x.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], &[1.0, -2.0, 0.5]);
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_sigmoid_slope_at_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1], &[0.0]);
        let y = tape.sigmoid(x);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn backward_mean_all_spreads_uniformly() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[4], &[1.0, 2.0, 3.0, 4.0]);
        let m = tape.mean_all(x);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn backward_skips_frozen_leaves() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0], false).unwrap();
        let w = leaf(&mut tape, &[2], &[3.0, 4.0]);
        let y = tape.mul(x, w).unwrap();
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_needs_scalar_loss() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[1.0, 2.0]);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_of_constant_graph_is_empty() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0], false).unwrap();
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
        assert!(tape.grad(s).is_none());
    }

    #[test]
    fn gradient_accumulates_across_two_uses() {
        // loss = sum(x*a) + sum(x*b) vs the two parts separately.
        let run = |with_both: bool| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = leaf(&mut tape, &[2], &[1.5, -0.5]);
            let a = tape.leaf(&[2], vec![2.0, 3.0], false).unwrap();
            let b = tape.leaf(&[2], vec![-1.0, 4.0], false).unwrap();
            let xa = tape.mul(x, a).unwrap();
            let sa = tape.sum_all(xa);
            let loss = if with_both {
                let xb = tape.mul(x, b).unwrap();
                let sb = tape.sum_all(xb);
                tape.add(sa, sb).unwrap()
            } else {
                sa
            };
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        assert_eq!(run(true), &[1.0, 7.0]);
        assert_eq!(run(false), &[2.0, 3.0]);
    }

    #[test]
    fn conv2d_stride_two_shape_and_values() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 4, 4], &(0..16).map(|v| v as f64).collect::<Vec<_>>());
        let w = leaf(&mut tape, &[1, 1, 2, 2], &[1.0; 4]);
        let b = leaf(&mut tape, &[1], &[0.0]);
        let y = tape.conv2d(x, w, b, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2]);
        // Each output sums a distinct 2x2 block.
        assert_eq!(tape.value(y), &[10.0, 18.0, 42.0, 50.0]);
    }

    #[test]
    fn reshape_preserves_data_and_grads() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let r = tape.reshape(x, &[4]).unwrap();
        assert_eq!(tape.value(r), tape.value(x));
        assert!(tape.reshape(x, &[3]).is_err());
        let s = tape.sum_all(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }
}
