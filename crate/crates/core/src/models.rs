//! Graph builders for the three experiment architectures.
//!
//! Every builder takes NHWC image batches plus one-hot labels and ends in a
//! mean softmax cross-entropy. Biases and per-channel scales are separate
//! nodes, so each gets its own frontier accumulator.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, OpKind, Role};
use crate::tensor::{Padding, Real, Tensor};

pub const MLP5_WIDTHS: [usize; 4] = [256, 128, 64, 32];
pub const VGG6_CHANNELS: [usize; 5] = [16, 16, 32, 32, 64];
pub const RESNET20_WIDTHS: [usize; 3] = [16, 32, 64];
pub const CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    Mlp5,
    Vgg6,
    Resnet20,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::Mlp5, Architecture::Vgg6, Architecture::Resnet20];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Mlp5 => "mlp5",
            Architecture::Vgg6 => "vgg6",
            Architecture::Resnet20 => "resnet20",
        }
    }

    /// Per-example input extents `[H, W, C]`.
    pub fn input_dims(self) -> [usize; 3] {
        match self {
            Architecture::Mlp5 => [28, 28, 1],
            _ => [32, 32, 3],
        }
    }

    pub fn default_widths(self) -> Vec<usize> {
        match self {
            Architecture::Mlp5 => MLP5_WIDTHS.to_vec(),
            Architecture::Vgg6 => VGG6_CHANNELS.to_vec(),
            Architecture::Resnet20 => RESNET20_WIDTHS.to_vec(),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown model `{s}` (expected mlp5, vgg6 or resnet20)")))
    }
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `±sqrt(6 / fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

/// A built model: the graph plus the handles a training loop needs.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub widths: Vec<usize>,
    pub batch: usize,
    pub graph: Graph,
    pub input: NodeId,
    pub labels: NodeId,
    pub logits: NodeId,
    pub loss: NodeId,
    /// Parameters in creation order with their initializers.
    pub params: Vec<(NodeId, Init)>,
}

/// Accumulator and parameter sizes at one frontier node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrontierDims {
    pub node: NodeId,
    pub op: OpKind,
    /// Name of the first parameter feeding the node.
    pub param: String,
    /// Elements of the batch-reduced accumulator.
    pub accumulator: usize,
    /// Elements of the parameters feeding the node.
    pub parameters: usize,
}

impl FrontierDims {
    pub fn holds(&self) -> bool {
        self.accumulator < self.parameters
    }
}

impl Model {
    pub fn param_ids(&self) -> Vec<NodeId> {
        self.params.iter().map(|(id, _)| *id).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.graph.parameter_count()
    }

    /// Conv2D and MatMul layers, counted once each.
    pub fn weight_layers(&self) -> usize {
        self.graph.nodes().iter().filter(|n| matches!(n.op.kind(), OpKind::Conv2d | OpKind::MatMul)).count()
    }

    /// Initial parameter values, a pure function of `seed`.
    pub fn init(&self, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.params
            .iter()
            .map(|&(id, init)| {
                let shape = self.graph.shape(id);
                match init {
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::full(shape, 1.0),
                    Init::FanIn(fan_in) => {
                        let bound = (6.0 / fan_in as f64).sqrt();
                        let dist = Uniform::new_inclusive(-bound, bound);
                        let data = (0..shape.numel()).map(|_| dist.sample(&mut rng) as Real).collect();
                        Tensor::from_shape(shape.clone(), data).expect("shape matches")
                    }
                }
            })
            .collect()
    }

    /// Sizes at every frontier node, accumulators reduced over the batch axis.
    pub fn frontier_dims(&self) -> Vec<FrontierDims> {
        let g = &self.graph;
        g.frontier()
            .into_iter()
            .map(|f| {
                let node = g.node(f.id).expect("frontier id");
                let name = match &g.node(f.params[0].1).expect("param id").op {
                    crate::graph::Op::Parameter { name } => name.clone(),
                    _ => String::new(),
                };
                FrontierDims {
                    node: f.id,
                    op: node.op.kind(),
                    param: name,
                    accumulator: node.shape.without_batch().numel(),
                    parameters: f.params.iter().map(|(_, p)| g.shape(*p).numel()).sum(),
                }
            })
            .collect()
    }

    /// Conv2D and MatMul frontier nodes whose accumulator is not smaller than
    /// the weights feeding them.
    pub fn accumulator_excess(&self) -> Vec<FrontierDims> {
        self.frontier_dims()
            .into_iter()
            .filter(|d| matches!(d.op, OpKind::Conv2d | OpKind::MatMul) && !d.holds())
            .collect()
    }
}

struct Builder {
    g: Graph,
    params: Vec<(NodeId, Init)>,
}

impl Builder {
    fn param(&mut self, name: String, dims: Vec<usize>, init: Init) -> Result<NodeId> {
        let id = self.g.parameter(name, dims)?;
        self.params.push((id, init));
        Ok(id)
    }

    fn dense(&mut self, x: NodeId, name: &str, out: usize) -> Result<NodeId> {
        let fan_in = self.g.shape(x).dims()[1];
        let w = self.param(format!("{name}/w"), vec![fan_in, out], Init::FanIn(fan_in))?;
        let b = self.param(format!("{name}/b"), vec![out], Init::Zeros)?;
        let y = self.g.matmul(x, w)?;
        self.g.bias_add(y, b)
    }

    fn conv(&mut self, x: NodeId, name: &str, out: usize, stride: usize) -> Result<NodeId> {
        let cin = self.g.shape(x).dims()[3];
        let w = self.param(format!("{name}/w"), vec![3, 3, cin, out], Init::FanIn(9 * cin))?;
        self.g.conv2d(x, w, stride, Padding::Same)
    }

    fn conv_bias(&mut self, x: NodeId, name: &str, out: usize) -> Result<NodeId> {
        let y = self.conv(x, name, out, 1)?;
        let b = self.param(format!("{name}/b"), vec![out], Init::Zeros)?;
        self.g.bias_add(y, b)
    }

    /// Per-channel `scale * x + shift`, starting at the identity.
    fn affine(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let c = *self.g.shape(x).dims().last().expect("rank >= 1");
        let s = self.param(format!("{name}/scale"), vec![c], Init::Ones)?;
        let b = self.param(format!("{name}/shift"), vec![c], Init::Zeros)?;
        let y = self.g.scale_channels(x, s)?;
        self.g.bias_add(y, b)
    }

    fn finish(mut self, arch: Architecture, widths: &[usize], batch: usize, x: NodeId, labels: NodeId, logits: NodeId) -> Result<Model> {
        let loss = self.g.softmax_cross_entropy(logits, labels)?;
        self.g.set_output(loss)?;
        let issues = self.g.lint();
        if !issues.is_empty() {
            return Err(Error::Structure(issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; ")));
        }
        let model = Model { arch, widths: widths.to_vec(), batch, graph: self.g, input: x, labels, logits, loss, params: self.params };
        log::debug!("{arch}: {} parameters in {} tensors", model.parameter_count(), model.params.len());
        for d in model.accumulator_excess() {
            log::warn!("{arch}: accumulator of {} has {} elements, its weights {}", d.param, d.accumulator, d.parameters);
        }
        Ok(model)
    }
}

fn start(arch: Architecture, batch: usize) -> Result<(Builder, NodeId, NodeId)> {
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut b = Builder { g: Graph::new(), params: Vec::new() };
    let mut dims = vec![batch];
    dims.extend(arch.input_dims());
    let x = b.g.input("images", dims, true)?;
    let y = b.g.input("labels", vec![batch, CLASSES], true)?;
    Ok((b, x, y))
}

fn expect_widths(arch: Architecture, widths: &[usize], n: usize) -> Result<()> {
    if widths.len() != n || widths.contains(&0) {
        return Err(Error::Config(format!("{arch} takes {n} positive widths, got {widths:?}")));
    }
    Ok(())
}

/// Five dense layers with ReLU between them; `widths` are the four hidden sizes.
pub fn build_mlp5(batch: usize, widths: &[usize]) -> Result<Model> {
    let arch = Architecture::Mlp5;
    expect_widths(arch, widths, 4)?;
    let (mut b, x, labels) = start(arch, batch)?;
    let mut h = b.g.reshape(x, &[batch, 784])?;
    for (i, &w) in widths.iter().enumerate() {
        let z = b.dense(h, &format!("fc{}", i + 1), w)?;
        h = b.g.relu(z)?;
    }
    let logits = b.dense(h, "fc5", CLASSES)?;
    b.finish(arch, widths, batch, x, labels, logits)
}

/// Five 3×3 convolutions with three 2×2 max pools, then one dense layer.
/// `channels` lists the five convolution widths.
pub fn build_vgg6(batch: usize, channels: &[usize]) -> Result<Model> {
    let arch = Architecture::Vgg6;
    expect_widths(arch, channels, 5)?;
    let (mut b, x, labels) = start(arch, batch)?;
    let mut h = x;
    for (i, &c) in channels.iter().enumerate() {
        let z = b.conv_bias(h, &format!("conv{}", i + 1), c)?;
        h = b.g.relu(z)?;
        if i == 1 || i == 3 || i == 4 {
            h = b.g.max_pool2d(h, 2, 2)?;
        }
    }
    let flat: usize = b.g.shape(h).without_batch().numel();
    let h = b.g.reshape(h, &[batch, flat])?;
    let logits = b.dense(h, "fc", CLASSES)?;
    b.finish(arch, channels, batch, x, labels, logits)
}

/// Three stages of three basic residual blocks. Each convolution is followed
/// by a per-channel scale and shift; downsampling shortcuts subsample and
/// zero-pad channels.
pub fn build_resnet20(batch: usize, widths: &[usize]) -> Result<Model> {
    let arch = Architecture::Resnet20;
    expect_widths(arch, widths, 3)?;
    let (mut b, x, labels) = start(arch, batch)?;
    let stem = b.conv(x, "stem", widths[0], 1)?;
    let stem = b.affine(stem, "stem/affine")?;
    let mut h = b.g.relu(stem)?;
    for (s, &c) in widths.iter().enumerate() {
        for blk in 0..3 {
            let name = format!("stage{}/block{}", s + 1, blk + 1);
            let stride = if s > 0 && blk == 0 { 2 } else { 1 };
            let a = b.conv(h, &format!("{name}/conv_a"), c, stride)?;
            let a = b.affine(a, &format!("{name}/affine_a"))?;
            let a = b.g.relu(a)?;
            let r = b.conv(a, &format!("{name}/conv_b"), c, 1)?;
            let r = b.affine(r, &format!("{name}/affine_b"))?;
            let cin = b.g.shape(h).dims()[3];
            let shortcut = if stride != 1 || cin != c { b.g.shortcut_pad(h, stride, c)? } else { h };
            let sum = b.g.add(r, shortcut)?;
            h = b.g.relu(sum)?;
        }
    }
    let pooled = b.g.reduce_mean(h, &[1, 2])?;
    let logits = b.dense(pooled, "fc", CLASSES)?;
    b.finish(arch, widths, batch, x, labels, logits)
}

/// Builds `arch` with the given widths, or its defaults when `widths` is `None`.
pub fn build(arch: Architecture, batch: usize, widths: Option<&[usize]>) -> Result<Model> {
    let default = arch.default_widths();
    let widths = widths.unwrap_or(&default);
    match arch {
        Architecture::Mlp5 => build_mlp5(batch, widths),
        Architecture::Vgg6 => build_vgg6(batch, widths),
        Architecture::Resnet20 => build_resnet20(batch, widths),
    }
}

/// Small composite used in documentation and golden files:
/// `s1 = t1 * t2`, `s2 = t2 + t3 + s1`, `J = sum(s1 * s2)`, each of extent `n`.
/// Both hidden values sit on the frontier and `t2` feeds both.
pub fn two_level_composite(n: usize) -> Result<Graph> {
    let mut g = Graph::new();
    let t1 = g.parameter("t1", vec![n])?;
    let t2 = g.parameter("t2", vec![n])?;
    let t3 = g.parameter("t3", vec![n])?;
    let s1 = g.mul(t1, t2)?;
    let s2 = g.add_node(crate::graph::Op::AddN, &[t2, t3, s1])?;
    let q = g.mul(s1, s2)?;
    let j = g.sum_all(q)?;
    g.set_output(j)?;
    Ok(g)
}

/// Number of rows whose arg-max logit misses the hot label.
pub fn top1_errors(logits: &Tensor, labels: &Tensor) -> usize {
    let k = labels.dims()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels.data().chunks_exact(k))
        .filter(|(row, lab)| {
            let pred = row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
            lab[pred] != 1.0
        })
        .count()
}

/// Role sanity used by tests: all parameters have a consumer that is hidden.
pub fn parameters_at_frontier(g: &Graph) -> bool {
    let consumers = g.consumers();
    g.parameters()
        .iter()
        .all(|p| !consumers[p.0].is_empty() && consumers[p.0].iter().all(|c| g.node(*c).map(|n| n.role == Role::Hidden).unwrap_or(false)))
}
