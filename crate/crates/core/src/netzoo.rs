//! Block-decomposable classifier architectures.
//!
//! A [`BlockwiseNetwork`] is `head ∘ block_L ∘ … ∘ block_1`. Block boundaries
//! sit at downsampling transitions and are stored explicitly, so a teacher and
//! a student built from different families still line up block by block as
//! long as their [`BoundarySignature`]s agree on stride.
//!
//! Registered families:
//!
//! | name                | blocks | strides           | notes                                  |
//! |---------------------|--------|-------------------|----------------------------------------|
//! | `toy-cnn-4block`    | 4      | 1, 2, 2, 2        | two conv-bn-relu per block, width `w`   |
//! | `toy-resnet-4block` | 4      | 1, 2, 2, 2        | residual basic blocks, width `w`        |
//! | `vgg16-cifar`       | 5      | 2, 2, 2, 2, 2     | 13 convs, fc-bn-relu-fc classifier      |
//! | `vgg16-half-cifar`  | 5      | 2, 2, 2, 2, 2     | every width of `vgg16-cifar` halved     |
//! | `resnet18-cifar`    | 4      | 1, 2, 2, 2        | 3x3 stem, two basic blocks per stage    |
//! | `custom-cnn`        | any    | from `blocks`     | explicit per-block channels and strides |
//!
//! `vgg16-half-cifar` halves the classifier width too; its parameter count is
//! that of this construction and is not meant to match any published figure.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use scion_nn::layer::{BatchNorm, Conv2d, Layer, Linear, NormMode, Residual};
use scion_nn::param::StateEntry;
use scion_nn::sequential::SequentialCache;
use scion_nn::{NnError, Param, Scalar, Sequential, Shape, Tensor};
use serde::{Deserialize, Serialize};

pub const TOY_CNN: &str = "toy-cnn-4block";
pub const TOY_RESNET: &str = "toy-resnet-4block";
pub const VGG16: &str = "vgg16-cifar";
pub const VGG16_HALF: &str = "vgg16-half-cifar";
pub const RESNET18: &str = "resnet18-cifar";
pub const CUSTOM_CNN: &str = "custom-cnn";

/// Every registered architecture family.
pub const REGISTRY: &[&str] = &[TOY_CNN, TOY_RESNET, VGG16, VGG16_HALF, RESNET18, CUSTOM_CNN];

/// FLOP counting convention reported alongside every count.
pub const FLOP_CONVENTION: &str =
    "FLOPs = 2 x multiply-accumulates of convolution and linear layers; \
     normalization, activation, pooling and bias additions are not counted";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ZooError {
    #[error("unknown architecture `{0}` (registered: {list})", list = REGISTRY.join(", "))]
    UnknownArch(String),
    #[error(
        "inconsistent channel chain at boundary {boundary}: \
         {out_channels} channels out, {next_in_channels} channels expected in"
    )]
    ChannelChain {
        boundary: usize,
        out_channels: usize,
        next_in_channels: usize,
    },
    #[error("invalid architecture spec: {0}")]
    InvalidSpec(String),
    #[error("block {block}: {source}")]
    Shape { block: usize, source: NnError },
    #[error("block {block} maps {input:?} to {output:?}, which is not an integer downsampling")]
    Stride {
        block: usize,
        input: (usize, usize),
        output: (usize, usize),
    },
    #[error("input shape {got:?} does not match the network entry {expected:?}")]
    InputMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
}

pub type Result<T> = std::result::Result<T, ZooError>;

/// Explicit block description for the `custom-cnn` family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "two")]
    pub convs: usize,
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn three() -> usize {
    3
}
fn ten() -> usize {
    10
}
fn default_resolution() -> [usize; 2] {
    [32, 32]
}

/// Architecture descriptor resolved against the registry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    #[serde(rename = "arch")]
    pub name: String,
    #[serde(rename = "classes", default = "ten")]
    pub num_classes: usize,
    /// Base width: channels of the first stage. Family default when absent.
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default = "default_resolution")]
    pub resolution: [usize; 2],
    #[serde(default = "three")]
    pub in_channels: usize,
    /// Only for `custom-cnn`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<BlockSpec>>,
}

impl ArchSpec {
    pub fn new(name: &str, num_classes: usize) -> Self {
        Self {
            name: name.to_owned(),
            num_classes,
            width: None,
            resolution: default_resolution(),
            in_channels: 3,
            blocks: None,
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = Some(width);
        self
    }

    pub fn with_resolution(mut self, h: usize, w: usize) -> Self {
        self.resolution = [h, w];
        self
    }

    pub fn with_blocks(mut self, blocks: Vec<BlockSpec>) -> Self {
        self.blocks = Some(blocks);
        self
    }
}

/// Channel and spatial behaviour of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundarySignature {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Total downsampling applied inside the block.
    pub spatial_stride: usize,
    /// `(height, width)` at block entry.
    pub input_resolution: (usize, usize),
}

impl BoundarySignature {
    pub fn output_resolution(&self) -> (usize, usize) {
        (
            self.input_resolution.0 / self.spatial_stride,
            self.input_resolution.1 / self.spatial_stride,
        )
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, self.in_channels, self.input_resolution.0, self.input_resolution.1)
    }

    pub fn output_shape(&self, batch: usize) -> Shape {
        let (h, w) = self.output_resolution();
        Shape::new(batch, self.out_channels, h, w)
    }
}

impl fmt::Display for BoundarySignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (oh, ow) = self.output_resolution();
        write!(
            f,
            "{}x{}x{} -> {}x{}x{} (stride {})",
            self.in_channels,
            self.input_resolution.0,
            self.input_resolution.1,
            self.out_channels,
            oh,
            ow,
            self.spatial_stride
        )
    }
}

/// A parameterized network segment with its boundary signature.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub layers: Sequential,
    pub signature: BoundarySignature,
}

impl Block {
    /// Infers the signature by running shape inference from `input`.
    /// `index` is only used to label errors.
    pub fn new(layers: Sequential, input: (usize, usize, usize), index: usize) -> Result<Self> {
        let (c, h, w) = input;
        let out = layers
            .output_shape(Shape::new(1, c, h, w))
            .map_err(|source| ZooError::Shape { block: index, source })?;
        let stride = h / out.h.max(1);
        if out.h == 0 || out.w == 0 || h % out.h != 0 || w % out.w != 0 || w / out.w != stride {
            return Err(ZooError::Stride {
                block: index,
                input: (h, w),
                output: (out.h, out.w),
            });
        }
        Ok(Self {
            layers,
            signature: BoundarySignature {
                in_channels: c,
                out_channels: out.c,
                spatial_stride: stride,
                input_resolution: (h, w),
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.layers.forward(x)
    }
}

/// Recorded activations of a whole-network training forward.
#[derive(Debug, Clone)]
pub struct NetworkCache {
    blocks: Vec<SequentialCache>,
    head: Option<SequentialCache>,
}

/// `head ∘ block_L ∘ … ∘ block_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockwiseNetwork {
    pub arch_name: String,
    pub blocks: Vec<Block>,
    pub head: Option<Sequential>,
    pub num_classes: usize,
}

impl BlockwiseNetwork {
    /// Assembles and validates a network from blocks and an optional head.
    pub fn from_parts(arch_name: &str, blocks: Vec<Block>, head: Option<Sequential>) -> Result<Self> {
        if blocks.len() < 2 {
            return Err(ZooError::InvalidSpec(format!(
                "a blockwise network needs at least 2 blocks, got {}",
                blocks.len()
            )));
        }
        for (l, pair) in blocks.windows(2).enumerate() {
            let (a, b) = (&pair[0].signature, &pair[1].signature);
            if a.out_channels != b.in_channels {
                return Err(ZooError::ChannelChain {
                    boundary: l + 1,
                    out_channels: a.out_channels,
                    next_in_channels: b.in_channels,
                });
            }
            if a.output_resolution() != b.input_resolution {
                return Err(ZooError::InvalidSpec(format!(
                    "boundary {}: block resolution {:?} does not feed block input {:?}",
                    l + 1,
                    a.output_resolution(),
                    b.input_resolution
                )));
            }
        }
        let last = blocks.last().expect("non-empty").signature.output_shape(1);
        let logits = match &head {
            Some(h) => h.output_shape(last).map_err(|source| ZooError::Shape {
                block: blocks.len() + 1,
                source,
            })?,
            None => last,
        };
        if logits.h != 1 || logits.w != 1 {
            return Err(ZooError::InvalidSpec(format!(
                "network output {logits} is not a logit vector"
            )));
        }
        Ok(Self {
            arch_name: arch_name.to_owned(),
            blocks,
            head,
            num_classes: logits.c,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn signatures(&self) -> Vec<BoundarySignature> {
        self.blocks.iter().map(|b| b.signature).collect()
    }

    /// `(channels, height, width)` expected at the network input.
    pub fn input_dims(&self) -> (usize, usize, usize) {
        let s = self.blocks[0].signature;
        (s.in_channels, s.input_resolution.0, s.input_resolution.1)
    }

    /// Block `l` (1-based).
    pub fn block(&self, l: usize) -> &Block {
        &self.blocks[l - 1]
    }

    /// Logits `[n, classes, 1, 1]`, inference mode.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for b in &self.blocks {
            cur = b.layers.forward(&cur);
        }
        match &self.head {
            Some(h) => h.forward(&cur),
            None => cur,
        }
    }

    /// Activations at every block boundary, `[x_0, x_1, …, x_L]`, and the logits.
    pub fn trace(&self, x: &Tensor) -> (Vec<Tensor>, Tensor) {
        let mut acts = Vec::with_capacity(self.blocks.len() + 1);
        acts.push(x.clone());
        for b in &self.blocks {
            let y = b.layers.forward(acts.last().expect("non-empty"));
            acts.push(y);
        }
        let last = acts.last().expect("non-empty");
        let logits = match &self.head {
            Some(h) => h.forward(last),
            None => last.clone(),
        };
        (acts, logits)
    }

    pub fn forward_train(&mut self, x: &Tensor, mode: NormMode) -> (Tensor, NetworkCache) {
        let mut cur = x.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (y, c) = b.layers.forward_train(&cur, mode);
            blocks.push(c);
            cur = y;
        }
        let head = self.head.as_mut().map(|h| {
            let (y, c) = h.forward_train(&cur, mode);
            cur = y;
            c
        });
        (cur, NetworkCache { blocks, head })
    }

    /// Accumulates parameter gradients; the network input gradient is not formed.
    pub fn backward(&mut self, cache: &NetworkCache, grad: &Tensor) {
        let mut g = grad.clone();
        if let (Some(h), Some(c)) = (&mut self.head, &cache.head) {
            g = h.backward(c, &g, true).expect("input gradient");
        }
        let n = self.blocks.len();
        for (i, (b, c)) in self.blocks.iter_mut().zip(&cache.blocks).enumerate().rev() {
            match b.layers.backward(c, &g, i > 0) {
                Some(dx) => g = dx,
                None => debug_assert_eq!(i, 0, "block {} of {n} dropped its input gradient", i + 1),
            }
        }
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.layers.visit_params(&format!("{prefix}block{}.", i + 1), f);
        }
        if let Some(h) = &self.head {
            h.visit_params(&format!("{prefix}head."), f);
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.layers.visit_params_mut(&format!("{prefix}block{}.", i + 1), f);
        }
        if let Some(h) = &mut self.head {
            h.visit_params_mut(&format!("{prefix}head."), f);
        }
    }

    pub fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, StateEntry<'_>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.layers.visit_state(&format!("{prefix}block{}.", i + 1), f);
        }
        if let Some(h) = &self.head {
            h.visit_state(&format!("{prefix}head."), f);
        }
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [Scalar])) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.layers.visit_state_mut(&format!("{prefix}block{}.", i + 1), f);
        }
        if let Some(h) = &mut self.head {
            h.visit_state_mut(&format!("{prefix}head."), f);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    /// Bit patterns of every parameter and buffer, keyed by name.
    pub fn state_snapshot(&self) -> Vec<(String, Vec<u64>)> {
        let mut out = Vec::new();
        self.visit_state("", &mut |name, e| {
            out.push((name.to_owned(), e.values.iter().map(|v| v.to_bits() as u64).collect()));
        });
        out
    }
}

/// Instantiates a registered architecture with He-initialized weights.
pub fn build_network(spec: &ArchSpec, seed: u64) -> Result<BlockwiseNetwork> {
    if spec.num_classes == 0 || spec.in_channels == 0 || spec.resolution.contains(&0) {
        return Err(ZooError::InvalidSpec(
            "classes, input channels and resolution must be positive".into(),
        ));
    }
    if spec.width == Some(0) {
        return Err(ZooError::InvalidSpec("width must be positive".into()));
    }
    if spec.blocks.is_some() && spec.name != CUSTOM_CNN {
        return Err(ZooError::InvalidSpec(format!(
            "explicit `blocks` are only accepted by `{CUSTOM_CNN}`"
        )));
    }
    let mut rng = crate::seed::rng(seed, &[0x6e6574]);
    let (stages, head) = match spec.name.as_str() {
        TOY_CNN => toy_cnn(spec, &mut rng),
        TOY_RESNET => toy_resnet(spec, &mut rng),
        VGG16 => vgg16(spec, spec.width.unwrap_or(64), &mut rng),
        VGG16_HALF => vgg16(spec, spec.width.unwrap_or(64) / 2, &mut rng),
        RESNET18 => resnet18(spec, &mut rng),
        CUSTOM_CNN => custom_cnn(spec, &mut rng)?,
        other => return Err(ZooError::UnknownArch(other.to_owned())),
    };
    assemble(&spec.name, stages, head, (spec.in_channels, spec.resolution[0], spec.resolution[1]))
}

fn assemble(
    name: &str,
    stages: Vec<Vec<Layer>>,
    head: Sequential,
    input: (usize, usize, usize),
) -> Result<BlockwiseNetwork> {
    let mut cur = input;
    let mut blocks = Vec::with_capacity(stages.len());
    for (i, layers) in stages.into_iter().enumerate() {
        let block = Block::new(Sequential::new(layers), cur, i + 1)?;
        let (h, w) = block.signature.output_resolution();
        cur = (block.signature.out_channels, h, w);
        blocks.push(block);
    }
    BlockwiseNetwork::from_parts(name, blocks, Some(head))
}

fn conv_bn_relu(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> [Layer; 3] {
    [
        Layer::Conv2d(Conv2d::new(cin, cout, 3, stride, 1, false, rng)),
        Layer::BatchNorm(BatchNorm::new(cout)),
        Layer::Relu,
    ]
}

fn basic_block(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Layer {
    let main = Sequential::new(vec![
        Layer::Conv2d(Conv2d::new(cin, cout, 3, stride, 1, false, rng)),
        Layer::BatchNorm(BatchNorm::new(cout)),
        Layer::Relu,
        Layer::Conv2d(Conv2d::new(cout, cout, 3, 1, 1, false, rng)),
        Layer::BatchNorm(BatchNorm::new(cout)),
    ]);
    let shortcut = (stride != 1 || cin != cout).then(|| {
        Sequential::new(vec![
            Layer::Conv2d(Conv2d::new(cin, cout, 1, stride, 0, false, rng)),
            Layer::BatchNorm(BatchNorm::new(cout)),
        ])
    });
    Layer::Residual(Box::new(Residual { main, shortcut, relu: true }))
}

fn gap_classifier(features: usize, classes: usize, rng: &mut impl Rng) -> Sequential {
    Sequential::new(vec![
        Layer::GlobalAvgPool,
        Layer::Flatten,
        Layer::Linear(Linear::new(features, classes, true, rng)),
    ])
}

fn toy_cnn(spec: &ArchSpec, rng: &mut ChaCha8Rng) -> (Vec<Vec<Layer>>, Sequential) {
    let w = spec.width.unwrap_or(16);
    let widths = [w, 2 * w, 4 * w, 8 * w];
    let mut cin = spec.in_channels;
    let mut stages = Vec::new();
    for (i, &c) in widths.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        let mut layers = conv_bn_relu(cin, c, stride, rng).to_vec();
        layers.extend(conv_bn_relu(c, c, 1, rng));
        stages.push(layers);
        cin = c;
    }
    (stages, gap_classifier(cin, spec.num_classes, rng))
}

fn toy_resnet(spec: &ArchSpec, rng: &mut ChaCha8Rng) -> (Vec<Vec<Layer>>, Sequential) {
    let w = spec.width.unwrap_or(16);
    let mut stages = vec![{
        let mut layers = conv_bn_relu(spec.in_channels, w, 1, rng).to_vec();
        layers.push(basic_block(w, w, 1, rng));
        layers
    }];
    let mut cin = w;
    for c in [2 * w, 4 * w, 8 * w] {
        stages.push(vec![basic_block(cin, c, 2, rng)]);
        cin = c;
    }
    (stages, gap_classifier(cin, spec.num_classes, rng))
}

fn resnet18(spec: &ArchSpec, rng: &mut ChaCha8Rng) -> (Vec<Vec<Layer>>, Sequential) {
    let w = spec.width.unwrap_or(64);
    let mut stages = vec![{
        let mut layers = conv_bn_relu(spec.in_channels, w, 1, rng).to_vec();
        layers.push(basic_block(w, w, 1, rng));
        layers.push(basic_block(w, w, 1, rng));
        layers
    }];
    let mut cin = w;
    for c in [2 * w, 4 * w, 8 * w] {
        stages.push(vec![basic_block(cin, c, 2, rng), basic_block(c, c, 1, rng)]);
        cin = c;
    }
    (stages, gap_classifier(cin, spec.num_classes, rng))
}

fn vgg16(spec: &ArchSpec, w: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<Layer>>, Sequential) {
    let groups: [(usize, usize); 5] = [(w, 2), (2 * w, 2), (4 * w, 3), (8 * w, 3), (8 * w, 3)];
    let mut cin = spec.in_channels;
    let mut stages = Vec::new();
    for (c, n) in groups {
        let mut layers = Vec::new();
        for _ in 0..n {
            layers.extend(conv_bn_relu(cin, c, 1, rng));
            cin = c;
        }
        layers.push(Layer::MaxPool2d { kernel: 2, stride: 2 });
        stages.push(layers);
    }
    let spatial = (spec.resolution[0] / 32).max(1) * (spec.resolution[1] / 32).max(1);
    let hidden = 8 * w;
    let head = Sequential::new(vec![
        Layer::Flatten,
        Layer::Linear(Linear::new(cin * spatial, hidden, true, rng)),
        Layer::BatchNorm(BatchNorm::new(hidden)),
        Layer::Relu,
        Layer::Linear(Linear::new(hidden, spec.num_classes, true, rng)),
    ]);
    (stages, head)
}

fn custom_cnn(spec: &ArchSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<Vec<Layer>>, Sequential)> {
    let blocks = spec
        .blocks
        .as_ref()
        .ok_or_else(|| ZooError::InvalidSpec(format!("`{CUSTOM_CNN}` needs explicit `blocks`")))?;
    if blocks.len() < 2 {
        return Err(ZooError::InvalidSpec(format!(
            "a blockwise network needs at least 2 blocks, got {}",
            blocks.len()
        )));
    }
    let mut expected_in = spec.in_channels;
    for (l, b) in blocks.iter().enumerate() {
        if b.in_channels != expected_in {
            return Err(ZooError::ChannelChain {
                boundary: l,
                out_channels: expected_in,
                next_in_channels: b.in_channels,
            });
        }
        if b.out_channels == 0 || b.stride == 0 || b.convs == 0 {
            return Err(ZooError::InvalidSpec(format!(
                "block {}: channels, stride and convs must be positive",
                l + 1
            )));
        }
        expected_in = b.out_channels;
    }
    let stages = blocks
        .iter()
        .map(|b| {
            let mut layers = conv_bn_relu(b.in_channels, b.out_channels, b.stride, rng).to_vec();
            for _ in 1..b.convs {
                layers.extend(conv_bn_relu(b.out_channels, b.out_channels, 1, rng));
            }
            layers
        })
        .collect();
    Ok((stages, gap_classifier(expected_in, spec.num_classes, rng)))
}

/// The blocks in forward order with their signatures. Running them in order
/// and then the head reproduces [`BlockwiseNetwork::forward`] exactly.
pub fn decompose(network: &BlockwiseNetwork) -> Vec<(Block, BoundarySignature)> {
    network
        .blocks
        .iter()
        .map(|b| (b.clone(), b.signature))
        .collect()
}

/// Exact count of trainable scalars. Normalization running statistics are
/// buffers and are not counted.
pub trait ParamCount {
    fn count_params(&self) -> usize;
}

impl ParamCount for Sequential {
    fn count_params(&self) -> usize {
        self.num_params()
    }
}

impl ParamCount for Layer {
    fn count_params(&self) -> usize {
        self.num_params()
    }
}

impl ParamCount for Block {
    fn count_params(&self) -> usize {
        self.layers.num_params()
    }
}

impl ParamCount for BlockwiseNetwork {
    fn count_params(&self) -> usize {
        self.blocks.iter().map(Block::count_params).sum::<usize>()
            + self.head.as_ref().map_or(0, Sequential::num_params)
    }
}

pub fn count_params<T: ParamCount + ?Sized>(target: &T) -> usize {
    target.count_params()
}

/// Per-sample FLOPs of one forward pass, under [`FLOP_CONVENTION`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub per_block: Vec<u64>,
    pub head: u64,
    pub total: u64,
    pub convention: &'static str,
}

/// Multiply-accumulates of `layer` on one sample of `input`, and its output shape.
pub fn layer_macs(layer: &Layer, input: Shape) -> std::result::Result<(u64, Shape), NnError> {
    let input = input.with_batch(1);
    let out = layer.output_shape(input)?;
    let macs = match layer {
        Layer::Conv2d(c) => {
            (out.c * out.h * out.w) as u64 * (c.in_channels * c.kernel * c.kernel) as u64
        }
        Layer::Linear(l) => (l.in_features * l.out_features) as u64,
        Layer::Residual(r) => {
            let mut total = sequence_macs(&r.main, input)?.0;
            if let Some(s) = &r.shortcut {
                total += sequence_macs(s, input)?.0;
            }
            total
        }
        _ => 0,
    };
    Ok((macs, out))
}

fn sequence_macs(seq: &Sequential, input: Shape) -> std::result::Result<(u64, Shape), NnError> {
    seq.layers.iter().try_fold((0u64, input), |(acc, s), layer| {
        let (m, out) = layer_macs(layer, s)?;
        Ok((acc + m, out))
    })
}

pub fn count_flops(network: &BlockwiseNetwork, input: (usize, usize, usize)) -> Result<FlopReport> {
    if input != network.input_dims() {
        return Err(ZooError::InputMismatch {
            expected: network.input_dims(),
            got: input,
        });
    }
    let mut shape = Shape::new(1, input.0, input.1, input.2);
    let mut per_block = Vec::with_capacity(network.blocks.len());
    for (i, b) in network.blocks.iter().enumerate() {
        let (macs, out) =
            sequence_macs(&b.layers, shape).map_err(|source| ZooError::Shape { block: i + 1, source })?;
        per_block.push(2 * macs);
        shape = out;
    }
    let head = match &network.head {
        Some(h) => {
            2 * sequence_macs(h, shape)
                .map_err(|source| ZooError::Shape {
                    block: network.blocks.len() + 1,
                    source,
                })?
                .0
        }
        None => 0,
    };
    Ok(FlopReport {
        total: per_block.iter().sum::<u64>() + head,
        per_block,
        head,
        convention: FLOP_CONVENTION,
    })
}
