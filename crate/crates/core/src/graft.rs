//! Adaption modules, wrapped scions, grafted composites and the final fold.
//!
//! A wrapped scion is `post ∘ core ∘ pre`: `pre` maps teacher channels at
//! boundary `l-1` to the student block's input width and `post` maps the
//! student output back to teacher width at boundary `l`. The first scion has
//! no `pre` (both networks read the image) and the last has no `post`; it
//! carries the student classifier head instead, which makes its output the
//! logits directly.
//!
//! Block indices are 1-based throughout, matching block `l` of an `L`-block
//! network.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use scion_nn::init::he_normal;
use scion_nn::layer::{Layer, LayerCache, NormMode};
use scion_nn::param::StateEntry;
use scion_nn::sequential::SequentialCache;
use scion_nn::{Conv2d, Param, Scalar, Sequential, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::netzoo::{self, ArchSpec, Block, BlockwiseNetwork, BoundarySignature, ParamCount};
use crate::seed;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GraftError {
    #[error("adaption channels must be positive, got {in_channels} -> {out_channels}")]
    InvalidChannels { in_channels: usize, out_channels: usize },
    #[error("block index {index} outside 1..={blocks}")]
    IndexOutOfRange { index: usize, blocks: usize },
    #[error("block {index}: scion stride {scion_stride} differs from teacher stride {teacher_stride}")]
    StrideMismatch {
        index: usize,
        scion_stride: usize,
        teacher_stride: usize,
    },
    #[error("block {index}: scion boundary {scion} does not match teacher boundary {teacher}")]
    BoundaryMismatch {
        index: usize,
        scion: String,
        teacher: String,
    },
    #[error("scion indices {indices:?} are not the contiguous prefix 1..={expected}")]
    NotPrefix { indices: Vec<usize>, expected: usize },
    #[error("cannot compose adaptions: inner dimensions {left} and {right} differ")]
    InnerDimension { left: usize, right: usize },
    #[error("fold matrix is {rows}x{cols}; only square matrices keep the parameter count")]
    NonSquare { rows: usize, cols: usize },
    #[error("fold matrix has {rows} rows but the block takes {channels} input channels")]
    FoldDimension { rows: usize, channels: usize },
    #[error("cannot fold into a block starting with `{0}`")]
    NotFoldable(String),
    #[error(
        "student channel chain broken at boundary {boundary}: \
         block {boundary} emits {out_channels}, block {next} takes {in_channels}",
        next = boundary + 1
    )]
    StudentChain {
        boundary: usize,
        out_channels: usize,
        in_channels: usize,
    },
    #[error("teacher has {teacher} blocks, student has {student}")]
    BlockCount { teacher: usize, student: usize },
    #[error("scion {0} replaces the last block but carries no classifier head")]
    MissingHead(usize),
    #[error("a {kind} model cannot be trained in stage {stage}")]
    StageMismatch { kind: GraftKind, stage: GraftKind },
    #[error("depth {depth} exceeds the {coverage} grafted scions")]
    DepthExceedsCoverage { depth: usize, coverage: usize },
    #[error("finalized student does not match its architecture: {0}")]
    ArchMismatch(String),
    #[error(transparent)]
    Zoo(#[from] netzoo::ZooError),
}

pub type Result<T> = std::result::Result<T, GraftError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TeacherToStudent,
    StudentToTeacher,
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Scalar>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<Scalar>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn scaled_identity(n: usize, s: Scalar) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = s;
        }
        Self::new(n, n, data)
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn get(&self, r: usize, c: usize) -> Scalar {
        self.data[r * self.cols + c]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// `self · rhs`, accumulated left to right.
    pub fn matmul(&self, rhs: &Matrix) -> Option<Matrix> {
        if self.cols != rhs.rows {
            return None;
        }
        let mut data = vec![0.0; self.rows * rhs.cols];
        for r in 0..self.rows {
            for c in 0..rhs.cols {
                let mut acc: Scalar = 0.0;
                for k in 0..self.cols {
                    acc += self.get(r, k) * rhs.get(k, c);
                }
                data[r * rhs.cols + c] = acc;
            }
        }
        Some(Matrix::new(self.rows, rhs.cols, data))
    }

    /// Applies the matrix as a 1x1 channel map to `[n, cols, h, w]`.
    pub fn apply_channels(&self, x: &Tensor) -> Tensor {
        Conv2d::pointwise(self.rows, self.cols, self.data.clone()).forward(x)
    }
}

/// Bias-free pointwise channel map.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptionModule {
    pub direction: Direction,
    layer: Layer,
}

impl AdaptionModule {
    /// Uses `matrix` (`out x in`) as the weight.
    pub fn from_matrix(direction: Direction, matrix: Matrix) -> Self {
        Self {
            direction,
            layer: Layer::Conv2d(Conv2d::pointwise(matrix.rows, matrix.cols, matrix.data)),
        }
    }

    pub fn identity(channels: usize, direction: Direction) -> Self {
        Self::from_matrix(direction, Matrix::identity(channels))
    }

    pub fn conv(&self) -> &Conv2d {
        match &self.layer {
            Layer::Conv2d(c) => c,
            _ => unreachable!("adaption modules hold a pointwise convolution"),
        }
    }

    pub fn conv_mut(&mut self) -> &mut Conv2d {
        match &mut self.layer {
            Layer::Conv2d(c) => c,
            _ => unreachable!("adaption modules hold a pointwise convolution"),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv().in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv().out_channels
    }

    /// Weight as an `out x in` matrix.
    pub fn matrix(&self) -> Matrix {
        let c = self.conv();
        Matrix::new(c.out_channels, c.in_channels, c.weight.value.clone())
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.layer.forward(x)
    }

    pub fn num_params(&self) -> usize {
        self.layer.num_params()
    }
}

/// He-initialized adaption module; the same seed always gives the same weights.
pub fn make_adaption(
    in_channels: usize,
    out_channels: usize,
    direction: Direction,
    seed: u64,
) -> Result<AdaptionModule> {
    if in_channels == 0 || out_channels == 0 {
        return Err(GraftError::InvalidChannels { in_channels, out_channels });
    }
    let mut rng = seed::rng(seed, &[0x61646170]);
    let w = he_normal(&mut rng, in_channels, in_channels * out_channels);
    Ok(AdaptionModule::from_matrix(direction, Matrix::new(out_channels, in_channels, w)))
}

/// `H_l`: a student block between two adaption modules.
#[derive(Debug, Clone, PartialEq)]
pub struct WrappedScion {
    pub index: usize,
    pub num_blocks: usize,
    pub pre: Option<AdaptionModule>,
    pub core: Block,
    pub post: Option<AdaptionModule>,
    /// Student classifier, present only on the last scion.
    pub head: Option<Sequential>,
}

#[derive(Debug, Clone)]
pub struct ScionCache {
    pre: Option<LayerCache>,
    core: SequentialCache,
    post: Option<LayerCache>,
    head: Option<SequentialCache>,
}

impl WrappedScion {
    pub fn is_last(&self) -> bool {
        self.index == self.num_blocks
    }

    /// Channels expected from the teacher side.
    pub fn in_channels(&self) -> usize {
        self.pre.as_ref().map_or(self.core.signature.in_channels, AdaptionModule::in_channels)
    }

    /// Channels emitted towards the teacher side (before any head).
    pub fn out_channels(&self) -> usize {
        self.post.as_ref().map_or(self.core.signature.out_channels, AdaptionModule::out_channels)
    }

    pub fn with_head(mut self, head: Sequential) -> Self {
        self.head = Some(head);
        self
    }

    /// Exact copy of teacher block `l` with identity adaptions.
    pub fn identity_copy(teacher: &BlockwiseNetwork, l: usize) -> Result<Self> {
        let blocks = teacher.num_blocks();
        if l == 0 || l > blocks {
            return Err(GraftError::IndexOutOfRange { index: l, blocks });
        }
        let core = teacher.block(l).clone();
        let sig = core.signature;
        Ok(Self {
            index: l,
            num_blocks: blocks,
            pre: (l > 1).then(|| AdaptionModule::identity(sig.in_channels, Direction::TeacherToStudent)),
            post: (l < blocks).then(|| AdaptionModule::identity(sig.out_channels, Direction::StudentToTeacher)),
            head: if l == blocks { teacher.head.clone() } else { None },
            core,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut cur = match &self.pre {
            Some(a) => a.forward(x),
            None => x.clone(),
        };
        cur = self.core.layers.forward(&cur);
        if let Some(a) = &self.post {
            cur = a.forward(&cur);
        }
        match &self.head {
            Some(h) => h.forward(&cur),
            None => cur,
        }
    }

    pub fn forward_record(&self, x: &Tensor, mode: NormMode) -> (Tensor, ScionCache) {
        let (mut cur, pre) = match &self.pre {
            Some(a) => {
                let (y, c) = a.layer.forward_record(x, mode);
                (y, Some(c))
            }
            None => (x.clone(), None),
        };
        let (y, core) = self.core.layers.forward_record(&cur, mode);
        cur = y;
        let post = self.post.as_ref().map(|a| {
            let (y, c) = a.layer.forward_record(&cur, mode);
            cur = y;
            c
        });
        let head = self.head.as_ref().map(|h| {
            let (y, c) = h.forward_record(&cur, mode);
            cur = y;
            c
        });
        (cur, ScionCache { pre, core, post, head })
    }

    pub fn commit_stats(&mut self, cache: &ScionCache) {
        self.core.layers.commit_stats(&cache.core);
        if let (Some(h), Some(c)) = (&mut self.head, &cache.head) {
            h.commit_stats(c);
        }
    }

    pub fn backward(&mut self, cache: &ScionCache, grad: &Tensor, need_input: bool) -> Option<Tensor> {
        let mut g = grad.clone();
        if let (Some(h), Some(c)) = (&mut self.head, &cache.head) {
            g = h.backward(c, &g, true).expect("input gradient");
        }
        if let (Some(a), Some(c)) = (&mut self.post, &cache.post) {
            g = a.layer.backward(c, &g, true).expect("input gradient");
        }
        let core_input = need_input || self.pre.is_some();
        let dx = self.core.layers.backward(&cache.core, &g, core_input);
        match (&mut self.pre, &cache.pre) {
            (Some(a), Some(c)) => a.layer.backward(c, &dx.expect("input gradient"), need_input),
            _ => dx,
        }
    }

    pub fn num_params(&self) -> usize {
        self.pre.as_ref().map_or(0, AdaptionModule::num_params)
            + self.core.count_params()
            + self.post.as_ref().map_or(0, AdaptionModule::num_params)
            + self.head.as_ref().map_or(0, Sequential::num_params)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        if let Some(a) = &self.pre {
            a.layer.visit_params(&format!("{prefix}pre."), f);
        }
        self.core.layers.visit_params(&format!("{prefix}core."), f);
        if let Some(a) = &self.post {
            a.layer.visit_params(&format!("{prefix}post."), f);
        }
        if let Some(h) = &self.head {
            h.visit_params(&format!("{prefix}head."), f);
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some(a) = &mut self.pre {
            a.layer.visit_params_mut(&format!("{prefix}pre."), f);
        }
        self.core.layers.visit_params_mut(&format!("{prefix}core."), f);
        if let Some(a) = &mut self.post {
            a.layer.visit_params_mut(&format!("{prefix}post."), f);
        }
        if let Some(h) = &mut self.head {
            h.visit_params_mut(&format!("{prefix}head."), f);
        }
    }

    pub fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, StateEntry<'_>)) {
        if let Some(a) = &self.pre {
            a.layer.visit_state(&format!("{prefix}pre."), f);
        }
        self.core.layers.visit_state(&format!("{prefix}core."), f);
        if let Some(a) = &self.post {
            a.layer.visit_state(&format!("{prefix}post."), f);
        }
        if let Some(h) = &self.head {
            h.visit_state(&format!("{prefix}head."), f);
        }
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [Scalar])) {
        if let Some(a) = &mut self.pre {
            a.layer.visit_state_mut(&format!("{prefix}pre."), f);
        }
        self.core.layers.visit_state_mut(&format!("{prefix}core."), f);
        if let Some(a) = &mut self.post {
            a.layer.visit_state_mut(&format!("{prefix}post."), f);
        }
        if let Some(h) = &mut self.head {
            h.visit_state_mut(&format!("{prefix}head."), f);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }
}

/// Wraps student block `h_l` so it fits between teacher boundaries `l-1` and `l`.
///
/// Adaption weights are seeded from `(seed, l)`. The last scion gets no head
/// here; attach one with [`WrappedScion::with_head`] or use [`wrap_student`].
pub fn wrap_scion(h_l: Block, l: usize, teacher_sigs: &[BoundarySignature], seed: u64) -> Result<WrappedScion> {
    let blocks = teacher_sigs.len();
    if l == 0 || l > blocks {
        return Err(GraftError::IndexOutOfRange { index: l, blocks });
    }
    let t = teacher_sigs[l - 1];
    let s = h_l.signature;
    if s.spatial_stride != t.spatial_stride {
        return Err(GraftError::StrideMismatch {
            index: l,
            scion_stride: s.spatial_stride,
            teacher_stride: t.spatial_stride,
        });
    }
    if s.input_resolution != t.input_resolution || (l == 1 && s.in_channels != t.in_channels) {
        return Err(GraftError::BoundaryMismatch {
            index: l,
            scion: s.to_string(),
            teacher: t.to_string(),
        });
    }
    let pre = if l > 1 {
        Some(make_adaption(
            t.in_channels,
            s.in_channels,
            Direction::TeacherToStudent,
            seed::derive(seed, &[l as u64, 0]),
        )?)
    } else {
        None
    };
    let post = if l < blocks {
        Some(make_adaption(
            s.out_channels,
            t.out_channels,
            Direction::StudentToTeacher,
            seed::derive(seed, &[l as u64, 1]),
        )?)
    } else {
        None
    };
    Ok(WrappedScion {
        index: l,
        num_blocks: blocks,
        pre,
        core: h_l,
        post,
        head: None,
    })
}

/// Wraps every block of `student` against `teacher`; the last scion takes
/// the student head.
pub fn wrap_student(student: &BlockwiseNetwork, teacher: &BlockwiseNetwork, seed: u64) -> Result<Vec<WrappedScion>> {
    if student.num_blocks() != teacher.num_blocks() {
        return Err(GraftError::BlockCount {
            teacher: teacher.num_blocks(),
            student: student.num_blocks(),
        });
    }
    check_student_chain(&student.blocks.iter().collect::<Vec<_>>())?;
    let sigs = teacher.signatures();
    let mut scions = student
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| wrap_scion(b.clone(), i + 1, &sigs, seed))
        .collect::<Result<Vec<_>>>()?;
    if let Some(h) = &student.head {
        let last = scions.pop().expect("at least two blocks");
        scions.push(last.with_head(h.clone()));
    }
    Ok(scions)
}

fn check_student_chain(cores: &[&Block]) -> Result<()> {
    for (i, pair) in cores.windows(2).enumerate() {
        let (a, b) = (pair[0].signature, pair[1].signature);
        if a.out_channels != b.in_channels {
            return Err(GraftError::StudentChain {
                boundary: i + 1,
                out_channels: a.out_channels,
                in_channels: b.in_channels,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraftKind {
    /// One scion in an otherwise intact teacher (stage 1).
    BlockGraft,
    /// Scions on blocks `1..=depth`, teacher on the rest (stage 2).
    NetGraft,
}

impl fmt::Display for GraftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraftKind::BlockGraft => "block-graft",
            GraftKind::NetGraft => "net-graft",
        })
    }
}

/// Frozen teacher with one or more blocks replaced by trainable scions.
#[derive(Debug, Clone)]
pub struct GraftedModel {
    pub kind: GraftKind,
    pub teacher: Arc<BlockwiseNetwork>,
    pub scions: BTreeMap<usize, WrappedScion>,
    /// Scion index for a block graft, prefix length for a net graft.
    pub depth: usize,
    /// Normalization behaviour of scions in training forwards. Teacher blocks
    /// always use their stored statistics.
    pub scion_norm: NormMode,
}

enum Segment {
    Teacher(SequentialCache),
    TeacherHead(SequentialCache),
    Scion(usize, ScionCache),
}

/// Recorded activations of a grafted training forward.
pub struct GraftCache {
    segments: Vec<Segment>,
}

fn check_boundary(teacher: &BlockwiseNetwork, scion: &WrappedScion) -> Result<()> {
    let blocks = teacher.num_blocks();
    let l = scion.index;
    if l == 0 || l > blocks || scion.num_blocks != blocks {
        return Err(GraftError::IndexOutOfRange { index: l, blocks });
    }
    let t = teacher.block(l).signature;
    let s = scion.core.signature;
    if s.spatial_stride != t.spatial_stride {
        return Err(GraftError::StrideMismatch {
            index: l,
            scion_stride: s.spatial_stride,
            teacher_stride: t.spatial_stride,
        });
    }
    let mismatch = || GraftError::BoundaryMismatch {
        index: l,
        scion: format!(
            "{} in, {} out at {:?}",
            scion.in_channels(),
            scion.out_channels(),
            s.input_resolution
        ),
        teacher: t.to_string(),
    };
    if scion.in_channels() != t.in_channels || s.input_resolution != t.input_resolution {
        return Err(mismatch());
    }
    if let Some(a) = &scion.pre {
        if a.out_channels() != s.in_channels {
            return Err(mismatch());
        }
    }
    if let Some(a) = &scion.post {
        if a.in_channels() != s.out_channels {
            return Err(mismatch());
        }
    }
    if l < blocks {
        if scion.out_channels() != t.out_channels {
            return Err(mismatch());
        }
    } else {
        if teacher.head.is_some() && scion.head.is_none() {
            return Err(GraftError::MissingHead(l));
        }
        let logits = match &scion.head {
            Some(h) => h.output_shape(s.output_shape(1)).map_err(|_| mismatch())?,
            None => s.output_shape(1),
        };
        if logits != Shape::new(1, teacher.num_classes, 1, 1) {
            return Err(mismatch());
        }
    }
    Ok(())
}

/// `T_l^B`: teacher with only block `scion.index` replaced.
pub fn graft_block(teacher: Arc<BlockwiseNetwork>, scion: WrappedScion) -> Result<GraftedModel> {
    check_boundary(&teacher, &scion)?;
    let depth = scion.index;
    Ok(GraftedModel {
        kind: GraftKind::BlockGraft,
        teacher,
        scions: BTreeMap::from([(depth, scion)]),
        depth,
        scion_norm: NormMode::BatchStats,
    })
}

/// `T_l^N`: teacher with blocks `1..=l` replaced by `scions` (given in index order).
pub fn graft_prefix(teacher: Arc<BlockwiseNetwork>, scions: Vec<WrappedScion>) -> Result<GraftedModel> {
    let indices: Vec<usize> = scions.iter().map(|s| s.index).collect();
    let depth = scions.len();
    if depth == 0 || indices.iter().enumerate().any(|(i, &l)| l != i + 1) {
        return Err(GraftError::NotPrefix { indices, expected: depth.max(1) });
    }
    for s in &scions {
        check_boundary(&teacher, s)?;
    }
    Ok(GraftedModel {
        kind: GraftKind::NetGraft,
        teacher,
        scions: scions.into_iter().map(|s| (s.index, s)).collect(),
        depth,
        scion_norm: NormMode::BatchStats,
    })
}

impl GraftedModel {
    pub fn with_scion_norm(mut self, mode: NormMode) -> Self {
        self.scion_norm = mode;
        self
    }

    /// Lowest scion index: teacher blocks before it are fixed feature extractors.
    pub fn first_scion(&self) -> usize {
        *self.scions.keys().next().expect("grafted model holds a scion")
    }

    /// Number of teacher blocks still in use.
    pub fn teacher_blocks_used(&self) -> usize {
        self.teacher.num_blocks() - self.scions.len()
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let blocks = self.teacher.num_blocks();
        let mut cur = x.clone();
        for l in 1..=blocks {
            cur = match self.scions.get(&l) {
                Some(s) => s.forward(&cur),
                None => self.teacher.block(l).layers.forward(&cur),
            };
        }
        match (&self.teacher.head, self.scions.contains_key(&blocks)) {
            (Some(h), false) => h.forward(&cur),
            _ => cur,
        }
    }

    /// Training forward starting at the input of the first scion, i.e. the
    /// teacher activation at boundary `first_scion() - 1`.
    pub fn forward_record_from(&self, boundary_input: &Tensor) -> (Tensor, GraftCache) {
        let blocks = self.teacher.num_blocks();
        let mut cur = boundary_input.clone();
        let mut segments = Vec::new();
        for l in self.first_scion()..=blocks {
            match self.scions.get(&l) {
                Some(s) => {
                    let (y, c) = s.forward_record(&cur, self.scion_norm);
                    segments.push(Segment::Scion(l, c));
                    cur = y;
                }
                None => {
                    let (y, c) = self.teacher.block(l).layers.forward_record(&cur, NormMode::RunningStats);
                    segments.push(Segment::Teacher(c));
                    cur = y;
                }
            }
        }
        if let (Some(h), false) = (&self.teacher.head, self.scions.contains_key(&blocks)) {
            let (y, c) = h.forward_record(&cur, NormMode::RunningStats);
            segments.push(Segment::TeacherHead(c));
            cur = y;
        }
        (cur, GraftCache { segments })
    }

    pub fn forward_record(&self, x: &Tensor) -> (Tensor, GraftCache) {
        let mut cur = x.clone();
        for l in 1..self.first_scion() {
            cur = self.teacher.block(l).layers.forward(&cur);
        }
        self.forward_record_from(&cur)
    }

    /// Folds batch statistics of a recorded forward into scion running statistics.
    pub fn commit_stats(&mut self, cache: &GraftCache) {
        for seg in &cache.segments {
            if let Segment::Scion(l, c) = seg {
                self.scions.get_mut(l).expect("scion").commit_stats(c);
            }
        }
    }

    /// Accumulates gradients into scion parameters only.
    pub fn backward(&mut self, cache: &GraftCache, grad: &Tensor) {
        let first = self.first_scion();
        let mut g = grad.clone();
        let mut l = self.teacher.num_blocks() + 1;
        for seg in cache.segments.iter().rev() {
            match seg {
                Segment::TeacherHead(c) => {
                    g = self.teacher.head.as_ref().expect("teacher head").backward_input(c, &g);
                }
                Segment::Teacher(c) => {
                    l -= 1;
                    g = self.teacher.block(l).layers.backward_input(c, &g);
                }
                Segment::Scion(idx, c) => {
                    l = *idx;
                    let need = l > first;
                    match self.scions.get_mut(idx).expect("scion").backward(c, &g, need) {
                        Some(dx) => g = dx,
                        None => return,
                    }
                }
            }
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        for (l, s) in &self.scions {
            s.visit_params(&format!("scion{l}."), f);
        }
    }

    /// Every scion parameter, named `scion{l}.…`. Teacher parameters are not reachable.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (l, s) in self.scions.iter_mut() {
            s.visit_params_mut(&format!("scion{l}."), f);
        }
    }

    pub fn zero_grad(&mut self) {
        self.scions.values_mut().for_each(WrappedScion::zero_grad);
    }

    pub fn into_scions(self) -> Vec<WrappedScion> {
        self.scions.into_values().collect()
    }
}

/// Names of the parameters an optimizer may update for `stage` at unit `l`.
///
/// Stage 1 (block grafting) at block `l`: the parameters of `H_l`.
/// Stage 2 (network grafting) at depth `l`: the parameters of `H_1..=H_l`.
pub fn trainable_params(model: &GraftedModel, stage: GraftKind, l: usize) -> Result<Vec<String>> {
    if model.kind != stage {
        return Err(GraftError::StageMismatch { kind: model.kind, stage });
    }
    let selected: Vec<usize> = match stage {
        GraftKind::BlockGraft => {
            if !model.scions.contains_key(&l) {
                return Err(GraftError::DepthExceedsCoverage {
                    depth: l,
                    coverage: model.scions.len(),
                });
            }
            vec![l]
        }
        GraftKind::NetGraft => {
            if l == 0 || l > model.depth {
                return Err(GraftError::DepthExceedsCoverage { depth: l, coverage: model.depth });
            }
            (1..=l).collect()
        }
    };
    let mut names = Vec::new();
    for idx in selected {
        model.scions[&idx].visit_params(&format!("scion{idx}."), &mut |n, _| names.push(n.to_owned()));
    }
    names.sort();
    Ok(names)
}

/// `W(a_ts) · W(a_st)`: the pair `a_ts ∘ a_st` at one boundary as a single
/// map from student channels to student channels.
pub fn compose_adaptions(a_ts: &AdaptionModule, a_st: &AdaptionModule) -> Result<Matrix> {
    a_ts.matrix()
        .matmul(&a_st.matrix())
        .ok_or(GraftError::InnerDimension {
            left: a_ts.in_channels(),
            right: a_st.out_channels(),
        })
}

/// Returns `block'` with `block'(x) = block(M·x)`, where `M` acts on channels.
/// The first parameterized layer absorbs `M`; parameter count is unchanged.
pub fn fold_into_conv(block: &Block, m: &Matrix) -> Result<Block> {
    if !m.is_square() {
        return Err(GraftError::NonSquare { rows: m.rows, cols: m.cols });
    }
    if m.rows != block.signature.in_channels {
        return Err(GraftError::FoldDimension {
            rows: m.rows,
            channels: block.signature.in_channels,
        });
    }
    let mut out = block.clone();
    let spatial = block.signature.input_resolution.0 * block.signature.input_resolution.1;
    fold_sequence(&mut out.layers, m, spatial)?;
    Ok(out)
}

fn fold_sequence(seq: &mut Sequential, m: &Matrix, spatial: usize) -> Result<()> {
    let mut positions = spatial;
    for layer in &mut seq.layers {
        match layer {
            Layer::Conv2d(c) => {
                fold_conv(c, m);
                return Ok(());
            }
            Layer::Linear(l) => {
                fold_linear(&mut l.weight.value, l.out_features, l.in_features, m, positions);
                return Ok(());
            }
            Layer::Residual(r) => {
                let Some(shortcut) = &mut r.shortcut else {
                    return Err(GraftError::NotFoldable("residual with identity shortcut".into()));
                };
                fold_sequence(&mut r.main, m, positions)?;
                fold_sequence(shortcut, m, positions)?;
                return Ok(());
            }
            // Both commute with a channel map: pooling averages each channel,
            // flattening keeps channel-major order.
            Layer::GlobalAvgPool => positions = 1,
            Layer::Flatten => {}
            other => return Err(GraftError::NotFoldable(other.kind().into())),
        }
    }
    Err(GraftError::NotFoldable("block without parameterized layer".into()))
}

/// `W'[o,i,u,v] = Σ_m W[o,m,u,v] · M[m,i]`.
fn fold_conv(c: &mut Conv2d, m: &Matrix) {
    let kk = c.kernel * c.kernel;
    let cin = c.in_channels;
    let w = &c.weight.value;
    let mut folded = vec![0.0; w.len()];
    for o in 0..c.out_channels {
        for i in 0..cin {
            for p in 0..kk {
                let mut acc: Scalar = 0.0;
                for k in 0..cin {
                    acc += w[(o * cin + k) * kk + p] * m.get(k, i);
                }
                folded[(o * cin + i) * kk + p] = acc;
            }
        }
    }
    c.weight.value = folded;
}

/// Same fold for an affine layer reading `[channels x positions]` features.
fn fold_linear(w: &mut Vec<Scalar>, out: usize, inp: usize, m: &Matrix, positions: usize) {
    let cin = inp / positions;
    let mut folded = vec![0.0; w.len()];
    for o in 0..out {
        let row = &w[o * inp..(o + 1) * inp];
        for i in 0..cin {
            for p in 0..positions {
                let mut acc: Scalar = 0.0;
                for k in 0..cin {
                    acc += row[k * positions + p] * m.get(k, i);
                }
                folded[o * inp + i * positions + p] = acc;
            }
        }
    }
    *w = folded;
}

/// Merges adaption pairs into the following blocks and returns the standalone
/// student, checked against `student_spec`.
pub fn finalize_student(scions: &[WrappedScion], student_spec: &ArchSpec) -> Result<BlockwiseNetwork> {
    let expected = scions.len();
    if expected == 0 || scions.iter().enumerate().any(|(i, s)| s.index != i + 1 || s.num_blocks != expected) {
        return Err(GraftError::NotPrefix {
            indices: scions.iter().map(|s| s.index).collect(),
            expected,
        });
    }
    check_student_chain(&scions.iter().map(|s| &s.core).collect::<Vec<_>>())?;
    let mut blocks = vec![scions[0].core.clone()];
    for pair in scions.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        let block = match (&next.pre, &prev.post) {
            (Some(a_ts), Some(a_st)) => fold_into_conv(&next.core, &compose_adaptions(a_ts, a_st)?)?,
            _ => next.core.clone(),
        };
        blocks.push(block);
    }
    let head = scions[expected - 1].head.clone();
    let student = BlockwiseNetwork::from_parts(&student_spec.name, blocks, head)?;

    let reference = netzoo::build_network(student_spec, 0)?;
    if reference.signatures() != student.signatures() {
        return Err(GraftError::ArchMismatch(format!(
            "block signatures {:?} vs {:?}",
            student.signatures(),
            reference.signatures()
        )));
    }
    if reference.count_params() != student.count_params() {
        return Err(GraftError::ArchMismatch(format!(
            "{} parameters vs {}",
            student.count_params(),
            reference.count_params()
        )));
    }
    if reference.num_classes != student.num_classes {
        return Err(GraftError::ArchMismatch(format!(
            "{} classes vs {}",
            student.num_classes, reference.num_classes
        )));
    }
    Ok(student)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netzoo::{build_network, TOY_CNN};

    fn toy(width: usize, seed: u64) -> BlockwiseNetwork {
        build_network(&ArchSpec::new(TOY_CNN, 10).with_width(width).with_resolution(16, 16), seed).unwrap()
    }

    #[test]
    fn adaption_shapes_and_determinism() {
        let a = make_adaption(8, 32, Direction::TeacherToStudent, 7).unwrap();
        assert_eq!(a.conv().weight.shape, vec![32, 8, 1, 1]);
        assert_eq!(
            make_adaption(16, 16, Direction::StudentToTeacher, 0).unwrap(),
            make_adaption(16, 16, Direction::StudentToTeacher, 0).unwrap()
        );
        assert!(make_adaption(0, 4, Direction::TeacherToStudent, 0).is_err());
    }

    #[test]
    fn wrap_special_cases() {
        let teacher = toy(8, 0);
        let student = toy(4, 1);
        let scions = wrap_student(&student, &teacher, 3).unwrap();
        assert!(scions[0].pre.is_none() && scions[0].post.is_some());
        assert!(scions[3].post.is_none() && scions[3].pre.is_some() && scions[3].head.is_some());
        let mid = &scions[1];
        assert_eq!(mid.pre.as_ref().unwrap().matrix().rows, 4);
        assert_eq!(mid.pre.as_ref().unwrap().matrix().cols, 8);
        assert_eq!(mid.post.as_ref().unwrap().matrix().rows, 16);
        assert_eq!(mid.post.as_ref().unwrap().matrix().cols, 8);
    }

    #[test]
    fn stride_mismatch_names_both() {
        let teacher = toy(8, 0);
        let student = toy(4, 1);
        let err = wrap_scion(student.block(2).clone(), 1, &teacher.signatures(), 0).unwrap_err();
        assert!(matches!(err, GraftError::StrideMismatch { scion_stride: 2, teacher_stride: 1, .. }));
    }

    #[test]
    fn prefix_must_start_at_one() {
        let teacher = Arc::new(toy(8, 0));
        let scions = wrap_student(&toy(4, 1), &teacher, 0).unwrap();
        let err = graft_prefix(teacher, scions[1..3].to_vec()).unwrap_err();
        assert!(matches!(err, GraftError::NotPrefix { .. }));
    }

    #[test]
    fn compose_scalar_case() {
        let a = AdaptionModule::from_matrix(Direction::TeacherToStudent, Matrix::scaled_identity(5, 2.0));
        let b = AdaptionModule::from_matrix(Direction::StudentToTeacher, Matrix::scaled_identity(5, 3.0));
        assert_eq!(compose_adaptions(&a, &b).unwrap(), Matrix::scaled_identity(5, 6.0));
        let c = AdaptionModule::identity(4, Direction::StudentToTeacher);
        assert!(matches!(compose_adaptions(&a, &c), Err(GraftError::InnerDimension { .. })));
    }

    #[test]
    fn fold_identity_and_scaling() {
        let net = toy(4, 2);
        let block = net.block(2);
        let c = block.signature.in_channels;
        assert_eq!(&fold_into_conv(block, &Matrix::identity(c)).unwrap(), block);
        let doubled = fold_into_conv(block, &Matrix::scaled_identity(c, 2.0)).unwrap();
        let (Layer::Conv2d(a), Layer::Conv2d(b)) = (&block.layers.layers[0], &doubled.layers.layers[0]) else {
            panic!("toy blocks start with a convolution")
        };
        assert!(a.weight.value.iter().zip(&b.weight.value).all(|(x, y)| 2.0 * x == *y));
        assert!(matches!(
            fold_into_conv(block, &Matrix::new(c, c + 1, vec![0.0; c * (c + 1)])),
            Err(GraftError::NonSquare { .. })
        ));
    }

    #[test]
    fn trainable_sets() {
        let teacher = Arc::new(toy(8, 0));
        let scions = wrap_student(&toy(4, 1), &teacher, 0).unwrap();
        let m = graft_block(teacher.clone(), scions[2].clone()).unwrap();
        let names = trainable_params(&m, GraftKind::BlockGraft, 3).unwrap();
        assert!(!names.is_empty() && names.iter().all(|n| n.starts_with("scion3.")));
        assert!(trainable_params(&m, GraftKind::NetGraft, 1).is_err());

        let m = graft_prefix(teacher, scions[..3].to_vec()).unwrap();
        let names = trainable_params(&m, GraftKind::NetGraft, 2).unwrap();
        assert!(names.iter().any(|n| n.starts_with("scion1.")));
        assert!(names.iter().any(|n| n.starts_with("scion2.")));
        assert!(!names.iter().any(|n| n.starts_with("scion3.")));
        assert!(matches!(
            trainable_params(&m, GraftKind::NetGraft, 4),
            Err(GraftError::DepthExceedsCoverage { .. })
        ));
    }
}
