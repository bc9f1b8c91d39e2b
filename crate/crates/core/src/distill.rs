//! Normalized-logit losses, the two grafting stages, baselines and evaluation.
//!
//! Losses return their value and the gradient with respect to the first
//! argument. Reductions are computed in `f64` whatever the engine precision.
//! The graft loss is `mean_b (1/N)·‖z̃_g − z̃_t‖²` with `z̃ = z/‖z‖₂` and
//! `N` the logit dimension: the `1/N` factor is applied per sample, then the
//! batch mean is taken.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use log::{debug, info};
use scion_nn::{Adam, AdamConfig, NormMode, Param, Scalar, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::fewshot::{self, FewShotDataset, Image, LabeledDataset, Normalization};
use crate::graft::{self, GraftError, GraftKind, GraftedModel, WrappedScion};
use crate::netzoo::BlockwiseNetwork;
use crate::seed;

/// Rows with a smaller norm cannot be normalized.
pub const NORM_EPS: f64 = 1e-12;

/// Loss convention recorded with every run.
pub const LOSS_CONVENTION: &str =
    "per sample (1/N)*||z_g/|z_g| - z_t/|z_t|||^2 with N = number of classes, then mean over the batch";

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error("degenerate logits in row {row}: norm {norm:e} is below {NORM_EPS:e}")]
    Degenerate { row: usize, norm: f64 },
    #[error("logit shapes differ: {0} vs {1}")]
    ShapeMismatch(Shape, Shape),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("non-finite loss in unit {unit}, epoch {epoch}, batch {batch}")]
    NonFinite { unit: usize, epoch: usize, batch: usize },
    #[error("invalid stage configuration: {0}")]
    Config(String),
    #[error("test set is empty")]
    EmptyTestSet,
    #[error(transparent)]
    Graft(#[from] GraftError),
    #[error(transparent)]
    Data(#[from] fewshot::DataError),
}

pub type Result<T> = std::result::Result<T, DistillError>;

fn rows(z: &Tensor) -> (usize, usize) {
    let s = z.shape();
    (s.n, s.sample_len())
}

fn row_norm(row: &[Scalar]) -> f64 {
    row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
}

/// `z / ‖z‖₂`.
pub fn normalize_logits(z: &[f64]) -> Result<Vec<f64>> {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > NORM_EPS) {
        return Err(DistillError::Degenerate { row: 0, norm });
    }
    Ok(z.iter().map(|v| v / norm).collect())
}

/// Graft loss and its gradient with respect to `z_grafted`.
pub fn graft_loss_grad(z_grafted: &Tensor, z_teacher: &Tensor, num_classes: usize) -> Result<(f64, Tensor)> {
    if z_grafted.shape() != z_teacher.shape() {
        return Err(DistillError::ShapeMismatch(z_grafted.shape(), z_teacher.shape()));
    }
    let (b, d) = rows(z_grafted);
    let n = num_classes as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0 as Scalar; b * d];
    let mut u = vec![0.0; d];
    let mut diff = vec![0.0; d];
    for r in 0..b {
        let zg = z_grafted.row(r);
        let zt = z_teacher.row(r);
        let (ng, nt) = (row_norm(zg), row_norm(zt));
        for (row, norm) in [(r, ng), (r, nt)] {
            if !(norm > NORM_EPS) {
                return Err(DistillError::Degenerate { row, norm });
            }
        }
        let mut sq = 0.0;
        let mut u_dot_diff = 0.0;
        for j in 0..d {
            u[j] = zg[j] as f64 / ng;
            diff[j] = u[j] - zt[j] as f64 / nt;
            sq += diff[j] * diff[j];
            u_dot_diff += u[j] * diff[j];
        }
        loss += sq / n;
        // d/dz of (1/N)‖u − v‖² is (2/(N‖z‖))·((u − v) − u·(u·(u − v))), which
        // vanishes exactly when the normalized rows coincide.
        let scale = 2.0 / (n * ng * b as f64);
        for j in 0..d {
            grad[r * d + j] = (scale * (diff[j] - u[j] * u_dot_diff)) as Scalar;
        }
    }
    Ok((loss / b as f64, Tensor::from_vec(z_grafted.shape(), grad)))
}

pub fn graft_loss(z_grafted: &Tensor, z_teacher: &Tensor, num_classes: usize) -> Result<f64> {
    graft_loss_grad(z_grafted, z_teacher, num_classes).map(|(l, _)| l)
}

fn softmax(row: &[Scalar], t: f64) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64 / t));
    let e: Vec<f64> = row.iter().map(|&v| (v as f64 / t - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `T² · mean_b CE(softmax(z_t/T), softmax(z_s/T))` and its gradient w.r.t. `z_student`.
pub fn kd_baseline_loss_grad(z_student: &Tensor, z_teacher: &Tensor, temperature: f64) -> Result<(f64, Tensor)> {
    if !(temperature > 0.0) {
        return Err(DistillError::Temperature(temperature));
    }
    if z_student.shape() != z_teacher.shape() {
        return Err(DistillError::ShapeMismatch(z_student.shape(), z_teacher.shape()));
    }
    let (b, d) = rows(z_student);
    let t = temperature;
    let mut loss = 0.0;
    let mut grad = vec![0.0 as Scalar; b * d];
    for r in 0..b {
        let ps = softmax(z_student.row(r), t);
        let pt = softmax(z_teacher.row(r), t);
        loss -= pt.iter().zip(&ps).map(|(a, s)| a * s.ln()).sum::<f64>();
        for j in 0..d {
            grad[r * d + j] = (t * (ps[j] - pt[j]) / b as f64) as Scalar;
        }
    }
    Ok((t * t * loss / b as f64, Tensor::from_vec(z_student.shape(), grad)))
}

pub fn kd_baseline_loss(z_student: &Tensor, z_teacher: &Tensor, temperature: f64) -> Result<f64> {
    kd_baseline_loss_grad(z_student, z_teacher, temperature).map(|(l, _)| l)
}

/// Mean squared error between feature maps, for intermediate-output imitation.
pub fn feature_loss_grad(output: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if output.shape() != target.shape() {
        return Err(DistillError::ShapeMismatch(output.shape(), target.shape()));
    }
    let len = output.len() as f64;
    let mut loss = 0.0;
    let grad = output
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            loss += d * d;
            (2.0 * d / len) as Scalar
        })
        .collect();
    Ok((loss / len, Tensor::from_vec(output.shape(), grad)))
}

/// Softmax cross-entropy against hard labels, mean over the batch.
pub fn cross_entropy_grad(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let (b, d) = rows(logits);
    assert_eq!(labels.len(), b, "one label per row");
    let mut loss = 0.0;
    let mut grad = vec![0.0 as Scalar; b * d];
    for (r, &y) in labels.iter().enumerate() {
        let p = softmax(logits.row(r), 1.0);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        for j in 0..d {
            let target = if j == y { 1.0 } else { 0.0 };
            grad[r * d + j] = ((p[j] - target) / b as f64) as Scalar;
        }
    }
    (loss / b as f64, Tensor::from_vec(logits.shape(), grad))
}

/// `base_lr · B / 64`.
pub fn scale_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 64.0
}

/// Objective for stage-1 units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockObjective {
    /// Match the teacher's normalized logits through the rest of the teacher.
    #[default]
    Logits,
    /// Match the teacher's activation at the block output (ablation). The
    /// last block has no intermediate output and always uses logits.
    Features,
}

/// Optimization settings shared by every unit of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: GraftKind,
    pub epochs_per_unit: usize,
    /// Learning rate at batch 64 for units missing from `base_lr_per_unit`.
    pub base_lr: f64,
    /// Block index (stage 1) or depth (stage 2) to learning rate at batch 64.
    #[serde(default)]
    pub base_lr_per_unit: BTreeMap<usize, f64>,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate on the test set every this many epochs; 0 means only after the last.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub objective: BlockObjective,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}

impl StageConfig {
    pub fn new(stage: GraftKind, epochs_per_unit: usize, base_lr: f64) -> Self {
        Self {
            stage,
            epochs_per_unit,
            base_lr,
            base_lr_per_unit: BTreeMap::new(),
            beta1: beta1(),
            beta2: beta2(),
            weight_decay: 0.0,
            seed: 0,
            eval_every: 0,
            objective: BlockObjective::Logits,
        }
    }

    /// Stage-1 defaults: 100 epochs per block, learning rate 2.5e-4 at batch 64.
    pub fn block_default() -> Self {
        Self::new(GraftKind::BlockGraft, 100, 2.5e-4)
    }

    /// Stage-2 defaults: 50 epochs per depth, learning rate 1e-4 at batch 64.
    pub fn net_default() -> Self {
        Self::new(GraftKind::NetGraft, 50, 1e-4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta1 != 0.9 || self.beta2 != 0.999 {
            return Err(DistillError::Config(format!(
                "Adam betas must be (0.9, 0.999), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if self.weight_decay != 0.0 {
            return Err(DistillError::Config(format!(
                "weight decay must be 0, got {}",
                self.weight_decay
            )));
        }
        if self.epochs_per_unit == 0 {
            return Err(DistillError::Config("epochs_per_unit must be positive".into()));
        }
        let lrs = std::iter::once(&self.base_lr).chain(self.base_lr_per_unit.values());
        if lrs.into_iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return Err(DistillError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_for(&self, unit: usize) -> f64 {
        self.base_lr_per_unit.get(&unit).copied().unwrap_or(self.base_lr)
    }

    fn adam(&self, unit: usize, batch_size: usize) -> Adam {
        Adam::new(AdamConfig {
            lr: scale_lr(self.lr_for(unit), batch_size),
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        })
    }
}

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    /// e.g. `block3`, `depth2`, `whole`, `teacher`.
    pub unit: String,
    /// 1-based.
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Top-1 agreement with the teacher on the augmented few-shot batches
    /// (labels are never seen); plain accuracy for supervised training.
    pub train_acc: f64,
    /// Top-1 test accuracy, present on evaluation epochs.
    pub test_acc: Option<f64>,
    pub seconds: f64,
}

impl TrainRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &TrainRecord) -> bool {
        self.unit == other.unit
            && self.epoch == other.epoch
            && self.loss.to_bits() == other.loss.to_bits()
            && self.train_acc.to_bits() == other.train_acc.to_bits()
            && self.test_acc.map(f64::to_bits) == other.test_acc.map(f64::to_bits)
    }
}

/// Labeled evaluation data, pre-converted to tensors.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub batches: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl TestSet {
    pub fn new(data: &LabeledDataset, norm: &Normalization, batch: usize) -> Self {
        let refs: Vec<&Image> = data.images.iter().collect();
        Self {
            batches: refs.chunks(batch.max(1)).map(|c| fewshot::to_tensor(c, norm)).collect(),
            labels: data.labels.clone(),
            num_classes: data.num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Anything that maps an input batch to logits in inference mode.
pub trait Classifier {
    fn logits(&self, x: &Tensor) -> Tensor;
}

impl Classifier for BlockwiseNetwork {
    fn logits(&self, x: &Tensor) -> Tensor {
        self.forward(x)
    }
}

impl Classifier for GraftedModel {
    fn logits(&self, x: &Tensor) -> Tensor {
        self.forward(x)
    }
}

impl<F: Fn(&Tensor) -> Tensor> Classifier for F {
    fn logits(&self, x: &Tensor) -> Tensor {
        self(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    /// Reported when there are at least 10 classes.
    pub top5: Option<f64>,
}

/// Rank of `target` when ties go to the lower index.
fn rank_of(row: &[Scalar], target: usize) -> usize {
    let t = row[target];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > t || (v == t && j < target))
        .count()
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(row: &[Scalar]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn evaluate(model: &dyn Classifier, test: &TestSet) -> Result<Accuracy> {
    if test.is_empty() {
        return Err(DistillError::EmptyTestSet);
    }
    let (mut top1, mut top5, mut i) = (0usize, 0usize, 0usize);
    for x in &test.batches {
        let z = model.logits(x);
        for r in 0..z.shape().n {
            let rank = rank_of(z.row(r), test.labels[i]);
            top1 += usize::from(rank == 0);
            top5 += usize::from(rank < 5);
            i += 1;
        }
    }
    let n = test.len() as f64;
    Ok(Accuracy {
        top1: top1 as f64 / n,
        top5: (test.num_classes >= 10).then(|| top5 as f64 / n),
    })
}

fn agreement(a: &Tensor, b: &Tensor) -> usize {
    (0..a.shape().n).filter(|&r| argmax(a.row(r)) == argmax(b.row(r))).count()
}

/// Data, batching and reporting shared by the training loops.
pub struct TrainContext<'a> {
    pub data: &'a FewShotDataset,
    pub norm: &'a Normalization,
    pub batch_size: usize,
    /// Crop padding; `None` disables augmentation.
    pub padding: Option<usize>,
    pub test: Option<&'a TestSet>,
    /// Called with each record as soon as it is produced.
    pub on_record: Option<&'a mut dyn FnMut(&TrainRecord)>,
}

impl<'a> TrainContext<'a> {
    pub fn new(data: &'a FewShotDataset, norm: &'a Normalization) -> Self {
        let padding = data.samples().first().map(|s| fewshot::default_padding(s.height));
        Self {
            data,
            norm,
            batch_size: fewshot::batch_size_for(data.k),
            padding,
            test: None,
            on_record: None,
        }
    }

    fn emit(&mut self, rec: &TrainRecord) {
        debug!(
            "{} epoch {}: loss {:.6} train {:.3} test {:?}",
            rec.unit, rec.epoch, rec.loss, rec.train_acc, rec.test_acc
        );
        if let Some(f) = self.on_record.as_mut() {
            f(rec);
        }
    }

    fn batches(&self, seed: u64, epoch: usize) -> Result<Vec<Tensor>> {
        let loader = fewshot::make_loader(self.data, self.batch_size, seed)?.with_padding(self.padding);
        Ok(loader
            .epoch(epoch as u64)
            .map(|b| fewshot::to_tensor(&b.iter().collect::<Vec<_>>(), self.norm))
            .collect())
    }

    fn test_acc(&self, model: &dyn Classifier, epoch: usize, epochs: usize, every: usize) -> Result<Option<f64>> {
        let due = epoch == epochs || (every > 0 && epoch % every == 0);
        match self.test {
            Some(t) if due => Ok(Some(evaluate(model, t)?.top1)),
            _ => Ok(None),
        }
    }
}

const STAGE1: u64 = 1;
const STAGE2: u64 = 2;
const WHOLE: u64 = 3;

fn apply_adam(adam: &mut Adam, allowed: &BTreeSet<String>, visit: impl FnOnce(&mut dyn FnMut(&str, &mut Param))) {
    adam.begin_step();
    visit(&mut |name, p| {
        if allowed.contains(name) {
            adam.update(name, p);
        }
    });
}

/// Optimizes the trainable scions of `model` against the teacher for one unit.
fn train_unit(
    model: &mut GraftedModel,
    unit: usize,
    stage_tag: u64,
    cfg: &StageConfig,
    ctx: &mut TrainContext<'_>,
) -> Result<Vec<TrainRecord>> {
    let label = match stage_tag {
        STAGE1 => format!("block{unit}"),
        _ => format!("depth{unit}"),
    };
    let allowed: BTreeSet<String> = graft::trainable_params(model, cfg.stage, unit)?.into_iter().collect();
    let mut adam = cfg.adam(unit, ctx.batch_size);
    let teacher = Arc::clone(&model.teacher);
    let num_classes = teacher.num_classes;
    let first = model.first_scion();
    let use_features = cfg.objective == BlockObjective::Features
        && cfg.stage == GraftKind::BlockGraft
        && unit < teacher.num_blocks();
    let loader_seed = seed::derive(cfg.seed, &[stage_tag, unit as u64]);
    let mut records = Vec::with_capacity(cfg.epochs_per_unit);

    for epoch in 1..=cfg.epochs_per_unit {
        let start = Instant::now();
        let (mut loss_sum, mut agree, mut seen) = (0.0, 0usize, 0usize);
        for (bi, x) in ctx.batches(loader_seed, epoch)?.into_iter().enumerate() {
            let (acts, z_t) = teacher.trace(&x);
            model.zero_grad();
            let loss = if use_features {
                let scion = model.scions.get_mut(&unit).expect("unit scion");
                let (y, cache) = scion.forward_record(&acts[unit - 1], model.scion_norm);
                let (loss, g) = feature_loss_grad(&y, &acts[unit])?;
                if !loss.is_finite() {
                    return Err(DistillError::NonFinite { unit, epoch, batch: bi });
                }
                scion.backward(&cache, &g, false);
                scion.commit_stats(&cache);
                agree += agreement(&model.forward(&x), &z_t);
                loss
            } else {
                let (z_g, cache) = model.forward_record_from(&acts[first - 1]);
                let (loss, g) = graft_loss_grad(&z_g, &z_t, num_classes)?;
                if !loss.is_finite() {
                    return Err(DistillError::NonFinite { unit, epoch, batch: bi });
                }
                model.backward(&cache, &g);
                model.commit_stats(&cache);
                agree += agreement(&z_g, &z_t);
                loss
            };
            apply_adam(&mut adam, &allowed, |f| model.visit_params_mut(f));
            loss_sum += loss;
            seen += x.shape().n;
        }
        let batches = ctx.data.len().div_ceil(ctx.batch_size);
        let test_acc = ctx.test_acc(&*model, epoch, cfg.epochs_per_unit, cfg.eval_every)?;
        let rec = TrainRecord {
            unit: label.clone(),
            epoch,
            loss: loss_sum / batches as f64,
            train_acc: agree as f64 / seen as f64,
            test_acc,
            seconds: start.elapsed().as_secs_f64(),
        };
        ctx.emit(&rec);
        records.push(rec);
    }
    Ok(records)
}

/// Trains stage-1 unit `l`: `H_l` alone inside the frozen teacher.
pub fn train_block(
    teacher: &Arc<BlockwiseNetwork>,
    scion: WrappedScion,
    cfg: &StageConfig,
    scion_norm: NormMode,
    ctx: &mut TrainContext<'_>,
) -> Result<(WrappedScion, Vec<TrainRecord>)> {
    cfg.validate()?;
    let l = scion.index;
    let mut model = graft::graft_block(Arc::clone(teacher), scion)?.with_scion_norm(scion_norm);
    info!("stage 1: block {l}");
    let records = train_unit(&mut model, l, STAGE1, cfg, ctx)?;
    Ok((model.into_scions().pop().expect("one scion"), records))
}

/// Stage 1 for every block in order. The blocks are independent problems.
pub fn train_stage1(
    teacher: &Arc<BlockwiseNetwork>,
    scions: Vec<WrappedScion>,
    cfg: &StageConfig,
    scion_norm: NormMode,
    ctx: &mut TrainContext<'_>,
) -> Result<(Vec<WrappedScion>, Vec<TrainRecord>)> {
    let mut trained = Vec::with_capacity(scions.len());
    let mut records = Vec::new();
    for s in scions {
        let (s, r) = train_block(teacher, s, cfg, scion_norm, ctx)?;
        trained.push(s);
        records.extend(r);
    }
    Ok((trained, records))
}

/// Trains stage-2 depth `l` (`2..=L`): `H_1..H_l` jointly. `scions` must
/// hold indices `1..=L`; only the first `l` change.
pub fn train_depth(
    teacher: &Arc<BlockwiseNetwork>,
    scions: Vec<WrappedScion>,
    depth: usize,
    cfg: &StageConfig,
    scion_norm: NormMode,
    ctx: &mut TrainContext<'_>,
) -> Result<(Vec<WrappedScion>, Vec<TrainRecord>)> {
    cfg.validate()?;
    let mut scions = scions;
    let rest = scions.split_off(depth.min(scions.len()));
    let mut model = graft::graft_prefix(Arc::clone(teacher), scions)?.with_scion_norm(scion_norm);
    info!("stage 2: depth {depth}");
    let records = train_unit(&mut model, depth, STAGE2, cfg, ctx)?;
    let mut out = model.into_scions();
    out.extend(rest);
    Ok((out, records))
}

/// Stage 2: depth 1 is the stage-1 graft of block 1; depths `2..=L` are trained in turn.
pub fn train_stage2(
    teacher: &Arc<BlockwiseNetwork>,
    scions: Vec<WrappedScion>,
    cfg: &StageConfig,
    scion_norm: NormMode,
    ctx: &mut TrainContext<'_>,
) -> Result<(Vec<WrappedScion>, Vec<TrainRecord>)> {
    let blocks = teacher.num_blocks();
    let mut scions = scions;
    let mut records = Vec::new();
    for depth in 2..=blocks {
        let (s, r) = train_depth(teacher, scions, depth, cfg, scion_norm, ctx)?;
        scions = s;
        records.extend(r);
    }
    Ok((scions, records))
}

/// Whole-student distillation objective for the comparison baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WholeObjective {
    /// The graft loss applied to the whole student.
    NormalizedLogits,
    /// Softened cross-entropy at the given temperature.
    Kd { temperature: f64 },
}

/// End-to-end distillation of `student` from `teacher` on the few-shot set.
pub fn train_whole(
    teacher: &BlockwiseNetwork,
    student: &mut BlockwiseNetwork,
    objective: WholeObjective,
    epochs: usize,
    base_lr: f64,
    seed_train: u64,
    ctx: &mut TrainContext<'_>,
) -> Result<Vec<TrainRecord>> {
    if epochs == 0 || !(base_lr > 0.0) {
        return Err(DistillError::Config("epochs and learning rate must be positive".into()));
    }
    let mut adam = Adam::new(AdamConfig {
        lr: scale_lr(base_lr, ctx.batch_size),
        ..AdamConfig::default()
    });
    let loader_seed = seed::derive(seed_train, &[WHOLE]);
    let num_classes = teacher.num_classes;
    let mut records = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let start = Instant::now();
        let (mut loss_sum, mut agree, mut seen) = (0.0, 0usize, 0usize);
        let batches = ctx.batches(loader_seed, epoch)?;
        let nb = batches.len();
        for (bi, x) in batches.into_iter().enumerate() {
            let z_t = teacher.forward(&x);
            student.zero_grad();
            let (z_s, cache) = student.forward_train(&x, NormMode::BatchStats);
            let (loss, g) = match objective {
                WholeObjective::NormalizedLogits => graft_loss_grad(&z_s, &z_t, num_classes)?,
                WholeObjective::Kd { temperature } => kd_baseline_loss_grad(&z_s, &z_t, temperature)?,
            };
            if !loss.is_finite() {
                return Err(DistillError::NonFinite { unit: 0, epoch, batch: bi });
            }
            student.backward(&cache, &g);
            adam.begin_step();
            student.visit_params_mut("", &mut |name, p| adam.update(name, p));
            agree += agreement(&z_s, &z_t);
            seen += x.shape().n;
            loss_sum += loss;
        }
        let test_acc = ctx.test_acc(&*student, epoch, epochs, 0)?;
        let rec = TrainRecord {
            unit: "whole".into(),
            epoch,
            loss: loss_sum / nb as f64,
            train_acc: agree as f64 / seen as f64,
            test_acc,
            seconds: start.elapsed().as_secs_f64(),
        };
        ctx.emit(&rec);
        records.push(rec);
    }
    Ok(records)
}

/// Settings for supervised training of a teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Cosine decay of the learning rate to zero over the run.
    #[serde(default = "yes")]
    pub cosine: bool,
    /// Evaluate every this many epochs; 0 means only after the last.
    #[serde(default)]
    pub eval_every: usize,
}

fn default_batch() -> usize {
    64
}
fn yes() -> bool {
    true
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 2e-3,
            batch_size: 64,
            cosine: true,
            eval_every: 0,
        }
    }
}

/// Cross-entropy training on labeled data with Adam.
pub fn train_supervised(
    net: &mut BlockwiseNetwork,
    train: &LabeledDataset,
    cfg: &SupervisedConfig,
    norm: &Normalization,
    seed_train: u64,
    test: Option<&TestSet>,
    mut on_record: Option<&mut dyn FnMut(&TrainRecord)>,
) -> Result<Vec<TrainRecord>> {
    if train.is_empty() {
        return Err(fewshot::DataError::Empty.into());
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(DistillError::Config("epochs, batch size and lr must be positive".into()));
    }
    let padding = fewshot::default_padding(train.images[0].height);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let total_steps = (cfg.epochs * train.len().div_ceil(cfg.batch_size)) as f64;
    let mut records = Vec::new();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let batches = fewshot::epoch_batches(train.len(), cfg.batch_size, seed_train, epoch as u64);
        let nb = batches.len();
        for (bi, idx) in batches.into_iter().enumerate() {
            let imgs: Vec<Image> = idx
                .iter()
                .map(|&i| fewshot::augment_sample(&train.images[i], padding, seed_train, epoch as u64, i))
                .collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let x = fewshot::to_tensor(&imgs.iter().collect::<Vec<_>>(), norm);
            net.zero_grad();
            let (z, cache) = net.forward_train(&x, NormMode::BatchStats);
            let (loss, g) = cross_entropy_grad(&z, &labels);
            if !loss.is_finite() {
                return Err(DistillError::NonFinite { unit: 0, epoch, batch: bi });
            }
            net.backward(&cache, &g);
            if cfg.cosine {
                let t = adam.steps() as f64 / total_steps;
                adam.config.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
            }
            adam.begin_step();
            net.visit_params_mut("", &mut |name, p| adam.update(name, p));
            correct += (0..labels.len()).filter(|&r| argmax(z.row(r)) == labels[r]).count();
            loss_sum += loss;
        }
        let due = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        let test_acc = match test {
            Some(t) if due => Some(evaluate(&*net, t)?.top1),
            _ => None,
        };
        let rec = TrainRecord {
            unit: "teacher".into(),
            epoch,
            loss: loss_sum / nb as f64,
            train_acc: correct as f64 / train.len() as f64,
            test_acc,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!(
            "teacher epoch {epoch}: loss {:.4} train {:.3} test {:?} ({:.1}s)",
            rec.loss, rec.train_acc, rec.test_acc, rec.seconds
        );
        if let Some(f) = on_record.as_mut() {
            f(&rec);
        }
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, data: Vec<Scalar>) -> Tensor {
        let d = data.len() / rows;
        Tensor::from_vec(Shape::new(rows, d, 1, 1), data)
    }

    #[test]
    fn normalize_examples() {
        let u = normalize_logits(&[3.0, 4.0]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
        assert!(normalize_logits(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn loss_cases() {
        let a = t(1, vec![1.0, 2.0, -0.5, 3.0]);
        assert_eq!(graft_loss(&a, &a, 4).unwrap(), 0.0);
        let neg = a.map(|v| -v);
        assert!((graft_loss(&a, &neg, 4).unwrap() - 1.0).abs() < 1e-6);
        let e1 = t(1, vec![1.0, 0.0, 0.0, 0.0]);
        let e2 = t(1, vec![0.0, 5.0, 0.0, 0.0]);
        assert!((graft_loss(&e1, &e2, 4).unwrap() - 0.5).abs() < 1e-6);
        assert!(matches!(
            graft_loss(&t(1, vec![0.0; 4]), &a, 4),
            Err(DistillError::Degenerate { .. })
        ));
    }

    #[test]
    fn identical_rows_have_zero_gradient() {
        let a = t(2, vec![0.3, -1.7, 2.2, 0.01, 0.5, 0.5]);
        let (l, g) = graft_loss_grad(&a, &a, 3).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lr_scaling() {
        assert_eq!(scale_lr(2.5e-4, 64), 2.5e-4);
        assert_eq!(scale_lr(1e-4, 32), 5e-5);
        assert_eq!(scale_lr(1e-3, 6), 9.375e-5);
    }

    #[test]
    fn uniform_teacher_uniform_student_zero_kd_gradient() {
        let z = t(1, vec![0.7; 10]);
        let (_, g) = kd_baseline_loss_grad(&z, &z, 4.0).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert!(kd_baseline_loss(&z, &z, 0.0).is_err());
    }

    #[test]
    fn stage_config_rejects_weight_decay() {
        let mut c = StageConfig::block_default();
        c.validate().unwrap();
        c.weight_decay = 1e-4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn ranking_ties_prefer_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 0), 0);
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 2), 2);
    }
}
