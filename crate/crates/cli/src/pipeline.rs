//! Pipeline execution over a run directory.
//!
//! Layout of `out_dir`:
//!
//! ```text
//! run.json              run manifest
//! metrics.csv           append-only training records
//! teacher/              teacher checkpoint (unless the config points elsewhere)
//! stage1/block{l}/      one scion per block
//! stage2/depth{l}/      all scions after training depth l
//! student/              the finalized student
//! baseline/             whole-network distillation baseline
//! ```
//!
//! Every unit checkpoint is written once and never rewritten, so a resumed
//! run picks up at the first missing unit and reproduces the uninterrupted
//! result.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use log::info;
use scion_core::distill::{self, TestSet, TrainContext, TrainRecord};
use scion_core::fewshot::{self, FewShotDataset, Normalization, SourceSplits};
use scion_core::graft::{self, GraftKind, WrappedScion};
use scion_core::netzoo::{self, count_params, ArchSpec, BlockwiseNetwork};
use scion_core::nn::NormMode;
use scion_core::seed;

use crate::checkpoint::{self, ScionTag};
use crate::config::{ExperimentConfig, StudentInit};
use crate::manifest::{RunManifest, RunStatus};
use crate::metrics::MetricsLog;

/// Seed-path tag separating teacher initialization and training from the
/// student's streams.
const TEACHER_TAG: u64 = 0x7465_6163;

/// Pipeline steps in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Step {
    Teacher,
    Stage1,
    Stage2,
    Finalize,
    Baseline,
}

impl Step {
    fn name(self) -> &'static str {
        match self {
            Step::Teacher => "teacher",
            Step::Stage1 => "stage1",
            Step::Stage2 => "stage2",
            Step::Finalize => "finalize",
            Step::Baseline => "baseline",
        }
    }
}

pub struct Data {
    pub splits: SourceSplits,
    pub norm: Normalization,
    pub test: TestSet,
}

/// Loads the configured source and builds the evaluation set.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Data> {
    let mut splits = fewshot::load_source(&cfg.dataset.source)
        .with_context(|| format!("loading dataset `{}`", cfg.dataset.source))?;
    let norm = cfg.normalization();
    let test = TestSet::new(&splits.test, &norm, cfg.eval_batch);
    if let Some(n) = cfg.dataset.train_per_class {
        splits.train = splits.train.balanced_subset(n, seed::derive(cfg.seeds.data, &[TEACHER_TAG]))?;
    }
    Ok(Data { splits, norm, test })
}

pub fn teacher_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.teacher.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("teacher"))
}

pub fn stage1_dir(run: &Path, l: usize) -> PathBuf {
    run.join("stage1").join(format!("block{l}"))
}

pub fn stage2_dir(run: &Path, depth: usize) -> PathBuf {
    run.join("stage2").join(format!("depth{depth}"))
}

/// Cross-entropy training of the configured teacher. Returns the network,
/// its test accuracy and the training records.
pub fn train_teacher(cfg: &ExperimentConfig, data: &Data) -> Result<(BlockwiseNetwork, f64, Vec<TrainRecord>)> {
    let Some(training) = &cfg.teacher.training else {
        bail!("no teacher checkpoint found and [teacher.training] is not configured");
    };
    let spec = cfg.teacher.arch_spec();
    let mut net = netzoo::build_network(&spec, seed::derive(cfg.seeds.init, &[TEACHER_TAG]))?;
    info!("training teacher {} ({} params)", spec.name, count_params(&net));
    let records = distill::train_supervised(
        &mut net,
        &data.splits.train,
        training,
        &data.norm,
        seed::derive(cfg.seeds.train, &[TEACHER_TAG]),
        Some(&data.test),
        None,
    )?;
    let acc = distill::evaluate(&net, &data.test)?.top1;
    info!("teacher accuracy {acc:.4}");
    Ok((net, acc, records))
}

/// One pipeline run bound to its output directory.
pub struct Session {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    pub manifest: RunManifest,
    metrics: MetricsLog,
    data: Option<Data>,
    /// Records of units trained but not yet checkpointed.
    pending: Vec<TrainRecord>,
}

impl Session {
    /// Opens the run directory. An existing run is only continued with
    /// `resume`, and only under the identical configuration.
    pub fn open(cfg: ExperimentConfig, resume: bool) -> Result<Self> {
        let dir = cfg.out_dir.clone();
        let manifest = if RunManifest::path(&dir).exists() {
            if !resume {
                bail!("{} already holds a run; pass --resume to continue it", dir.display());
            }
            let mut m = RunManifest::load(&dir)?;
            if m.config != cfg.to_toml() {
                bail!("configuration differs from the run recorded in {}", dir.display());
            }
            m.status = RunStatus::Running;
            m.failed_at = None;
            m.error = None;
            m
        } else {
            RunManifest::new(&cfg)
        };
        let mut s = Self {
            metrics: MetricsLog::in_dir(&dir),
            cfg,
            dir,
            manifest,
            data: None,
            pending: Vec::new(),
        };
        s.manifest.save(&s.dir)?;
        Ok(s)
    }

    pub fn data(&mut self) -> Result<&Data> {
        if self.data.is_none() {
            self.data = Some(load_data(&self.cfg)?);
        }
        Ok(self.data.as_ref().expect("loaded"))
    }

    fn test(&self) -> &TestSet {
        &self.data.as_ref().expect("data loaded").test
    }

    fn record_checkpoint(&mut self, name: String, path: &Path) {
        let rel = path.strip_prefix(&self.dir).unwrap_or(path).to_path_buf();
        self.manifest.checkpoints.insert(name, rel);
    }

    fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.manifest.metrics.insert(name.into(), value);
    }

    /// Writes pending rows; called right after a checkpoint lands.
    fn flush(&mut self) -> Result<()> {
        self.metrics.append(&self.pending)?;
        self.pending.clear();
        self.manifest.save(&self.dir)
    }

    /// Restores metrics rows of a checkpointed unit if a crash lost them.
    fn restore_rows(&mut self, unit: &str, ckpt: &Path) -> Result<()> {
        if !self.metrics.units()?.contains(unit) {
            self.metrics.append(&checkpoint::load_records(ckpt)?)?;
        }
        Ok(())
    }

    fn persist_due(&self, unit_ordinal: usize, last: bool) -> bool {
        last || unit_ordinal % self.cfg.checkpoint_every == 0
    }

    pub fn teacher(&mut self) -> Result<Arc<BlockwiseNetwork>> {
        let dir = teacher_dir(&self.cfg);
        let spec = self.cfg.teacher.arch_spec();
        self.data()?;
        let net = if checkpoint::exists(&dir) {
            let (net, stored) = checkpoint::load_network(&dir)?;
            if stored != spec {
                bail!("teacher checkpoint {} is {stored:?}, config wants {spec:?}", dir.display());
            }
            net
        } else {
            let (net, _, records) = train_teacher(&self.cfg, self.data.as_ref().expect("loaded"))?;
            for r in &records {
                let mut r = r.clone();
                r.unit = "teacher".into();
                self.pending.push(r);
            }
            checkpoint::save_network(&dir, &net, &spec)?;
            self.flush()?;
            net
        };
        let acc = distill::evaluate(&net, self.test())?.top1;
        self.metric("teacher.test_acc", acc);
        self.metric("teacher.params", count_params(&net) as f64);
        self.record_checkpoint("teacher".into(), &dir);
        self.manifest.save(&self.dir)?;
        Ok(Arc::new(net))
    }

    pub fn few_shot(&mut self) -> Result<FewShotDataset> {
        let (k, seed_data) = (self.cfg.k, self.cfg.seeds.data);
        Ok(fewshot::sample_kshot(&self.data()?.splits.train, k, seed_data)?)
    }

    /// Untrained scions in index order.
    pub fn initial_scions(&self, teacher: &BlockwiseNetwork) -> Result<Vec<WrappedScion>> {
        Ok(match self.cfg.student.init {
            StudentInit::TeacherCopy => (1..=teacher.num_blocks())
                .map(|l| WrappedScion::identity_copy(teacher, l))
                .collect::<Result<_, _>>()?,
            StudentInit::Random => {
                let student = netzoo::build_network(&self.cfg.student.arch_spec(), self.cfg.seeds.init)?;
                graft::wrap_student(&student, teacher, self.cfg.seeds.init)?
            }
        })
    }

    fn context<'a>(&'a self, data: &'a FewShotDataset, norm: &'a Normalization) -> TrainContext<'a> {
        let mut ctx = TrainContext::new(data, norm);
        ctx.padding = self.cfg.padding();
        ctx.test = Some(self.test());
        ctx
    }

    fn scion_norm(&self) -> NormMode {
        self.cfg.scion_norm.into()
    }

    fn specs(&self) -> (ArchSpec, ArchSpec) {
        (self.cfg.student.arch_spec(), self.cfg.teacher.arch_spec())
    }

    pub fn stage1(&mut self, teacher: &Arc<BlockwiseNetwork>, fs: &FewShotDataset) -> Result<Vec<WrappedScion>> {
        let cfg = self.cfg.stage_config(GraftKind::BlockGraft);
        let blocks = teacher.num_blocks();
        let (sspec, tspec) = self.specs();
        let norm = self.cfg.normalization();
        let mut out = Vec::with_capacity(blocks);
        let mut unsaved: Vec<WrappedScion> = Vec::new();
        for scion in self.initial_scions(teacher)? {
            let l = scion.index;
            let dir = stage1_dir(&self.dir, l);
            let unit = format!("block{l}");
            let trained = if checkpoint::exists(&dir) {
                self.restore_rows(&unit, &dir)?;
                checkpoint::load_scions(&dir, teacher)?.pop().context("empty stage-1 checkpoint")?
            } else {
                let mut ctx = self.context(fs, &norm);
                let (s, records) = distill::train_block(teacher, scion, &cfg, self.scion_norm(), &mut ctx)?;
                self.pending.extend(records);
                unsaved.push(s.clone());
                if self.persist_due(l, l == blocks) {
                    for s in unsaved.drain(..) {
                        let d = stage1_dir(&self.dir, s.index);
                        let rows: Vec<_> =
                            self.pending.iter().filter(|r| r.unit == format!("block{}", s.index)).cloned().collect();
                        let tag = ScionTag { kind: GraftKind::BlockGraft, unit: s.index };
                        checkpoint::save_scions(&d, std::slice::from_ref(&s), &sspec, &tspec, tag, &rows)?;
                    }
                    self.flush()?;
                }
                s
            };
            let hybrid = graft::graft_block(Arc::clone(teacher), trained.clone())?;
            let acc = distill::evaluate(&hybrid, self.test())?.top1;
            info!("stage 1 block {l}: hybrid accuracy {acc:.4}");
            self.metric(format!("stage1.block{l}.test_acc"), acc);
            self.record_checkpoint(format!("stage1.block{l}"), &dir);
            out.push(trained);
        }
        self.manifest.save(&self.dir)?;
        Ok(out)
    }

    pub fn stage2(
        &mut self,
        teacher: &Arc<BlockwiseNetwork>,
        fs: &FewShotDataset,
        stage1: Vec<WrappedScion>,
    ) -> Result<Vec<WrappedScion>> {
        let cfg = self.cfg.stage_config(GraftKind::NetGraft);
        let blocks = teacher.num_blocks();
        let (sspec, tspec) = self.specs();
        let norm = self.cfg.normalization();
        let mut scions = stage1;
        for depth in 2..=blocks {
            let dir = stage2_dir(&self.dir, depth);
            let unit = format!("depth{depth}");
            if checkpoint::exists(&dir) {
                self.restore_rows(&unit, &dir)?;
                scions = checkpoint::load_scions(&dir, teacher)?;
            } else {
                let mut ctx = self.context(fs, &norm);
                let (s, records) = distill::train_depth(teacher, scions, depth, &cfg, self.scion_norm(), &mut ctx)?;
                scions = s;
                self.pending.extend(records);
                if self.persist_due(depth - 1, depth == blocks) {
                    let rows: Vec<_> = self.pending.clone();
                    let tag = ScionTag { kind: GraftKind::NetGraft, unit: depth };
                    checkpoint::save_scions(&dir, &scions, &sspec, &tspec, tag, &rows)?;
                    self.flush()?;
                }
            }
            let model = graft::graft_prefix(Arc::clone(teacher), scions[..depth].to_vec())?;
            let acc = distill::evaluate(&model, self.test())?.top1;
            info!("stage 2 depth {depth}: accuracy {acc:.4}");
            self.metric(format!("stage2.depth{depth}.test_acc"), acc);
            if checkpoint::exists(&dir) {
                self.record_checkpoint(format!("stage2.depth{depth}"), &dir);
            }
        }
        self.manifest.save(&self.dir)?;
        Ok(scions)
    }

    pub fn finalize(&mut self, scions: &[WrappedScion]) -> Result<BlockwiseNetwork> {
        let spec = self.cfg.student.arch_spec();
        let student = graft::finalize_student(scions, &spec)?;
        let dir = self.dir.join("student");
        checkpoint::save_network(&dir, &student, &spec)?;
        let acc = distill::evaluate(&student, self.test())?.top1;
        info!("finalized student: accuracy {acc:.4}, {} params", count_params(&student));
        self.metric("student.test_acc", acc);
        self.metric("student.params", count_params(&student) as f64);
        self.record_checkpoint("student".into(), &dir);
        self.manifest.save(&self.dir)?;
        Ok(student)
    }

    /// Whole-student distillation under the same data and, by default, the
    /// same total epoch budget as the grafting pipeline.
    pub fn baseline(&mut self, teacher: &Arc<BlockwiseNetwork>, fs: &FewShotDataset) -> Result<BlockwiseNetwork> {
        let spec = self.cfg.student.arch_spec();
        let dir = self.dir.join("baseline");
        let net = if checkpoint::exists(&dir) {
            self.restore_rows("whole", &dir)?;
            checkpoint::load_network(&dir)?.0
        } else {
            let mut net = match self.cfg.student.init {
                StudentInit::TeacherCopy => (**teacher).clone(),
                StudentInit::Random => netzoo::build_network(&spec, self.cfg.seeds.init)?,
            };
            let b = &self.cfg.baseline;
            let epochs = b.epochs.unwrap_or_else(|| self.cfg.pipeline_epochs(teacher.num_blocks()));
            let lr = b.lr.unwrap_or(self.cfg.stage1.base_lr);
            let objective = b.whole_objective();
            let norm = self.cfg.normalization();
            let mut ctx = self.context(fs, &norm);
            info!("baseline: whole-student distillation for {epochs} epochs");
            let records = distill::train_whole(teacher, &mut net, objective, epochs, lr, self.cfg.seeds.train, &mut ctx)?;
            checkpoint::save_network(&dir, &net, &spec)?;
            self.pending.extend(records);
            self.flush()?;
            net
        };
        let acc = distill::evaluate(&net, self.test())?.top1;
        info!("baseline accuracy {acc:.4}");
        self.metric("baseline.test_acc", acc);
        self.record_checkpoint("baseline".into(), &dir);
        self.manifest.save(&self.dir)?;
        Ok(net)
    }

    fn steps(&mut self, until: Step, current: &mut Step) -> Result<()> {
        *current = Step::Teacher;
        let teacher = self.teacher()?;
        if until == Step::Teacher {
            return Ok(());
        }
        let fs = self.few_shot()?;
        *current = Step::Stage1;
        let scions = self.stage1(&teacher, &fs)?;
        if until == Step::Stage1 {
            return Ok(());
        }
        *current = Step::Stage2;
        let scions = self.stage2(&teacher, &fs, scions)?;
        if until == Step::Stage2 {
            return Ok(());
        }
        *current = Step::Finalize;
        self.finalize(&scions)?;
        if until == Step::Finalize || !self.cfg.baseline.enabled {
            return Ok(());
        }
        *current = Step::Baseline;
        self.baseline(&teacher, &fs)?;
        Ok(())
    }

    /// Runs every step up to and including `until`, recording failures in
    /// the manifest.
    pub fn run(&mut self, until: Step) -> Result<RunManifest> {
        let mut current = Step::Teacher;
        match self.steps(until, &mut current) {
            Ok(()) => {
                self.manifest.status = if until == Step::Baseline { RunStatus::Complete } else { RunStatus::Partial };
                self.manifest.save(&self.dir)?;
                Ok(self.manifest.clone())
            }
            Err(e) => {
                self.manifest.status = RunStatus::Failed;
                self.manifest.failed_at = Some(current.name().into());
                self.manifest.error = Some(format!("{e:#}"));
                self.manifest.save(&self.dir)?;
                Err(e)
            }
        }
    }
}

/// Opens (or resumes) the configured run and executes it through `until`.
pub fn run_pipeline(cfg: ExperimentConfig, resume: bool, until: Step) -> Result<RunManifest> {
    Session::open(cfg, resume)?.run(until)
}
