//! Experiment configuration (TOML).
//!
//! ```toml
//! out_dir = "runs/toy"
//! k = 10
//! scion_norm = "batch"            # or "running"
//!
//! [seeds]
//! data = 0
//! init = 0
//! train = 0
//!
//! [dataset]
//! source = "synthetic:shapes?train=500&test=200&res=16&seed=0"
//! mean = [0.5, 0.5, 0.5]
//! std = [0.25, 0.25, 0.25]
//!
//! [teacher]
//! arch = "toy-cnn-4block"
//! width = 16
//! resolution = [16, 16]
//!
//! [teacher.training]
//! epochs = 30
//! lr = 0.002
//!
//! [student]
//! arch = "toy-cnn-4block"
//! width = 8
//! resolution = [16, 16]
//!
//! [stage1]
//! epochs_per_unit = 100
//! base_lr = 0.0025
//! base_lr_per_unit = { "4" = 0.001 }
//!
//! [stage2]
//! epochs_per_unit = 50
//! base_lr = 0.001
//!
//! [baseline]
//! objective = "normalized-logits"  # or "kd"
//! ```
//!
//! Semantic errors are reported with the line of the offending key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use scion_core::distill::{BlockObjective, StageConfig, SupervisedConfig, WholeObjective};
use scion_core::fewshot::Normalization;
use scion_core::graft::GraftKind;
use scion_core::netzoo::{ArchSpec, BlockSpec};
use scion_core::nn::NormMode;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}:{line}:{column}: {msg}")]
    At {
        path: String,
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScionNorm {
    /// Normalize with batch statistics while training, update running ones.
    #[default]
    Batch,
    /// Always normalize with stored running statistics.
    Running,
}

impl From<ScionNorm> for NormMode {
    fn from(n: ScionNorm) -> Self {
        match n {
            ScionNorm::Batch => NormMode::BatchStats,
            ScionNorm::Running => NormMode::RunningStats,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StudentInit {
    /// He initialization from `seeds.init`.
    #[default]
    Random,
    /// Teacher block copies with identity adaptions (student must equal the teacher).
    TeacherCopy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default)]
    pub data: u64,
    #[serde(default)]
    pub init: u64,
    #[serde(default)]
    pub train: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub source: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Crop padding; resolution/8 when absent.
    #[serde(default)]
    pub padding: Option<usize>,
    #[serde(default = "yes")]
    pub augment: bool,
    /// Images per class kept for teacher training; all when absent.
    #[serde(default)]
    pub train_per_class: Option<usize>,
}

fn yes() -> bool {
    true
}
fn ten() -> usize {
    10
}
fn three() -> usize {
    3
}
fn res32() -> [usize; 2] {
    [32, 32]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    pub arch: String,
    #[serde(default = "ten")]
    pub classes: usize,
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default = "res32")]
    pub resolution: [usize; 2],
    #[serde(default = "three")]
    pub in_channels: usize,
    #[serde(default)]
    pub blocks: Option<Vec<BlockSpec>>,
    /// Teacher only: existing checkpoint directory to load instead of training.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Teacher only.
    #[serde(default)]
    pub training: Option<SupervisedConfig>,
    /// Student only.
    #[serde(default)]
    pub init: StudentInit,
}

impl NetSection {
    pub fn arch_spec(&self) -> ArchSpec {
        ArchSpec {
            name: self.arch.clone(),
            num_classes: self.classes,
            width: self.width,
            resolution: self.resolution,
            in_channels: self.in_channels,
            blocks: self.blocks.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub epochs_per_unit: usize,
    pub base_lr: f64,
    #[serde(default)]
    pub base_lr_per_unit: BTreeMap<String, f64>,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default)]
    pub weight_decay: f64,
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

impl StageSection {
    fn defaults(stage: GraftKind) -> Self {
        let c = match stage {
            GraftKind::BlockGraft => StageConfig::block_default(),
            GraftKind::NetGraft => StageConfig::net_default(),
        };
        Self {
            epochs_per_unit: c.epochs_per_unit,
            base_lr: c.base_lr,
            base_lr_per_unit: BTreeMap::new(),
            beta1: c.beta1,
            beta2: c.beta2,
            weight_decay: c.weight_decay,
            eval_every: 0,
            objective: BlockObjective::Logits,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "normalized")]
    pub objective: String,
    #[serde(default = "four")]
    pub temperature: f64,
    /// Total epochs; the grafting pipeline's total when absent.
    #[serde(default)]
    pub epochs: Option<usize>,
    /// Learning rate at batch 64; the stage-1 default when absent.
    #[serde(default)]
    pub lr: Option<f64>,
}

fn normalized() -> String {
    "normalized-logits".into()
}
fn four() -> f64 {
    4.0
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            enabled: false,
            objective: normalized(),
            temperature: four(),
            epochs: None,
            lr: None,
        }
    }
}

impl BaselineSection {
    pub fn whole_objective(&self) -> WholeObjective {
        match self.objective.as_str() {
            "kd" => WholeObjective::Kd { temperature: self.temperature },
            _ => WholeObjective::NormalizedLogits,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub k: usize,
    #[serde(default)]
    pub scion_norm: ScionNorm,
    /// Persist scions after every this many units.
    #[serde(default = "one")]
    pub checkpoint_every: usize,
    pub seeds: Seeds,
    pub dataset: DatasetSection,
    pub teacher: NetSection,
    pub student: NetSection,
    #[serde(default = "stage1_default")]
    pub stage1: StageSection,
    #[serde(default = "stage2_default")]
    pub stage2: StageSection,
    #[serde(default)]
    pub baseline: BaselineSection,
    /// Test-set batch size for evaluation.
    #[serde(default = "eval_batch")]
    pub eval_batch: usize,
}

fn one() -> usize {
    1
}
fn eval_batch() -> usize {
    250
}
fn stage1_default() -> StageSection {
    StageSection::defaults(GraftKind::BlockGraft)
}
fn stage2_default() -> StageSection {
    StageSection::defaults(GraftKind::NetGraft)
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses and validates; `origin` labels error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
            ConfigError::At {
                path: origin.to_owned(),
                line,
                column,
                msg: e.message().to_owned(),
            }
        })?;
        cfg.validate(text, origin)?;
        Ok(cfg)
    }

    fn validate(&self, text: &str, origin: &str) -> Result<(), ConfigError> {
        let fail = |section: &str, key: &str, msg: String| {
            let (line, column) = locate(text, section, key);
            Err(ConfigError::At {
                path: origin.to_owned(),
                line,
                column,
                msg,
            })
        };
        if self.k == 0 {
            return fail("", "k", "k must be at least 1".into());
        }
        if self.checkpoint_every == 0 {
            return fail("", "checkpoint_every", "checkpoint_every must be at least 1".into());
        }
        let channels = self.teacher.in_channels;
        if self.dataset.mean.len() != channels {
            return fail(
                "dataset",
                "mean",
                format!("{} values for {channels} channels", self.dataset.mean.len()),
            );
        }
        if self.dataset.std.len() != channels || self.dataset.std.iter().any(|s| !(*s > 0.0)) {
            return fail("dataset", "std", format!("need {channels} positive values"));
        }
        for (name, net) in [("teacher", &self.teacher), ("student", &self.student)] {
            if let Err(e) = scion_core::netzoo::build_network(&net.arch_spec(), 0) {
                return fail(name, "arch", e.to_string());
            }
        }
        if self.student.checkpoint.is_some() || self.student.training.is_some() {
            return fail("student", "checkpoint", "student sections take no checkpoint or training".into());
        }
        let t = scion_core::netzoo::build_network(&self.teacher.arch_spec(), 0).expect("validated");
        let s = scion_core::netzoo::build_network(&self.student.arch_spec(), 0).expect("validated");
        if t.num_blocks() != s.num_blocks() {
            return fail(
                "student",
                "arch",
                format!("student has {} blocks, teacher has {}", s.num_blocks(), t.num_blocks()),
            );
        }
        if t.num_classes != s.num_classes || t.input_dims() != s.input_dims() {
            return fail("student", "arch", "student classes and input shape must match the teacher".into());
        }
        if self.student.init == StudentInit::TeacherCopy && self.student.arch_spec() != self.teacher.arch_spec() {
            return fail("student", "init", "teacher-copy needs the student architecture to equal the teacher".into());
        }
        for (name, section) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            for key in section.base_lr_per_unit.keys() {
                match key.parse::<usize>() {
                    Ok(u) if (1..=t.num_blocks()).contains(&u) => {}
                    _ => {
                        return fail(
                            name,
                            "base_lr_per_unit",
                            format!("unit `{key}` is not a block index in 1..={}", t.num_blocks()),
                        )
                    }
                }
            }
            let stage = if name == "stage1" { GraftKind::BlockGraft } else { GraftKind::NetGraft };
            if let Err(e) = self.stage_config(stage).validate() {
                let key = if section.weight_decay != 0.0 {
                    "weight_decay"
                } else if section.beta1 != 0.9 {
                    "beta1"
                } else if section.beta2 != 0.999 {
                    "beta2"
                } else if section.epochs_per_unit == 0 {
                    "epochs_per_unit"
                } else {
                    "base_lr"
                };
                return fail(name, key, e.to_string());
            }
        }
        if !matches!(self.baseline.objective.as_str(), "normalized-logits" | "kd") {
            return fail(
                "baseline",
                "objective",
                format!("unknown objective `{}` (normalized-logits or kd)", self.baseline.objective),
            );
        }
        if !(self.baseline.temperature > 0.0) {
            return fail("baseline", "temperature", "temperature must be positive".into());
        }
        Ok(())
    }

    pub fn stage_config(&self, stage: GraftKind) -> StageConfig {
        let s = match stage {
            GraftKind::BlockGraft => &self.stage1,
            GraftKind::NetGraft => &self.stage2,
        };
        StageConfig {
            stage,
            epochs_per_unit: s.epochs_per_unit,
            base_lr: s.base_lr,
            base_lr_per_unit: s
                .base_lr_per_unit
                .iter()
                .filter_map(|(k, v)| k.parse().ok().map(|k| (k, *v)))
                .collect(),
            beta1: s.beta1,
            beta2: s.beta2,
            weight_decay: s.weight_decay,
            seed: self.seeds.train,
            eval_every: s.eval_every,
            objective: s.objective,
        }
    }

    pub fn normalization(&self) -> Normalization {
        Normalization {
            mean: self.dataset.mean.clone(),
            std: self.dataset.std.clone(),
        }
    }

    pub fn padding(&self) -> Option<usize> {
        self.dataset.augment.then(|| {
            self.dataset
                .padding
                .unwrap_or_else(|| scion_core::fewshot::default_padding(self.teacher.resolution[0]))
        })
    }

    /// Total epochs of stage 1 and stage 2 together.
    pub fn pipeline_epochs(&self, blocks: usize) -> usize {
        blocks * self.stage1.epochs_per_unit + (blocks - 1) * self.stage2.epochs_per_unit
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

/// Line and column of `key` inside `[section]` (top level when empty);
/// falls back to the section header, then to line 1.
fn locate(text: &str, section: &str, key: &str) -> (usize, usize) {
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_start();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_owned();
            if current == section && header.is_none() {
                header = Some((i + 1, 1));
            }
            continue;
        }
        let in_section = current == section || current.starts_with(&format!("{section}."));
        let k = line.split('=').next().unwrap_or("").trim();
        if in_section && k == key && line.contains('=') {
            return (i + 1, raw.len() - line.len() + 1);
        }
    }
    header.unwrap_or((1, 1))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub const MINIMAL: &str = r#"
out_dir = "runs/x"
k = 10

[seeds]
data = 1

[dataset]
source = "synthetic:shapes?train=20&test=5&res=16"
mean = [0.5, 0.5, 0.5]
std = [0.25, 0.25, 0.25]

[teacher]
arch = "toy-cnn-4block"
width = 8
resolution = [16, 16]

[student]
arch = "toy-cnn-4block"
width = 4
resolution = [16, 16]
"#;

    #[test]
    fn parses_minimal() {
        let c = ExperimentConfig::parse(MINIMAL, "t.toml").unwrap();
        assert_eq!(c.stage1.epochs_per_unit, 100);
        assert_eq!(c.stage2.epochs_per_unit, 50);
        assert_eq!(c.seeds.data, 1);
        assert_eq!(c.padding(), Some(2));
        let again = ExperimentConfig::parse(&c.to_toml(), "round").unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn syntax_error_has_line() {
        let text = MINIMAL.replace("k = 10", "k = = 10");
        let err = ExperimentConfig::parse(&text, "t.toml").unwrap_err().to_string();
        assert!(err.starts_with("t.toml:3:"), "{err}");
    }

    #[test]
    fn weight_decay_rejected_at_its_line() {
        let text = format!("{MINIMAL}\n[stage1]\nepochs_per_unit = 3\nbase_lr = 0.001\nweight_decay = 0.1\n");
        let line = text.lines().position(|l| l.starts_with("weight_decay")).unwrap() + 1;
        let err = ExperimentConfig::parse(&text, "t.toml").unwrap_err().to_string();
        assert!(err.starts_with(&format!("t.toml:{line}:1:")), "{err}");
    }

    #[test]
    fn unknown_arch_and_block_count() {
        let text = MINIMAL.replacen("arch = \"toy-cnn-4block\"\nwidth = 4", "arch = \"vgg16-cifar\"\nwidth = 4", 1);
        let err = ExperimentConfig::parse(&text, "t.toml").unwrap_err().to_string();
        assert!(err.contains(":19:"), "{err}");
        let text = MINIMAL.replacen("toy-cnn-4block", "lenet", 1);
        let err = ExperimentConfig::parse(&text, "t.toml").unwrap_err().to_string();
        assert!(err.contains("unknown architecture") && err.contains(":14:"), "{err}");
    }
}
