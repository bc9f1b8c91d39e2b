//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Criteria 1-7 are property checks and take seconds. Criteria 8-10 train the
//! desk-scale toy configuration: one shared teacher, five grafting pipelines
//! with their whole-student baselines, and a partial graft of block 3. Expect
//! about half an hour on one core.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use rand::Rng;
use scion_cli::config::ExperimentConfig;
use scion_cli::pipeline::{self, Step};
use scion_cli::report;
use scion_cli::verify;
use scion_core::distill::{self, graft_loss_grad, TrainContext, WholeObjective};
use scion_core::fewshot;
use scion_core::graft::{self, GraftKind, WrappedScion};
use scion_core::netzoo::{self, BlockwiseNetwork};
use scion_core::nn::{Shape, Tensor};
use scion_core::{seed, Scalar};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn toy_config(work: &Path, s: u64) -> Result<ExperimentConfig> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let mut cfg = ExperimentConfig::from_path(&path)?;
    cfg.out_dir = work.join(format!("seed{s}"));
    cfg.seeds.data = s;
    cfg.seeds.init = s;
    cfg.seeds.train = s;
    cfg.teacher.checkpoint = Some(work.join("teacher"));
    Ok(cfg)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn pct(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|a| format!("{:.1}", a * 100.0)).collect();
    parts.join(" ")
}

/// Shared state of the training criteria.
struct Desk {
    work: PathBuf,
    teacher: Arc<BlockwiseNetwork>,
    teacher_acc: f64,
    /// Per seed: finalized student, whole-student baseline, and the stage-1
    /// last-block hybrid.
    grafted: Vec<f64>,
    baseline: Vec<f64>,
    last_block: Vec<f64>,
}

impl Desk {
    fn run(work: &Path) -> Result<Self> {
        let (mut grafted, mut baseline, mut last_block) = (Vec::new(), Vec::new(), Vec::new());
        let mut teacher_acc = 0.0;
        for s in SEEDS {
            let cfg = toy_config(work, s)?;
            let blocks = cfg.teacher.arch_spec().blocks.map_or(4, |b| b.len());
            let m = pipeline::run_pipeline(cfg, false, Step::Baseline)?;
            let metric = |k: &str| m.metrics.get(k).copied().with_context(|| format!("missing metric {k}"));
            teacher_acc = metric("teacher.test_acc")?;
            grafted.push(metric("student.test_acc")?);
            baseline.push(metric("baseline.test_acc")?);
            last_block.push(metric(&format!("stage1.block{blocks}.test_acc"))?);
        }
        let cfg = toy_config(work, 0)?;
        let teacher = Arc::new(scion_cli::checkpoint::load_network(&pipeline::teacher_dir(&cfg))?.0);
        Ok(Self { work: work.to_path_buf(), teacher, teacher_acc, grafted, baseline, last_block })
    }
}

fn c1(_: Option<&Desk>) -> Result<String> {
    verify_check(0)
}

fn c2(_: Option<&Desk>) -> Result<String> {
    verify_check(1)
}

fn c3(_: Option<&Desk>) -> Result<String> {
    verify_check(2)
}

fn verify_check(i: usize) -> Result<String> {
    verify::CHECKS[i].1(17).map_err(anyhow::Error::msg)
}

/// Reference loss in f64, written from the definition.
fn reference_loss(zg: &[f64], zt: &[f64]) -> f64 {
    let norm = |z: &[f64]| z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (ng, nt) = (norm(zg), norm(zt));
    zg.iter().zip(zt).map(|(a, b)| (a / ng - b / nt).powi(2)).sum::<f64>() / zg.len() as f64
}

fn c4(_: Option<&Desk>) -> Result<String> {
    let props = verify_check(3)?;
    let mut rng = seed::rng(17, &[40]);
    let n = 10;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0f32..3.0) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0f32..3.0) as f64).collect();
        let row = |v: &[f64]| Tensor::from_vec(Shape::new(1, n, 1, 1), v.iter().map(|&x| x as Scalar).collect());
        let (_, g) = graft_loss_grad(&row(&a), &row(&b), n)?;
        for j in 0..n {
            let (mut up, mut down) = (a.clone(), a.clone());
            up[j] += 1e-5;
            down[j] -= 1e-5;
            let fd = (reference_loss(&up, &b) - reference_loss(&down, &b)) / 2e-5;
            worst = worst.max((g.data()[j] as f64 - fd).abs() / fd.abs().max(1e-3));
        }
    }
    ensure!(worst <= 1e-3, "gradient relative error {worst:.2e}");
    Ok(format!("{props}; gradient vs finite differences within {worst:.1e} at 20 points"))
}

fn c5(desk: Option<&Desk>) -> Result<String> {
    let desk = desk.context("needs the shared teacher")?;
    let cfg = toy_config(&desk.work, 0)?;
    let data = pipeline::load_data(&cfg)?;
    let fs = fewshot::sample_kshot(&data.splits.train, cfg.k, cfg.seeds.data)?;
    let teacher = &desk.teacher;
    let before = teacher.state_snapshot();
    let student = netzoo::build_network(&cfg.student.arch_spec(), 9)?;
    let scions = graft::wrap_student(&student, teacher, 9)?;
    let snapshot = |s: &WrappedScion| {
        let mut out = Vec::new();
        s.visit_state("", &mut |_, e| out.extend(e.values.iter().map(|v| v.to_bits())));
        out
    };
    let mut ctx = TrainContext::new(&fs, &data.norm);
    ctx.padding = cfg.padding();
    let c1 = cfg.stage_config(GraftKind::BlockGraft);
    let (trained, _) = distill::train_block(teacher, scions[1].clone(), &c1, cfg.scion_norm.into(), &mut ctx)?;
    ensure!(teacher.state_snapshot() == before, "teacher changed during a stage-1 unit");
    ensure!(snapshot(&trained) != snapshot(&scions[1]), "stage-1 scion did not train");
    let mut start = scions.clone();
    start[1] = trained;
    let c2 = cfg.stage_config(GraftKind::NetGraft);
    let (after, _) = distill::train_depth(teacher, start.clone(), 2, &c2, cfg.scion_norm.into(), &mut ctx)?;
    ensure!(teacher.state_snapshot() == before, "teacher changed during a stage-2 depth");
    for (old, new) in start.iter().zip(&after) {
        let same = snapshot(old) == snapshot(new);
        ensure!(same == (new.index > 2), "scion {} frozen={same} at depth 2", new.index);
    }
    Ok(format!(
        "teacher bit-identical after {} + {} epochs; scions 3..4 untouched at depth 2",
        c1.epochs_per_unit, c2.epochs_per_unit
    ))
}

fn c6(_: Option<&Desk>) -> Result<String> {
    verify_check(4)
}

fn c7(_: Option<&Desk>) -> Result<String> {
    let detail = verify_check(5)?;
    // The few-shot type has no label field or accessor; the training loops
    // only ever see `FewShotDataset::samples()`.
    Ok(format!("{detail}; labels are not part of the few-shot type"))
}

fn c8(desk: Option<&Desk>) -> Result<String> {
    let d = desk.context("needs the desk runs")?;
    ensure!(d.teacher_acc >= 0.70, "teacher accuracy {:.3} below 0.70", d.teacher_acc);
    let gaps: Vec<f64> = d.grafted.iter().zip(&d.baseline).map(|(g, b)| g - b).collect();
    let (mg, mb, gap) = (median(d.grafted.clone()), median(d.baseline.clone()), median(gaps));
    let detail = format!(
        "teacher {:.1}%; grafted [{}] median {:.1}%; baseline [{}] median {:.1}%; median gap {:+.1} pts",
        d.teacher_acc * 100.0,
        pct(&d.grafted),
        mg * 100.0,
        pct(&d.baseline),
        mb * 100.0,
        gap * 100.0
    );
    ensure!(mg >= mb && gap > 0.0, "{detail}");
    Ok(detail)
}

fn c9(desk: Option<&Desk>) -> Result<String> {
    let d = desk.context("needs the desk runs")?;
    let mut whole = Vec::new();
    for s in SEEDS {
        let cfg = toy_config(&d.work, s)?;
        let data = pipeline::load_data(&cfg)?;
        let fs = fewshot::sample_kshot(&data.splits.train, cfg.k, cfg.seeds.data)?;
        let mut ctx = TrainContext::new(&fs, &data.norm);
        ctx.padding = cfg.padding();
        let mut net = netzoo::build_network(&cfg.student.arch_spec(), cfg.seeds.init)?;
        let lr = cfg.baseline.lr.unwrap_or(cfg.stage1.base_lr);
        let epochs = cfg.stage1.epochs_per_unit;
        distill::train_whole(&d.teacher, &mut net, WholeObjective::NormalizedLogits, epochs, lr, cfg.seeds.train, &mut ctx)?;
        whole.push(distill::evaluate(&net, &data.test)?.top1);
    }
    let wins = d.last_block.iter().zip(&whole).filter(|(b, w)| b > w).count();
    let detail = format!("last-block graft [{}] vs whole student [{}]: {wins}/5 wins", pct(&d.last_block), pct(&whole));
    ensure!(wins >= 4, "{detail}");
    Ok(detail)
}

/// Independent parameter enumeration for the toy CNN's block 3 at teacher
/// width `t` and student width `s`: two 3x3 convs with batch norm per block,
/// plus bias-free 1x1 adaptions wherever widths differ.
fn block3_oracle(t: usize, s: usize) -> (usize, usize) {
    let conv_bn = |i: usize, o: usize| 9 * i * o + 2 * o;
    let before = conv_bn(2 * t, 4 * t) + conv_bn(4 * t, 4 * t);
    let core = conv_bn(2 * s, 4 * s) + conv_bn(4 * s, 4 * s);
    let adapt = |i: usize, o: usize| if i == o { 0 } else { i * o };
    (before, core + adapt(2 * t, 2 * s) + adapt(4 * s, 4 * t))
}

fn c10(desk: Option<&Desk>) -> Result<String> {
    let d = desk.context("needs the shared teacher")?;
    let cfg = toy_config(&d.work, 0)?;
    let data = pipeline::load_data(&cfg)?;
    let fs = fewshot::sample_kshot(&data.splits.train, cfg.k, cfg.seeds.data)?;
    let student = netzoo::build_network(&cfg.student.arch_spec(), cfg.seeds.init)?;
    let scion = graft::wrap_student(&student, &d.teacher, cfg.seeds.init)?.swap_remove(2);
    let mut stage = cfg.stage_config(GraftKind::BlockGraft);
    stage.base_lr = 1e-2;
    stage.epochs_per_unit = 200;
    let mut ctx = TrainContext::new(&fs, &data.norm);
    ctx.padding = cfg.padding();
    let (scion, _) = distill::train_block(&d.teacher, scion, &stage, cfg.scion_norm.into(), &mut ctx)?;
    let rep = report::partial_graft_report(&d.teacher, &[scion], &data.test)?;
    let row = &rep.rows[0];
    let (before, after) = block3_oracle(cfg.teacher.width.unwrap_or(16), cfg.student.width.unwrap_or(8));
    let oracle = (before as f64 - after as f64) / before as f64 * 100.0;
    let drop = (rep.teacher_accuracy - row.accuracy) * 100.0;
    let detail = format!(
        "{} (oracle {oracle:.3}%); hybrid {:.1}% vs teacher {:.1}% ({drop:.1} pts below)",
        row.params_cell(),
        row.accuracy * 100.0,
        rep.teacher_accuracy * 100.0
    );
    ensure!(row.reduction_pct == oracle && (row.params_before, row.params_after) == (before, after), "{detail}");
    ensure!(drop <= 5.0, "{detail}");
    Ok(detail)
}

type Criterion = fn(Option<&Desk>) -> Result<String>;

const CRITERIA: [(&str, Criterion); 10] = [
    ("fold exactness", c1),
    ("finalization equivalence", c2),
    ("identity-graft transparency", c3),
    ("loss properties", c4),
    ("freezing and masking", c5),
    ("hyperparameter rules", c6),
    ("sampler contract", c7),
    ("desk-scale grafting vs baseline", c8),
    ("last-block graft vs whole student", c9),
    ("partial-graft report", c10),
];

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let start = Instant::now();
    let desk = Desk::run(work.path());
    let desk_secs = start.elapsed().as_secs_f64();
    if let Err(e) = &desk {
        println!("desk-scale training failed: {e:#}");
    } else {
        println!("desk-scale training: {desk_secs:.0}s");
    }
    let mut failed = 0;
    for (i, (name, f)) in CRITERIA.iter().enumerate() {
        let t = Instant::now();
        let outcome = f(desk.as_ref().ok());
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(e) => {
                failed += 1;
                ("FAIL", format!("{e:#}"))
            }
        };
        println!("criterion {:>2} {tag} {name} ({secs:.1}s): {detail}", i + 1);
    }
    println!("{} of {} criteria passed", CRITERIA.len() - failed, CRITERIA.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
