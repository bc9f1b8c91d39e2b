use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use scion_cli::checkpoint::{self, CheckpointKind};
use scion_cli::pipeline::{self, Session, Step};
use scion_cli::{plot, report, verify, ExperimentConfig};
use scion_core::distill;
use scion_core::graft;

#[derive(Parser)]
#[command(name = "scion", version, about = "Few-shot network grafting experiments")]
struct Cli {
    /// Compute device; only `cpu` is available in this build.
    #[arg(long, env = "SCION_DEVICE", default_value = "cpu", global = true)]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed_data: Option<u64>,
    #[arg(long)]
    seed_init: Option<u64>,
    #[arg(long)]
    seed_train: Option<u64>,
    /// Samples per class.
    #[arg(long)]
    k: Option<usize>,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue an existing run from its last unit checkpoint.
    #[arg(long)]
    resume: bool,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_path(&self.config)?;
        if let Some(s) = self.seed_data {
            cfg.seeds.data = s;
        }
        if let Some(s) = self.seed_init {
            cfg.seeds.init = s;
        }
        if let Some(s) = self.seed_train {
            cfg.seeds.train = s;
        }
        if let Some(k) = self.k {
            if k == 0 {
                bail!("--k must be at least 1");
            }
            cfg.k = k;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher on the full labeled source and checkpoint it.
    TrainTeacher(RunArgs),
    /// Full pipeline: teacher, stage 1, stage 2, merge, baseline.
    Run(RunArgs),
    /// Block grafting of every block (continues an existing run).
    Stage1(RunArgs),
    /// Progressive grafting up to the full depth (continues an existing run).
    Stage2(RunArgs),
    /// Merge the trained scions into the standalone student.
    Finalize(RunArgs),
    /// Test accuracy of a network or scion checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Report a teacher with one block replaced by its stage-1 scion.
    PartialGraft {
        #[command(flatten)]
        run: RunArgs,
        /// Block indices (1-based); all blocks by default.
        #[arg(long, value_delimiter = ',')]
        block: Vec<usize>,
    },
    /// Training curves per run, plus accuracy vs K when given several runs.
    Plot {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Directory for the summary plot.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run the randomized property checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn staged(args: &RunArgs, until: Step, resume: bool) -> Result<()> {
    let m = pipeline::run_pipeline(args.load()?, resume, until)?;
    for (k, v) in &m.metrics {
        println!("{k} = {v}");
    }
    Ok(())
}

fn eval(args: &RunArgs, ckpt: &PathBuf) -> Result<()> {
    let cfg = args.load()?;
    let data = pipeline::load_data(&cfg)?;
    let m = checkpoint::read_manifest(ckpt)?;
    let acc = match m.kind {
        CheckpointKind::Network => distill::evaluate(&checkpoint::load_network(ckpt)?.0, &data.test)?,
        CheckpointKind::Scions => {
            let (teacher, _) = checkpoint::load_network(&pipeline::teacher_dir(&cfg)).context("loading the teacher")?;
            let teacher = Arc::new(teacher);
            let scions = checkpoint::load_scions(ckpt, &teacher)?;
            let model = if scions.len() == 1 {
                graft::graft_block(teacher, scions.into_iter().next().expect("one"))?
            } else {
                let depth = m.unit.unwrap_or(scions.len());
                graft::graft_prefix(teacher, scions.into_iter().take(depth).collect())?
            };
            distill::evaluate(&model, &data.test)?
        }
    };
    println!("top1 = {:.4}", acc.top1);
    if let Some(t5) = acc.top5 {
        println!("top5 = {t5:.4}");
    }
    Ok(())
}

fn partial_graft(args: &RunArgs, blocks: &[usize]) -> Result<()> {
    let cfg = args.load()?;
    let mut session = Session::open(cfg, true)?;
    let teacher = session.teacher()?;
    let all: Vec<usize> = (1..=teacher.num_blocks()).collect();
    let blocks = if blocks.is_empty() { &all[..] } else { blocks };
    let mut scions = Vec::new();
    for &l in blocks {
        let dir = pipeline::stage1_dir(&session.dir, l);
        if !checkpoint::exists(&dir) {
            bail!("no stage-1 scion for block {l} at {}; run `scion stage1` first", dir.display());
        }
        scions.extend(checkpoint::load_scions(&dir, &teacher)?);
    }
    let rep = report::partial_graft_report(&teacher, &scions, &session.data()?.test)?;
    print!("{rep}");
    std::fs::write(session.dir.join("partial_graft.md"), rep.to_string())?;
    std::fs::write(session.dir.join("partial_graft.json"), serde_json::to_string_pretty(&rep)? + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if cli.device != "cpu" {
        bail!("device `{}` is not available; this build runs on cpu only", cli.device);
    }
    match &cli.command {
        Command::TrainTeacher(a) => staged(a, Step::Teacher, true)?,
        Command::Run(a) => staged(a, Step::Baseline, a.resume)?,
        Command::Stage1(a) => staged(a, Step::Stage1, true)?,
        Command::Stage2(a) => staged(a, Step::Stage2, true)?,
        Command::Finalize(a) => staged(a, Step::Finalize, true)?,
        Command::Eval { run, checkpoint } => eval(run, checkpoint)?,
        Command::PartialGraft { run, block } => partial_graft(run, block)?,
        Command::Plot { runs, out } => {
            for p in plot::emit_plots(runs, out)? {
                println!("{}", p.display());
            }
        }
        Command::Verify { seed } => {
            let checks = verify::run_all(*seed);
            for c in &checks {
                let tag = if c.passed { "PASS" } else { "FAIL" };
                println!("{tag} {:<26} {} ({:.1}s)", c.name, c.detail, c.seconds);
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
