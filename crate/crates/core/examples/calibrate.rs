//! Teacher training plus one grafting-vs-baseline comparison on the
//! synthetic source, printing accuracies and timings.
//!
//! Usage: `cargo run --release --example calibrate -- [teacher_epochs] [e1] [e2] [seeds] [lr1] [lr2] [lr_whole]`

use std::sync::Arc;
use std::time::Instant;

use scion_core::distill::*;
use scion_core::fewshot::*;
use scion_core::graft::*;
use scion_core::netzoo::*;
use scion_core::nn::NormMode;

fn arg<T: std::str::FromStr>(i: usize, d: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(d)
}

fn main() {
    let te: usize = arg(1, 30);
    let e1: usize = arg(2, 100);
    let e2: usize = arg(3, 50);
    let seeds: u64 = arg(4, 1);
    let lr1: f64 = arg(5, 2.5e-3);
    let lr2: f64 = arg(6, 1e-3);
    let lrw: f64 = arg(7, 2.5e-3);
    let tw: usize = arg(8, 16);
    let sw: usize = arg(9, 8);
    let splits = load_source("synthetic:shapes?train=500&test=200&res=16&seed=0").unwrap();
    let norm = Normalization::symmetric(3);
    let test = TestSet::new(&splits.test, &norm, 250);
    let tspec = ArchSpec::new(TOY_CNN, 10).with_width(tw).with_resolution(16, 16);
    let sspec = ArchSpec::new(TOY_CNN, 10).with_width(sw).with_resolution(16, 16);
    let mut teacher = build_network(&tspec, 0).unwrap();
    let t0 = Instant::now();
    let cfg = SupervisedConfig { epochs: te, eval_every: 5, ..Default::default() };
    train_supervised(&mut teacher, &splits.train, &cfg, &norm, 0, Some(&test), None).unwrap();
    let tacc = evaluate(&teacher, &test).unwrap().top1;
    println!("teacher acc {tacc:.4} in {:.1}s, params {}", t0.elapsed().as_secs_f64(), count_params(&teacher));
    let teacher = Arc::new(teacher);
    for s in 0..seeds {
        let data = sample_kshot(&splits.train, 10, s).unwrap();
        let student = build_network(&sspec, s).unwrap();
        let scions = wrap_student(&student, &teacher, s).unwrap();
        let mut c1 = StageConfig::block_default();
        c1.epochs_per_unit = e1;
        c1.base_lr = lr1;
        c1.seed = s;
        let mut c2 = StageConfig::net_default();
        c2.epochs_per_unit = e2;
        c2.base_lr = lr2;
        c2.seed = s;
        let t1 = Instant::now();
        let mut ctx = TrainContext::new(&data, &norm);
        let (scions, _) = train_stage1(&teacher, scions, &c1, NormMode::BatchStats, &mut ctx).unwrap();
        let mut s1 = Vec::new();
        for sc in &scions {
            let m = graft_block(teacher.clone(), sc.clone()).unwrap();
            s1.push(evaluate(&m, &test).unwrap().top1);
        }
        let (scions, _) = train_stage2(&teacher, scions, &c2, NormMode::BatchStats, &mut ctx).unwrap();
        let final_student = finalize_student(&scions, &sspec).unwrap();
        let gacc = evaluate(&final_student, &test).unwrap().top1;
        let gt = t1.elapsed().as_secs_f64();
        let t2 = Instant::now();
        let mut whole = build_network(&sspec, s).unwrap();
        let budget = 4 * e1 + 3 * e2;
        train_whole(&teacher, &mut whole, WholeObjective::NormalizedLogits, budget, lrw, s, &mut ctx).unwrap();
        let wacc = evaluate(&whole, &test).unwrap().top1;
        let mut whole_b = build_network(&sspec, s).unwrap();
        train_whole(&teacher, &mut whole_b, WholeObjective::NormalizedLogits, 4 * e1 / 4 , lrw, s, &mut ctx).unwrap();
        let wacc_b = evaluate(&whole_b, &test).unwrap().top1;
        println!(
            "seed {s}: stage1 per-block {:?} | graft {gacc:.4} ({gt:.1}s) | whole {wacc:.4} ({:.1}s) | whole@e1 {wacc_b:.4}",
            s1.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>(),
            t2.elapsed().as_secs_f64()
        );
    }
}
