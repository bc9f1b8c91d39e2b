//! Randomized property checks behind `scion verify`.
//!
//! Each check is fast (seconds) and prints one line. The integration tests
//! cover the same ground with their own oracles; this is the field-facing
//! smoke test for a given build and seed.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use scion_core::distill::{self, graft_loss, graft_loss_grad};
use scion_core::fewshot::{self, ShapesConfig};
use scion_core::graft::{self, Matrix, WrappedScion};
use scion_core::netzoo::{self, count_params, ArchSpec, BlockwiseNetwork, TOY_CNN, TOY_RESNET};
use scion_core::nn::{Shape, Tensor};
use scion_core::{seed, Scalar};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Outcome = Result<String, String>;

fn random_tensor(rng: &mut impl Rng, shape: Shape) -> Tensor {
    let data = (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0) as Scalar).collect();
    Tensor::from_vec(shape, data)
}

/// Moves batch-norm statistics and affine terms away from their defaults so
/// folds and merges are exercised on non-trivial values.
fn perturb(net: &mut BlockwiseNetwork, rng: &mut impl Rng) {
    net.visit_state_mut("", &mut |name, _, values| {
        for v in values.iter_mut() {
            if name.ends_with("running_var") {
                *v = rng.random_range(0.5..2.0);
            } else if name.ends_with("running_mean") {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    });
}

fn toy(arch: &str, width: usize, res: usize) -> ArchSpec {
    ArchSpec::new(arch, 10).with_width(width).with_resolution(res, res)
}

fn fold_exactness(s: u64) -> Outcome {
    let mut rng = seed::rng(s, &[1]);
    let mut worst: Scalar = 0.0;
    for trial in 0..20u64 {
        let arch = if trial % 2 == 0 { TOY_CNN } else { TOY_RESNET };
        let mut net = netzoo::build_network(&toy(arch, rng.random_range(2..6), 8), s + trial).map_err(|e| e.to_string())?;
        perturb(&mut net, &mut rng);
        let l = rng.random_range(2..=net.num_blocks());
        let block = net.block(l);
        let c = block.signature.in_channels;
        let scale = 1.0 / (c as f64).sqrt();
        let m = Matrix::new(c, c, (0..c * c).map(|_| (rng.random_range(-1.0..1.0) * scale) as Scalar).collect());
        let folded = graft::fold_into_conv(block, &m).map_err(|e| e.to_string())?;
        let x = random_tensor(&mut rng, block.signature.input_shape(50));
        let diff = folded.forward(&x).max_abs_diff(&block.forward(&m.apply_channels(&x)));
        worst = worst.max(diff);
    }
    let detail = format!("20 blocks x 50 inputs, max |diff| {worst:.2e}");
    if worst <= 1e-4 { Ok(detail) } else { Err(detail) }
}

fn finalize_equivalence(s: u64) -> Outcome {
    let mut rng = seed::rng(s, &[2]);
    let mut worst: Scalar = 0.0;
    for trial in 0..5u64 {
        let arch = if trial % 2 == 0 { TOY_CNN } else { TOY_RESNET };
        let tspec = toy(arch, 6, 8);
        let sspec = toy(arch, rng.random_range(2..5), 8);
        let mut teacher = netzoo::build_network(&tspec, s + trial).map_err(|e| e.to_string())?;
        perturb(&mut teacher, &mut rng);
        let mut student = netzoo::build_network(&sspec, s + 100 + trial).map_err(|e| e.to_string())?;
        perturb(&mut student, &mut rng);
        let scions = graft::wrap_student(&student, &teacher, s + 200 + trial).map_err(|e| e.to_string())?;
        let merged = graft::finalize_student(&scions, &sspec).map_err(|e| e.to_string())?;
        if count_params(&merged) != count_params(&netzoo::build_network(&sspec, 0).map_err(|e| e.to_string())?) {
            return Err(format!("trial {trial}: merged parameter count differs from the bare student"));
        }
        let grafted = graft::graft_prefix(Arc::new(teacher), scions).map_err(|e| e.to_string())?;
        let x = random_tensor(&mut rng, Shape::new(100, 3, 8, 8));
        worst = worst.max(merged.forward(&x).max_abs_diff(&grafted.forward(&x)));
    }
    let detail = format!("5 scion sets x 100 inputs, max |diff| {worst:.2e}");
    if worst <= 1e-4 { Ok(detail) } else { Err(detail) }
}

fn identity_transparency(s: u64) -> Outcome {
    let mut rng = seed::rng(s, &[3]);
    let spec = toy(TOY_RESNET, 4, 8);
    let mut teacher = netzoo::build_network(&spec, s).map_err(|e| e.to_string())?;
    perturb(&mut teacher, &mut rng);
    let teacher = Arc::new(teacher);
    let x = random_tensor(&mut rng, Shape::new(16, 3, 8, 8));
    let want = teacher.forward(&x);
    let blocks = teacher.num_blocks();
    let scions: Vec<WrappedScion> = (1..=blocks)
        .map(|l| WrappedScion::identity_copy(&teacher, l))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    for s in &scions {
        let m = graft::graft_block(Arc::clone(&teacher), s.clone()).map_err(|e| e.to_string())?;
        if !m.forward(&x).bit_eq(&want) {
            return Err(format!("block graft {} differs", s.index));
        }
    }
    for d in 1..=blocks {
        let m = graft::graft_prefix(Arc::clone(&teacher), scions[..d].to_vec()).map_err(|e| e.to_string())?;
        if !m.forward(&x).bit_eq(&want) {
            return Err(format!("depth {d} differs"));
        }
    }
    let student = graft::finalize_student(&scions, &spec).map_err(|e| e.to_string())?;
    if !student.forward(&x).bit_eq(&want) {
        return Err("finalized student differs".into());
    }
    Ok(format!("{blocks} block grafts, {blocks} depths and the merged student are bitwise equal"))
}

fn loss_properties(s: u64) -> Outcome {
    let mut rng = seed::rng(s, &[4]);
    let n = 10;
    let row = |rng: &mut _| random_tensor(rng, Shape::new(1, n, 1, 1));
    let mut worst_rel: f64 = 0.0;
    for _ in 0..100 {
        let (a, b) = (row(&mut rng), row(&mut rng));
        let (alpha, beta) = (rng.random_range(0.1..10.0) as Scalar, rng.random_range(0.1..10.0) as Scalar);
        let l0 = graft_loss(&a, &b, n).map_err(|e| e.to_string())?;
        let l1 = graft_loss(&a.map(|v| v * alpha), &b.map(|v| v * beta), n).map_err(|e| e.to_string())?;
        worst_rel = worst_rel.max((l0 - l1).abs() / l0.max(1e-12));
    }
    if worst_rel > 1e-5 {
        return Err(format!("scale invariance off by {worst_rel:.2e}"));
    }
    let e = |i: usize| {
        let mut v = vec![0.0 as Scalar; n];
        v[i] = 1.0;
        Tensor::from_vec(Shape::new(1, n, 1, 1), v)
    };
    let bound = 4.0 / n as f64;
    let eq = graft_loss(&e(0), &e(0), n).map_err(|e| e.to_string())?;
    let anti = graft_loss(&e(0), &e(0).map(|v| -v), n).map_err(|e| e.to_string())?;
    let ortho = graft_loss(&e(0), &e(1), n).map_err(|e| e.to_string())?;
    if eq != 0.0 || (anti - bound).abs() > 1e-6 || (ortho - bound / 2.0).abs() > 1e-6 {
        return Err(format!("bounds: equal {eq}, antipodal {anti}, orthonormal {ortho}"));
    }
    let (_, g) = graft_loss_grad(&e(2), &e(2), n).map_err(|e| e.to_string())?;
    if g.data().iter().any(|&v| v != 0.0) {
        return Err("gradient at equal rows is not exactly zero".into());
    }
    Ok(format!("scale invariance within {worst_rel:.1e}, bounds [0, {bound}] attained"))
}

fn hyperparameter_rules(_: u64) -> Outcome {
    let sizes: Vec<usize> = [1, 5, 10].iter().map(|&k| fewshot::batch_size_for(k)).collect();
    let lrs = (distill::scale_lr(2.5e-4, 64), distill::scale_lr(1e-4, 32));
    if sizes != [6, 32, 64] || lrs != (2.5e-4, 5e-5) {
        return Err(format!("batch sizes {sizes:?}, lrs {lrs:?}"));
    }
    Ok("K {1,5,10} -> batch {6,32,64}; lr scaling exact".into())
}

fn sampler_contract(s: u64) -> Outcome {
    let splits = fewshot::synthetic_shapes(&ShapesConfig { train_per_class: 12, test_per_class: 1, resolution: 8, seed: s });
    for k in [1, 5, 10] {
        let a = fewshot::sample_kshot(&splits.train, k, s).map_err(|e| e.to_string())?;
        let b = fewshot::sample_kshot(&splits.train, k, s).map_err(|e| e.to_string())?;
        if a.samples() != b.samples() {
            return Err(format!("K={k}: not deterministic"));
        }
        let mut per_class = vec![0usize; splits.train.num_classes];
        for img in a.samples() {
            let i = splits.train.images.iter().position(|x| x == img).ok_or("sample not from source")?;
            per_class[splits.train.labels[i]] += 1;
        }
        if per_class.iter().any(|&c| c != k) {
            return Err(format!("K={k}: per-class counts {per_class:?}"));
        }
    }
    Ok("exactly K per class for K in {1,5,10}, deterministic".into())
}

pub const CHECKS: [(&str, fn(u64) -> Outcome); 6] = [
    ("fold exactness", fold_exactness),
    ("finalization equivalence", finalize_equivalence),
    ("identity transparency", identity_transparency),
    ("loss properties", loss_properties),
    ("hyperparameter rules", hyperparameter_rules),
    ("sampler contract", sampler_contract),
];

pub fn run_all(seed: u64) -> Vec<Check> {
    CHECKS
        .iter()
        .map(|&(name, f)| {
            let start = Instant::now();
            let (passed, detail) = match f(seed) {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            Check { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
        })
        .collect()
}
