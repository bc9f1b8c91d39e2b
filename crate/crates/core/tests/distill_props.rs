//! Loss properties against an f64 reference, and freezing and determinism of
//! the stage loops.

use std::sync::Arc;

use proptest::prelude::*;
use scion_core::distill::{
    graft_loss, graft_loss_grad, kd_baseline_loss_grad, train_block, train_depth, StageConfig, TrainContext,
};
use scion_core::fewshot::{sample_kshot, synthetic_shapes, Normalization, ShapesConfig};
use scion_core::graft::{wrap_student, GraftKind, WrappedScion};
use scion_core::netzoo::{build_network, ArchSpec, TOY_CNN};
use scion_core::nn::{NormMode, Shape, Tensor};
use scion_core::Scalar;

/// Reference loss for one row pair, straight from the definition.
fn reference_loss(zg: &[f64], zt: &[f64]) -> f64 {
    let n = zg.len() as f64;
    let (ng, nt) = (zg.iter().map(|v| v * v).sum::<f64>().sqrt(), zt.iter().map(|v| v * v).sum::<f64>().sqrt());
    zg.iter().zip(zt).map(|(a, b)| (a / ng - b / nt).powi(2)).sum::<f64>() / n
}

fn row(v: &[f64]) -> Tensor {
    Tensor::from_vec(Shape::new(1, v.len(), 1, 1), v.iter().map(|&x| x as Scalar).collect())
}

fn logits(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, d).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-2)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn loss_is_scale_invariant(a in logits(10), b in logits(10), alpha in 0.01f64..100.0, beta in 0.01f64..100.0) {
        let base = graft_loss(&row(&a), &row(&b), 10).unwrap();
        let scaled: Vec<f64> = a.iter().map(|x| x * alpha).collect();
        let other: Vec<f64> = b.iter().map(|x| x * beta).collect();
        let l = graft_loss(&row(&scaled), &row(&other), 10).unwrap();
        prop_assert!((l - base).abs() <= 1e-6 * base.max(1e-3));
    }

    #[test]
    fn loss_is_bounded_and_matches_reference(a in logits(7), b in logits(7)) {
        let l = graft_loss(&row(&a), &row(&b), 7).unwrap();
        let a32: Vec<f64> = a.iter().map(|&x| x as Scalar as f64).collect();
        let b32: Vec<f64> = b.iter().map(|&x| x as Scalar as f64).collect();
        prop_assert!((0.0..=4.0 / 7.0 + 1e-12).contains(&l));
        prop_assert!((l - reference_loss(&a32, &b32)).abs() <= 1e-9);
    }

    #[test]
    fn gradient_matches_central_differences(a in logits(6), b in logits(6)) {
        let a32: Vec<f64> = a.iter().map(|&x| x as Scalar as f64).collect();
        let b32: Vec<f64> = b.iter().map(|&x| x as Scalar as f64).collect();
        let (_, g) = graft_loss_grad(&row(&a32), &row(&b32), 6).unwrap();
        let h = 1e-5;
        for j in 0..6 {
            let (mut up, mut down) = (a32.clone(), a32.clone());
            up[j] += h;
            down[j] -= h;
            let fd = (reference_loss(&up, &b32) - reference_loss(&down, &b32)) / (2.0 * h);
            let an = g.data()[j] as f64;
            prop_assert!((an - fd).abs() <= 1e-3 * fd.abs().max(1e-3), "j={} analytic {} fd {}", j, an, fd);
        }
    }
}

#[test]
fn extreme_cases_hit_the_bounds() {
    let e = |i: usize| {
        let mut v = vec![0.0; 10];
        v[i] = 3.0;
        v
    };
    let neg: Vec<f64> = e(4).iter().map(|x| -x).collect();
    assert_eq!(graft_loss(&row(&e(4)), &row(&e(4)), 10).unwrap(), 0.0);
    assert!((graft_loss(&row(&e(4)), &row(&neg), 10).unwrap() - 0.4).abs() <= 1e-6);
    assert!((graft_loss(&row(&e(4)), &row(&e(5)), 10).unwrap() - 0.2).abs() <= 1e-6);
    assert!(graft_loss(&row(&[0.0; 10]), &row(&e(1)), 10).is_err());
}

#[test]
fn kd_gradient_vanishes_at_agreement() {
    let z = row(&[1.0, -2.0, 0.5, 3.0]);
    let (loss, g) = kd_baseline_loss_grad(&z, &z, 4.0).unwrap();
    assert!(g.data().iter().all(|v| v.abs() < 1e-7));
    // Cross entropy against itself is the entropy of the softened teacher.
    let p: Vec<f64> = {
        let e: Vec<f64> = [1.0f64, -2.0, 0.5, 3.0].iter().map(|v| (v / 4.0).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    };
    let entropy: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>();
    assert!((loss - 16.0 * entropy).abs() < 1e-4);
}

fn bits(s: &WrappedScion) -> Vec<u64> {
    let mut out = Vec::new();
    s.visit_state("", &mut |_, e| out.extend(e.values.iter().map(|v| v.to_bits() as u64)));
    out
}

#[test]
fn stages_freeze_what_they_must_and_repeat_exactly() {
    let splits = synthetic_shapes(&ShapesConfig { train_per_class: 4, test_per_class: 1, resolution: 8, seed: 0 });
    let data = sample_kshot(&splits.train, 2, 5).unwrap();
    let norm = Normalization::symmetric(3);
    let teacher = Arc::new(build_network(&ArchSpec::new(TOY_CNN, 10).with_width(4).with_resolution(8, 8), 1).unwrap());
    let student = build_network(&ArchSpec::new(TOY_CNN, 10).with_width(2).with_resolution(8, 8), 2).unwrap();
    let scions = wrap_student(&student, &teacher, 3).unwrap();
    let before = teacher.state_snapshot();

    let mut cfg1 = StageConfig::new(GraftKind::BlockGraft, 3, 1e-2);
    cfg1.seed = 9;
    let run = |s: WrappedScion| {
        let mut ctx = TrainContext::new(&data, &norm);
        train_block(&teacher, s, &cfg1, NormMode::BatchStats, &mut ctx).unwrap()
    };
    let (a, ra) = run(scions[1].clone());
    let (b, rb) = run(scions[1].clone());
    assert_eq!(bits(&a), bits(&b));
    assert!(ra.iter().zip(&rb).all(|(x, y)| x.same_outcome(y)));
    assert_ne!(bits(&a), bits(&scions[1]));
    assert_eq!(teacher.state_snapshot(), before);

    let mut cfg2 = StageConfig::new(GraftKind::NetGraft, 2, 1e-2);
    cfg2.seed = 9;
    let mut ctx = TrainContext::new(&data, &norm);
    let (after, _) = train_depth(&teacher, scions.clone(), 2, &cfg2, NormMode::BatchStats, &mut ctx).unwrap();
    assert_eq!(teacher.state_snapshot(), before);
    for (old, new) in scions.iter().zip(&after) {
        if new.index > 2 {
            assert_eq!(bits(old), bits(new), "scion {} moved", new.index);
        } else {
            assert_ne!(bits(old), bits(new), "scion {} did not train", new.index);
        }
    }
}
