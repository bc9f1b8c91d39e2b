//! Central finite-difference checks of every layer's backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scion_nn::layer::BatchNorm;
use scion_nn::{Conv2d, Layer, Linear, NormMode, Residual, Scalar, Sequential, Shape, Tensor};

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Scalar probe `sum(y * r)` evaluated in f64.
fn probe(net: &Sequential, x: &Tensor, r: &Tensor, mode: NormMode) -> f64 {
    let (y, _) = net.forward_record(x, mode);
    y.data().iter().zip(r.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
}

fn test_net(rng: &mut ChaCha8Rng) -> Sequential {
    let mut bn = BatchNorm::new(4);
    bn.gamma.value = vec![1.2, 0.7, -0.5, 1.0];
    bn.beta.value = vec![0.1, -0.2, 0.0, 0.3];
    bn.running_mean = vec![0.05, -0.1, 0.2, 0.0];
    bn.running_var = vec![0.8, 1.3, 0.6, 1.1];
    let residual = Residual {
        main: Sequential::new(vec![
            Layer::Conv2d(Conv2d::new(4, 6, 3, 2, 1, false, rng)),
            Layer::Relu,
            Layer::Conv2d(Conv2d::new(6, 6, 3, 1, 1, true, rng)),
        ]),
        shortcut: Some(Sequential::new(vec![Layer::Conv2d(Conv2d::new(4, 6, 1, 2, 0, false, rng))])),
        relu: true,
    };
    Sequential::new(vec![
        Layer::Conv2d(Conv2d::new(3, 4, 3, 1, 1, true, rng)),
        Layer::BatchNorm(bn),
        Layer::Relu,
        Layer::MaxPool2d { kernel: 2, stride: 2 },
        Layer::Residual(Box::new(residual)),
        Layer::GlobalAvgPool,
        Layer::Flatten,
        Layer::Linear(Linear::new(6, 5, true, rng)),
    ])
}

fn check(mode: NormMode) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut net = test_net(&mut rng);
    let x = random_tensor(&mut rng, Shape::new(3, 3, 8, 8));
    let out = net.output_shape(x.shape()).unwrap();
    let r = random_tensor(&mut rng, out);

    let (_, cache) = net.forward_record(&x, mode);
    net.zero_grad();
    let dx = net.backward(&cache, &r, true).unwrap();
    assert_eq!(dx, net.backward_input(&cache, &r), "backward_input disagrees with backward");

    let h: f64 = if cfg!(feature = "f64") { 1e-6 } else { 1e-2 };
    // f32 differences straddle ReLU/max-pool kinks at this step size; the
    // f64 build is the tight check.
    let tol: f64 = if cfg!(feature = "f64") { 1e-6 } else { 1e-1 };
    let mut worst: f64 = 0.0;

    for i in (0..x.len()).step_by(7) {
        let mut xp = x.clone();
        xp.data_mut()[i] += h as Scalar;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h as Scalar;
        let fd = (probe(&net, &xp, &r, mode) - probe(&net, &xm, &r, mode)) / (2.0 * h);
        let an = dx.data()[i] as f64;
        worst = worst.max((fd - an).abs() / (1.0 + an.abs()));
    }

    let mut grads = Vec::new();
    net.visit_params("", &mut |name, p| grads.push((name.to_owned(), p.grad.clone())));
    for (name, grad) in grads {
        for j in (0..grad.len()).step_by(5) {
            let fd = {
                let eval = |delta: f64| {
                    let mut probe_net = net.clone();
                    probe_net.visit_params_mut("", &mut |n, p| {
                        if n == name {
                            p.value[j] += delta as Scalar;
                        }
                    });
                    probe(&probe_net, &x, &r, mode)
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            };
            let an = grad[j] as f64;
            let err = (fd - an).abs() / (1.0 + an.abs());
            assert!(err < tol, "{name}[{j}]: analytic {an} vs fd {fd}");
            worst = worst.max(err);
        }
    }
    assert!(worst < tol, "worst relative error {worst}");
}

#[test]
fn gradients_with_batch_statistics() {
    check(NormMode::BatchStats);
}

#[test]
fn gradients_with_running_statistics() {
    check(NormMode::RunningStats);
}

#[test]
fn frozen_backward_leaves_gradients_empty() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = test_net(&mut rng);
    let x = random_tensor(&mut rng, Shape::new(2, 3, 8, 8));
    let (y, cache) = net.forward_record(&x, NormMode::RunningStats);
    let _ = net.backward_input(&cache, &y);
    net.visit_params("", &mut |name, p| {
        assert!(p.grad.iter().all(|&g| g == 0.0), "{name} received a gradient");
    });
}

#[test]
fn running_stat_record_matches_inference_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = test_net(&mut rng);
    let x = random_tensor(&mut rng, Shape::new(4, 3, 8, 8));
    let (y, _) = net.forward_record(&x, NormMode::RunningStats);
    assert!(y.bit_eq(&net.forward(&x)));
}
