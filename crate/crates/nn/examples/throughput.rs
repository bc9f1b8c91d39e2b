//! Training-step throughput for a small 4-stage CNN.
//!
//! `cargo run --release -p scion-nn --example throughput -- <resolution> <width>`

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scion_nn::layer::BatchNorm;
use scion_nn::{Conv2d, Layer, Linear, NormMode, Sequential, Shape, Tensor};

fn stage(layers: &mut Vec<Layer>, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) {
    layers.push(Layer::Conv2d(Conv2d::new(cin, cout, 3, stride, 1, false, rng)));
    layers.push(Layer::BatchNorm(BatchNorm::new(cout)));
    layers.push(Layer::Relu);
    layers.push(Layer::Conv2d(Conv2d::new(cout, cout, 3, 1, 1, false, rng)));
    layers.push(Layer::BatchNorm(BatchNorm::new(cout)));
    layers.push(Layer::Relu);
}

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let res = args.first().copied().unwrap_or(16);
    let width = args.get(1).copied().unwrap_or(8);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut layers = Vec::new();
    stage(&mut layers, 3, width, 1, &mut rng);
    stage(&mut layers, width, 2 * width, 2, &mut rng);
    stage(&mut layers, 2 * width, 4 * width, 2, &mut rng);
    stage(&mut layers, 4 * width, 8 * width, 2, &mut rng);
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Flatten);
    layers.push(Layer::Linear(Linear::new(8 * width, 10, true, &mut rng)));
    let mut net = Sequential::new(layers);
    let batch = 64;
    let x = Tensor::full(Shape::new(batch, 3, res, res), 0.5);
    let iters = 20;
    let t = Instant::now();
    for _ in 0..iters {
        let (y, cache) = net.forward_train(&x, NormMode::BatchStats);
        net.backward(&cache, &y, false);
    }
    let train = t.elapsed().as_secs_f64() / (iters * batch) as f64;
    let t = Instant::now();
    for _ in 0..iters {
        let _ = net.forward(&x);
    }
    let infer = t.elapsed().as_secs_f64() / (iters * batch) as f64;
    println!(
        "res {res} width {width}: params {} | train {:.3} ms/sample | forward {:.3} ms/sample",
        net.num_params(),
        train * 1e3,
        infer * 1e3
    );
}
