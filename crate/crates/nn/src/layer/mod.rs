//! Layer variants and their forward/backward dispatch.

mod conv;
mod linear;
mod norm;
mod pool;

pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{BatchNorm, BatchNormCache};

use crate::param::StateEntry;
use crate::sequential::{Sequential, SequentialCache};
use crate::{Param, Result, Scalar, Shape, Tensor};

/// How normalization layers pick their statistics in a recording forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormMode {
    /// Training behaviour: normalize with batch statistics and update running ones.
    BatchStats,
    /// Inference behaviour: normalize with stored running statistics.
    RunningStats,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Linear(Linear),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool2d { kernel: usize, stride: usize },
    GlobalAvgPool,
    /// `[n, c, h, w] -> [n, c*h*w, 1, 1]`.
    Flatten,
    Residual(Box<Residual>),
}

/// `relu?(main(x) + shortcut(x))`, with an identity shortcut when `shortcut` is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub main: Sequential,
    pub shortcut: Option<Sequential>,
    pub relu: bool,
}

#[derive(Debug, Clone)]
pub enum LayerCache {
    Input(Tensor),
    BatchNorm(BatchNormCache),
    Relu(Tensor),
    MaxPool { arg: Vec<u32>, input: Shape },
    Shape(Shape),
    Residual(Box<ResidualCache>),
}

#[derive(Debug, Clone)]
pub struct ResidualCache {
    main: SequentialCache,
    shortcut: Option<SequentialCache>,
    out: Tensor,
}

fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

fn relu_backward(out: &Tensor, grad: &Tensor) -> Tensor {
    let data = out
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(grad.shape(), data)
}

fn wrong_cache(layer: &str) -> ! {
    panic!("backward for {layer} received a cache from a different layer")
}

impl Layer {
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match self {
            Layer::Conv2d(c) => c.output_shape(input),
            Layer::Linear(l) => l.output_shape(input),
            Layer::BatchNorm(b) => b.output_shape(input),
            Layer::Relu => Ok(input),
            Layer::MaxPool2d { kernel, stride } => pool::max_pool_shape(input, *kernel, *stride),
            Layer::GlobalAvgPool => Ok(Shape::new(input.n, input.c, 1, 1)),
            Layer::Flatten => Ok(Shape::new(input.n, input.sample_len(), 1, 1)),
            Layer::Residual(r) => {
                let main = r.main.output_shape(input)?;
                let side = match &r.shortcut {
                    Some(s) => s.output_shape(input)?,
                    None => input,
                };
                if main != side {
                    return Err(crate::NnError::Shape {
                        expected: format!("shortcut output {main}"),
                        got: side.to_string(),
                    });
                }
                Ok(main)
            }
        }
    }

    /// Trainable scalar count (normalization running statistics excluded).
    pub fn num_params(&self) -> usize {
        match self {
            Layer::Conv2d(c) => c.num_params(),
            Layer::Linear(l) => l.num_params(),
            Layer::BatchNorm(b) => b.num_params(),
            Layer::Residual(r) => {
                r.main.num_params() + r.shortcut.as_ref().map_or(0, Sequential::num_params)
            }
            _ => 0,
        }
    }

    /// Inference forward (running statistics, nothing recorded).
    pub fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Conv2d(c) => c.forward(x),
            Layer::Linear(l) => l.forward(x),
            Layer::BatchNorm(b) => b.forward(x),
            Layer::Relu => relu(x),
            Layer::MaxPool2d { kernel, stride } => pool::max_pool(x, *kernel, *stride).0,
            Layer::GlobalAvgPool => pool::global_avg_pool(x),
            Layer::Flatten => {
                let s = x.shape();
                x.clone().reshape(Shape::new(s.n, s.sample_len(), 1, 1))
            }
            Layer::Residual(r) => {
                let mut y = r.main.forward(x);
                match &r.shortcut {
                    Some(s) => y.add_assign(&s.forward(x)),
                    None => y.add_assign(x),
                }
                if r.relu {
                    relu(&y)
                } else {
                    y
                }
            }
        }
    }

    /// Forward that records what backward needs. Running statistics are not
    /// touched here; see [`Layer::commit_stats`].
    pub fn forward_record(&self, x: &Tensor, mode: NormMode) -> (Tensor, LayerCache) {
        match self {
            Layer::Conv2d(c) => (c.forward(x), LayerCache::Input(x.clone())),
            Layer::Linear(l) => (l.forward(x), LayerCache::Input(x.clone())),
            Layer::BatchNorm(b) => {
                let (y, cache) = b.forward_record(x, mode == NormMode::BatchStats);
                (y, LayerCache::BatchNorm(cache))
            }
            Layer::Relu => {
                let y = relu(x);
                (y.clone(), LayerCache::Relu(y))
            }
            Layer::MaxPool2d { kernel, stride } => {
                let (y, arg) = pool::max_pool(x, *kernel, *stride);
                (y, LayerCache::MaxPool { arg, input: x.shape() })
            }
            Layer::GlobalAvgPool => (pool::global_avg_pool(x), LayerCache::Shape(x.shape())),
            Layer::Flatten => (self.forward(x), LayerCache::Shape(x.shape())),
            Layer::Residual(r) => {
                let (mut y, main) = r.main.forward_record(x, mode);
                let shortcut = match &r.shortcut {
                    Some(s) => {
                        let (side, cache) = s.forward_record(x, mode);
                        y.add_assign(&side);
                        Some(cache)
                    }
                    None => {
                        y.add_assign(x);
                        None
                    }
                };
                if r.relu {
                    y = relu(&y);
                }
                let cache = ResidualCache { main, shortcut, out: y.clone() };
                (y, LayerCache::Residual(Box::new(cache)))
            }
        }
    }

    /// Fold batch statistics recorded by a `BatchStats` forward into the running averages.
    pub fn commit_stats(&mut self, cache: &LayerCache) {
        match (self, cache) {
            (Layer::BatchNorm(b), LayerCache::BatchNorm(c)) => b.commit(c),
            (Layer::Residual(r), LayerCache::Residual(c)) => {
                r.main.commit_stats(&c.main);
                if let (Some(s), Some(sc)) = (&mut r.shortcut, &c.shortcut) {
                    s.commit_stats(sc);
                }
            }
            _ => {}
        }
    }

    pub fn forward_train(&mut self, x: &Tensor, mode: NormMode) -> (Tensor, LayerCache) {
        let (y, cache) = self.forward_record(x, mode);
        self.commit_stats(&cache);
        (y, cache)
    }

    /// Backward accumulating parameter gradients into each [`Param::grad`].
    pub fn backward(&mut self, cache: &LayerCache, grad: &Tensor, need_input: bool) -> Option<Tensor> {
        match self {
            Layer::Conv2d(c) => {
                let LayerCache::Input(x) = cache else { wrong_cache("conv2d") };
                // Gradient buffers are moved out while the weights are borrowed.
                let mut wg = std::mem::take(&mut c.weight.grad);
                let mut bg = c.bias.as_mut().map(|b| std::mem::take(&mut b.grad));
                let dx = c.backward_impl(x, grad, need_input, Some(&mut wg), bg.as_deref_mut());
                c.weight.grad = wg;
                if let (Some(b), Some(g)) = (c.bias.as_mut(), bg) {
                    b.grad = g;
                }
                dx
            }
            Layer::Linear(l) => {
                let LayerCache::Input(x) = cache else { wrong_cache("linear") };
                let mut wg = std::mem::take(&mut l.weight.grad);
                let mut bg = l.bias.as_mut().map(|b| std::mem::take(&mut b.grad));
                let dx = l.backward_impl(x, grad, need_input, Some(&mut wg), bg.as_deref_mut());
                l.weight.grad = wg;
                if let (Some(b), Some(g)) = (l.bias.as_mut(), bg) {
                    b.grad = g;
                }
                dx
            }
            Layer::BatchNorm(b) => {
                let LayerCache::BatchNorm(c) = cache else { wrong_cache("batchnorm") };
                let mut dg = std::mem::take(&mut b.gamma.grad);
                let mut db = std::mem::take(&mut b.beta.grad);
                let dx = b.backward_impl(c, grad, need_input, Some((&mut dg, &mut db)));
                b.gamma.grad = dg;
                b.beta.grad = db;
                dx
            }
            Layer::Residual(r) => {
                let LayerCache::Residual(c) = cache else { wrong_cache("residual") };
                let g = if r.relu { relu_backward(&c.out, grad) } else { grad.clone() };
                let dmain = r.main.backward(&c.main, &g, need_input);
                let dside = match (&mut r.shortcut, &c.shortcut) {
                    (Some(s), Some(sc)) => s.backward(sc, &g, need_input),
                    (None, None) => need_input.then(|| g.clone()),
                    _ => wrong_cache("residual shortcut"),
                };
                match (dmain, dside) {
                    (Some(mut a), Some(b)) => {
                        a.add_assign(&b);
                        Some(a)
                    }
                    _ => None,
                }
            }
            _ => need_input.then(|| self.backward_input(cache, grad)),
        }
    }

    /// Input gradient only; parameters and their gradients are left untouched.
    pub fn backward_input(&self, cache: &LayerCache, grad: &Tensor) -> Tensor {
        let out = match (self, cache) {
            (Layer::Conv2d(c), LayerCache::Input(x)) => c.backward_impl(x, grad, true, None, None),
            (Layer::Linear(l), LayerCache::Input(x)) => l.backward_impl(x, grad, true, None, None),
            (Layer::BatchNorm(b), LayerCache::BatchNorm(c)) => b.backward_impl(c, grad, true, None),
            (Layer::Relu, LayerCache::Relu(y)) => Some(relu_backward(y, grad)),
            (Layer::MaxPool2d { .. }, LayerCache::MaxPool { arg, input }) => {
                Some(pool::max_pool_backward(grad, arg, *input))
            }
            (Layer::GlobalAvgPool, LayerCache::Shape(s)) => Some(pool::global_avg_pool_backward(grad, *s)),
            (Layer::Flatten, LayerCache::Shape(s)) => Some(grad.clone().reshape(*s)),
            (Layer::Residual(r), LayerCache::Residual(c)) => {
                let g = if r.relu { relu_backward(&c.out, grad) } else { grad.clone() };
                let mut d = r.main.backward_input(&c.main, &g);
                match (&r.shortcut, &c.shortcut) {
                    (Some(s), Some(sc)) => d.add_assign(&s.backward_input(sc, &g)),
                    (None, None) => d.add_assign(&g),
                    _ => wrong_cache("residual shortcut"),
                }
                Some(d)
            }
            _ => wrong_cache(self.kind()),
        };
        out.expect("input gradient requested")
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Linear(_) => "linear",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::MaxPool2d { .. } => "maxpool2d",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Flatten => "flatten",
            Layer::Residual(_) => "residual",
        }
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        match self {
            Layer::Conv2d(Conv2d { weight, bias, .. }) | Layer::Linear(Linear { weight, bias, .. }) => {
                f(&format!("{prefix}weight"), weight);
                if let Some(b) = bias {
                    f(&format!("{prefix}bias"), b);
                }
            }
            Layer::BatchNorm(b) => {
                f(&format!("{prefix}weight"), &b.gamma);
                f(&format!("{prefix}bias"), &b.beta);
            }
            Layer::Residual(r) => {
                r.main.visit_params(&format!("{prefix}main."), f);
                if let Some(s) = &r.shortcut {
                    s.visit_params(&format!("{prefix}shortcut."), f);
                }
            }
            _ => {}
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            Layer::Conv2d(Conv2d { weight, bias, .. }) | Layer::Linear(Linear { weight, bias, .. }) => {
                f(&format!("{prefix}weight"), weight);
                if let Some(b) = bias {
                    f(&format!("{prefix}bias"), b);
                }
            }
            Layer::BatchNorm(b) => {
                f(&format!("{prefix}weight"), &mut b.gamma);
                f(&format!("{prefix}bias"), &mut b.beta);
            }
            Layer::Residual(r) => {
                r.main.visit_params_mut(&format!("{prefix}main."), f);
                if let Some(s) = &mut r.shortcut {
                    s.visit_params_mut(&format!("{prefix}shortcut."), f);
                }
            }
            _ => {}
        }
    }

    /// Parameters and buffers, in a fixed order.
    pub fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, StateEntry<'_>)) {
        match self {
            Layer::BatchNorm(b) => {
                let shape = [b.channels];
                self.visit_params(prefix, &mut |name, p| {
                    f(name, StateEntry { shape: &p.shape, values: &p.value, trainable: true })
                });
                f(
                    &format!("{prefix}running_mean"),
                    StateEntry { shape: &shape, values: &b.running_mean, trainable: false },
                );
                f(
                    &format!("{prefix}running_var"),
                    StateEntry { shape: &shape, values: &b.running_var, trainable: false },
                );
            }
            Layer::Residual(r) => {
                r.main.visit_state(&format!("{prefix}main."), f);
                if let Some(s) = &r.shortcut {
                    s.visit_state(&format!("{prefix}shortcut."), f);
                }
            }
            _ => self.visit_params(prefix, &mut |name, p| {
                f(name, StateEntry { shape: &p.shape, values: &p.value, trainable: true })
            }),
        }
    }

    /// Mutable access to every state buffer, same order and names as [`Layer::visit_state`].
    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [Scalar])) {
        match self {
            Layer::BatchNorm(b) => {
                let shape = [b.channels];
                f(&format!("{prefix}weight"), &shape, &mut b.gamma.value);
                f(&format!("{prefix}bias"), &shape, &mut b.beta.value);
                f(&format!("{prefix}running_mean"), &shape, &mut b.running_mean);
                f(&format!("{prefix}running_var"), &shape, &mut b.running_var);
            }
            Layer::Residual(r) => {
                r.main.visit_state_mut(&format!("{prefix}main."), f);
                if let Some(s) = &mut r.shortcut {
                    s.visit_state_mut(&format!("{prefix}shortcut."), f);
                }
            }
            _ => self.visit_params_mut(prefix, &mut |name, p| f(name, &p.shape.clone(), &mut p.value)),
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }
}
