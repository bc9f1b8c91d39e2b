use crate::layer::{Layer, LayerCache, NormMode};
use crate::param::StateEntry;
use crate::{Param, Result, Scalar, Shape, Tensor};

/// An ordered chain of layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone)]
pub struct SequentialCache {
    caches: Vec<LayerCache>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.layers.iter().try_fold(input, |s, l| l.output_shape(s))
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur);
        }
        cur
    }

    pub fn forward_record(&self, x: &Tensor, mode: NormMode) -> (Tensor, SequentialCache) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (y, c) = layer.forward_record(&cur, mode);
            caches.push(c);
            cur = y;
        }
        (cur, SequentialCache { caches })
    }

    pub fn commit_stats(&mut self, cache: &SequentialCache) {
        for (layer, c) in self.layers.iter_mut().zip(&cache.caches) {
            layer.commit_stats(c);
        }
    }

    pub fn forward_train(&mut self, x: &Tensor, mode: NormMode) -> (Tensor, SequentialCache) {
        let (y, cache) = self.forward_record(x, mode);
        self.commit_stats(&cache);
        (y, cache)
    }

    pub fn backward(&mut self, cache: &SequentialCache, grad: &Tensor, need_input: bool) -> Option<Tensor> {
        let mut g = grad.clone();
        for (i, (layer, c)) in self.layers.iter_mut().zip(&cache.caches).enumerate().rev() {
            let dx = layer.backward(c, &g, need_input || i > 0);
            if i == 0 {
                return dx;
            }
            g = dx.expect("inner layers always return an input gradient");
        }
        Some(g)
    }

    pub fn backward_input(&self, cache: &SequentialCache, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for (layer, c) in self.layers.iter().zip(&cache.caches).rev() {
            g = layer.backward_input(c, &g);
        }
        g
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit_params(&format!("{prefix}{i}."), f);
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params_mut(&format!("{prefix}{i}."), f);
        }
    }

    pub fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, StateEntry<'_>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit_state(&format!("{prefix}{i}."), f);
        }
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [Scalar])) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_state_mut(&format!("{prefix}{i}."), f);
        }
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(Layer::zero_grad);
    }
}
