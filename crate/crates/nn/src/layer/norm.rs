use crate::{NnError, Param, Result, Scalar, Shape, Tensor};

/// Per-channel batch normalization over `(n, h, w)`.
///
/// Running statistics follow the exponential-average convention with
/// `momentum = 0.1`, tracking the unbiased batch variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<Scalar>,
    pub running_var: Vec<Scalar>,
    pub momentum: Scalar,
    pub eps: Scalar,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub(crate) xhat: Tensor,
    pub(crate) inv_std: Vec<Scalar>,
    /// Batch statistics when the forward used them; `None` for running-stat forwards.
    pub(crate) batch_stats: Option<(Vec<Scalar>, Vec<Scalar>)>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::filled(vec![channels], 1.0),
            beta: Param::zeros(vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.channels {
            return Err(NnError::Shape {
                expected: format!("{} channels", self.channels),
                got: input.to_string(),
            });
        }
        Ok(input)
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    fn inv_std(&self, var: &[Scalar]) -> Vec<Scalar> {
        var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect()
    }

    fn normalize(&self, x: &Tensor, mean: &[Scalar], inv_std: &[Scalar]) -> (Tensor, Tensor) {
        let s = x.shape();
        let plane = s.plane();
        let mut xhat = Tensor::zeros(s);
        let mut y = Tensor::zeros(s);
        for b in 0..s.n {
            for c in 0..s.c {
                let off = (b * s.c + c) * plane;
                let (g, bt) = (self.gamma.value[c], self.beta.value[c]);
                for i in off..off + plane {
                    let h = (x.data()[i] - mean[c]) * inv_std[c];
                    xhat.data_mut()[i] = h;
                    y.data_mut()[i] = g * h + bt;
                }
            }
        }
        (y, xhat)
    }

    /// Inference forward using the running statistics.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.output_shape(x.shape())
            .unwrap_or_else(|e| panic!("batchnorm: {e}"));
        let inv_std = self.inv_std(&self.running_var);
        self.normalize(x, &self.running_mean, &inv_std).0
    }

    pub fn forward_record(&self, x: &Tensor, batch_stats: bool) -> (Tensor, BatchNormCache) {
        self.output_shape(x.shape())
            .unwrap_or_else(|e| panic!("batchnorm: {e}"));
        if !batch_stats {
            let inv_std = self.inv_std(&self.running_var);
            let (y, xhat) = self.normalize(x, &self.running_mean, &inv_std);
            return (y, BatchNormCache { xhat, inv_std, batch_stats: None });
        }
        let s = x.shape();
        let plane = s.plane();
        let count = (s.n * plane) as f64;
        let mut mean = vec![0.0; s.c];
        let mut var = vec![0.0; s.c];
        for c in 0..s.c {
            let mut sum = 0.0f64;
            for b in 0..s.n {
                let off = (b * s.c + c) * plane;
                sum += x.data()[off..off + plane].iter().map(|&v| v as f64).sum::<f64>();
            }
            let m = sum / count;
            let mut sq = 0.0f64;
            for b in 0..s.n {
                let off = (b * s.c + c) * plane;
                sq += x.data()[off..off + plane]
                    .iter()
                    .map(|&v| (v as f64 - m).powi(2))
                    .sum::<f64>();
            }
            mean[c] = m as Scalar;
            var[c] = (sq / count) as Scalar;
        }
        let inv_std = self.inv_std(&var);
        let (y, xhat) = self.normalize(x, &mean, &inv_std);
        let unbiased = if count > 1.0 {
            var.iter().map(|v| v * (count / (count - 1.0)) as Scalar).collect()
        } else {
            var.clone()
        };
        (
            y,
            BatchNormCache {
                xhat,
                inv_std,
                batch_stats: Some((mean, unbiased)),
            },
        )
    }

    pub fn commit(&mut self, cache: &BatchNormCache) {
        if let Some((mean, var)) = &cache.batch_stats {
            let m = self.momentum;
            for c in 0..self.channels {
                self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean[c];
                self.running_var[c] = (1.0 - m) * self.running_var[c] + m * var[c];
            }
        }
    }

    pub(crate) fn backward_impl(
        &self,
        cache: &BatchNormCache,
        grad: &Tensor,
        need_input: bool,
        grads: Option<(&mut [Scalar], &mut [Scalar])>,
    ) -> Option<Tensor> {
        let s = grad.shape();
        let plane = s.plane();
        let count = (s.n * plane) as Scalar;
        let mut sum_g = vec![0.0; s.c];
        let mut sum_gx = vec![0.0; s.c];
        for b in 0..s.n {
            for c in 0..s.c {
                let off = (b * s.c + c) * plane;
                for i in off..off + plane {
                    let g = grad.data()[i];
                    sum_g[c] += g;
                    sum_gx[c] += g * cache.xhat.data()[i];
                }
            }
        }
        if let Some((dgamma, dbeta)) = grads {
            for c in 0..s.c {
                dgamma[c] += sum_gx[c];
                dbeta[c] += sum_g[c];
            }
        }
        if !need_input {
            return None;
        }
        let mut dx = Tensor::zeros(s);
        let batch = cache.batch_stats.is_some();
        for b in 0..s.n {
            for c in 0..s.c {
                let off = (b * s.c + c) * plane;
                let scale = self.gamma.value[c] * cache.inv_std[c];
                for i in off..off + plane {
                    let g = grad.data()[i];
                    dx.data_mut()[i] = if batch {
                        scale / count * (count * g - sum_g[c] - cache.xhat.data()[i] * sum_gx[c])
                    } else {
                        scale * g
                    };
                }
            }
        }
        Some(dx)
    }
}
