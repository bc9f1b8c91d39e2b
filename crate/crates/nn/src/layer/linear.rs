use rand::Rng;

use crate::gemm::{gemm, Strides};
use crate::init::he_normal;
use crate::{NnError, Param, Result, Scalar, Shape, Tensor};

/// Affine map on `[n, in_features, 1, 1]` activations. Weight is `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, bias: bool, rng: &mut R) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::new(
                vec![out_features, in_features],
                he_normal(rng, in_features, in_features * out_features),
            ),
            bias: bias.then(|| Param::zeros(vec![out_features])),
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.sample_len() != self.in_features || input.h != 1 || input.w != 1 {
            return Err(NnError::Shape {
                expected: format!("[n, {}, 1, 1]", self.in_features),
                got: input.to_string(),
            });
        }
        Ok(Shape::new(input.n, self.out_features, 1, 1))
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Param::len)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let shape = self
            .output_shape(x.shape())
            .unwrap_or_else(|e| panic!("linear: {e}"));
        let n = shape.n;
        let mut y = vec![0.0; n * self.out_features];
        if let Some(b) = &self.bias {
            for row in y.chunks_mut(self.out_features) {
                row.copy_from_slice(&b.value);
            }
        }
        gemm(
            n,
            self.in_features,
            self.out_features,
            1.0,
            x.data(),
            Strides::row_major(self.in_features),
            &self.weight.value,
            Strides::transposed(self.in_features),
            if self.bias.is_some() { 1.0 } else { 0.0 },
            &mut y,
            Strides::row_major(self.out_features),
        );
        Tensor::from_vec(shape, y)
    }

    pub(crate) fn backward_impl(
        &self,
        input: &Tensor,
        grad: &Tensor,
        need_input: bool,
        weight_grad: Option<&mut [Scalar]>,
        bias_grad: Option<&mut [Scalar]>,
    ) -> Option<Tensor> {
        let n = input.shape().n;
        let (fi, fo) = (self.in_features, self.out_features);
        if let Some(bg) = bias_grad {
            for row in grad.data().chunks(fo) {
                for (acc, g) in bg.iter_mut().zip(row) {
                    *acc += g;
                }
            }
        }
        if let Some(wg) = weight_grad {
            gemm(
                fo,
                n,
                fi,
                1.0,
                grad.data(),
                Strides::transposed(fo),
                input.data(),
                Strides::row_major(fi),
                1.0,
                wg,
                Strides::row_major(fi),
            );
        }
        if !need_input {
            return None;
        }
        let mut dx = vec![0.0; n * fi];
        gemm(
            n,
            fo,
            fi,
            1.0,
            grad.data(),
            Strides::row_major(fo),
            &self.weight.value,
            Strides::row_major(fi),
            0.0,
            &mut dx,
            Strides::row_major(fi),
        );
        Some(Tensor::from_vec(input.shape(), dx))
    }
}
