use rand::Rng;

use crate::gemm::{gemm, Strides};
use crate::init::he_normal;
use crate::{NnError, Param, Result, Scalar, Shape, Tensor};

/// 2-D convolution with square kernel, symmetric zero padding and optional bias.
///
/// Weight layout is `[out_channels, in_channels, kernel, kernel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param,
    pub bias: Option<Param>,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }
    fn ohw(&self) -> usize {
        self.oh * self.ow
    }
    fn cols_n(&self) -> usize {
        self.n * self.ohw()
    }
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::new(
            vec![out_channels, in_channels, kernel, kernel],
            he_normal(rng, fan_in, out_channels * fan_in),
        );
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias: bias.then(|| Param::zeros(vec![out_channels])),
        }
    }

    /// Bias-free 1x1 convolution with the given `[out, in]` matrix as weight.
    pub fn pointwise(out_channels: usize, in_channels: usize, matrix: Vec<Scalar>) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 1,
            stride: 1,
            padding: 0,
            weight: Param::new(vec![out_channels, in_channels, 1, 1], matrix),
            bias: None,
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels {
            return Err(NnError::Shape {
                expected: format!("{} input channels", self.in_channels),
                got: input.to_string(),
            });
        }
        let span_h = input.h + 2 * self.padding;
        let span_w = input.w + 2 * self.padding;
        if span_h < self.kernel || span_w < self.kernel {
            return Err(NnError::Shape {
                expected: format!("spatial extent >= kernel {}", self.kernel),
                got: input.to_string(),
            });
        }
        Ok(Shape::new(
            input.n,
            self.out_channels,
            (span_h - self.kernel) / self.stride + 1,
            (span_w - self.kernel) / self.stride + 1,
        ))
    }

    fn geometry(&self, input: Shape) -> Geometry {
        let out = self
            .output_shape(input)
            .unwrap_or_else(|e| panic!("conv2d: {e}"));
        Geometry {
            n: input.n,
            c: input.c,
            h: input.h,
            w: input.w,
            k: self.kernel,
            stride: self.stride,
            pad: self.padding,
            oh: out.h,
            ow: out.w,
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Param::len)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let g = self.geometry(x.shape());
        let cols = im2col(x.data(), &g);
        let mut out = vec![0.0; self.out_channels * g.cols_n()];
        gemm(
            self.out_channels,
            g.ckk(),
            g.cols_n(),
            1.0,
            &self.weight.value,
            Strides::row_major(g.ckk()),
            &cols,
            Strides::row_major(g.cols_n()),
            0.0,
            &mut out,
            Strides::row_major(g.cols_n()),
        );
        // [out_c, n * ohw] -> [n, out_c, ohw]
        let ohw = g.ohw();
        let mut y = vec![0.0; out.len()];
        for o in 0..self.out_channels {
            let b_o = self.bias.as_ref().map_or(0.0, |b| b.value[o]);
            let row = &out[o * g.cols_n()..(o + 1) * g.cols_n()];
            for b in 0..g.n {
                let dst = &mut y[(b * self.out_channels + o) * ohw..][..ohw];
                let src = &row[b * ohw..(b + 1) * ohw];
                if self.bias.is_some() {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s + b_o;
                    }
                } else {
                    dst.copy_from_slice(src);
                }
            }
        }
        Tensor::from_vec(Shape::new(g.n, self.out_channels, g.oh, g.ow), y)
    }

    /// Shared backward. `weight_grad`/`bias_grad` receive accumulated parameter
    /// gradients when present; the input gradient is returned when `need_input`.
    pub(crate) fn backward_impl(
        &self,
        input: &Tensor,
        grad: &Tensor,
        need_input: bool,
        weight_grad: Option<&mut [Scalar]>,
        bias_grad: Option<&mut [Scalar]>,
    ) -> Option<Tensor> {
        let g = self.geometry(input.shape());
        let cols_n = g.cols_n();
        let ohw = g.ohw();
        let oc = self.out_channels;
        // grad [n, oc, ohw] -> [oc, n * ohw]
        let mut gmat = vec![0.0; oc * cols_n];
        for b in 0..g.n {
            for o in 0..oc {
                let src = &grad.data()[(b * oc + o) * ohw..][..ohw];
                gmat[o * cols_n + b * ohw..][..ohw].copy_from_slice(src);
            }
        }
        if let Some(bg) = bias_grad {
            for (o, acc) in bg.iter_mut().enumerate() {
                *acc += gmat[o * cols_n..(o + 1) * cols_n].iter().sum::<Scalar>();
            }
        }
        if let Some(wg) = weight_grad {
            let cols = im2col(input.data(), &g);
            gemm(
                oc,
                cols_n,
                g.ckk(),
                1.0,
                &gmat,
                Strides::row_major(cols_n),
                &cols,
                Strides::transposed(cols_n),
                1.0,
                wg,
                Strides::row_major(g.ckk()),
            );
        }
        if !need_input {
            return None;
        }
        let mut dcols = vec![0.0; g.ckk() * cols_n];
        gemm(
            g.ckk(),
            oc,
            cols_n,
            1.0,
            &self.weight.value,
            Strides::transposed(g.ckk()),
            &gmat,
            Strides::row_major(cols_n),
            0.0,
            &mut dcols,
            Strides::row_major(cols_n),
        );
        Some(Tensor::from_vec(input.shape(), col2im(&dcols, &g)))
    }
}

/// Unfold `x` into a `[c*k*k, n*oh*ow]` row-major matrix.
fn im2col(x: &[Scalar], g: &Geometry) -> Vec<Scalar> {
    let cols_n = g.cols_n();
    let ohw = g.ohw();
    let mut cols = vec![0.0; g.ckk() * cols_n];
    if g.k == 1 && g.stride == 1 && g.pad == 0 {
        for c in 0..g.c {
            for b in 0..g.n {
                let src = &x[(b * g.c + c) * ohw..][..ohw];
                cols[c * cols_n + b * ohw..][..ohw].copy_from_slice(src);
            }
        }
        return cols;
    }
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                for b in 0..g.n {
                    let plane = &x[(b * g.c + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut cols[row * cols_n + b * ohw..][..ohw];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..][..g.w];
                        let dst_row = &mut dst[oy * g.ow..][..g.ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back onto an input-shaped buffer.
fn col2im(cols: &[Scalar], g: &Geometry) -> Vec<Scalar> {
    let cols_n = g.cols_n();
    let ohw = g.ohw();
    let mut x = vec![0.0; g.n * g.c * g.h * g.w];
    if g.k == 1 && g.stride == 1 && g.pad == 0 {
        for c in 0..g.c {
            for b in 0..g.n {
                let src = &cols[c * cols_n + b * ohw..][..ohw];
                x[(b * g.c + c) * ohw..][..ohw].copy_from_slice(src);
            }
        }
        return x;
    }
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                for b in 0..g.n {
                    let plane = &mut x[(b * g.c + c) * g.h * g.w..][..g.h * g.w];
                    let src = &cols[row * cols_n + b * ohw..][..ohw];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * g.w..][..g.w];
                        let src_row = &src[oy * g.ow..][..g.ow];
                        for (ox, s) in src_row.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution.
    fn direct(conv: &Conv2d, x: &Tensor) -> Tensor {
        let s = x.shape();
        let out = conv.output_shape(s).unwrap();
        let mut y = Tensor::zeros(out);
        let k = conv.kernel;
        for b in 0..s.n {
            for o in 0..out.c {
                for oy in 0..out.h {
                    for ox in 0..out.w {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |p| p.value[o]) as f64;
                        for c in 0..s.c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * conv.stride + ki) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kj) as isize - conv.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((o * s.c + c) * k + ki) * k + kj];
                                    let xv = x.data()[((b * s.c + c) * s.h + iy as usize) * s.w + ix as usize];
                                    acc += (wv * xv) as f64;
                                }
                            }
                        }
                        y.data_mut()[((b * out.c + o) * out.h + oy) * out.w + ox] = acc as Scalar;
                    }
                }
            }
        }
        y
    }

    fn seq(n: usize, scale: f64) -> Vec<Scalar> {
        (0..n).map(|i| ((i as f64 * scale).sin()) as Scalar).collect()
    }

    #[test]
    fn forward_matches_direct_loops() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (2, 2, 0)] {
            let mut conv = Conv2d::pointwise(5, 3, vec![0.0; 15]);
            conv.kernel = k;
            conv.stride = stride;
            conv.padding = pad;
            conv.weight = Param::new(vec![5, 3, k, k], seq(5 * 3 * k * k, 0.7));
            conv.bias = Some(Param::new(vec![5], seq(5, 1.3)));
            let x = Tensor::from_vec(Shape::new(2, 3, 6, 5), seq(2 * 3 * 30, 0.21));
            let got = conv.forward(&x);
            let want = direct(&conv, &x);
            assert!(got.max_abs_diff(&want) < 1e-5, "k={k} s={stride} p={pad}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = Geometry { n: 2, c: 2, h: 5, w: 4, k: 3, stride: 2, pad: 1, oh: 3, ow: 2 };
        let x = seq(2 * 2 * 5 * 4, 0.3);
        let y = seq(g.ckk() * g.cols_n(), 0.17);
        let ax = im2col(&x, &g);
        let aty = col2im(&y, &g);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| (a * b) as f64).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
