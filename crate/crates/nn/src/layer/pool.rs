use crate::{NnError, Result, Scalar, Shape, Tensor};

pub(crate) fn max_pool_shape(input: Shape, kernel: usize, stride: usize) -> Result<Shape> {
    if input.h < kernel || input.w < kernel {
        return Err(NnError::Shape {
            expected: format!("spatial extent >= pool kernel {kernel}"),
            got: input.to_string(),
        });
    }
    Ok(Shape::new(
        input.n,
        input.c,
        (input.h - kernel) / stride + 1,
        (input.w - kernel) / stride + 1,
    ))
}

/// Max pooling; returns the output and the flat input index of every maximum.
/// Ties resolve to the first position in row-major window order.
pub(crate) fn max_pool(x: &Tensor, kernel: usize, stride: usize) -> (Tensor, Vec<u32>) {
    let s = x.shape();
    let out = max_pool_shape(s, kernel, stride).unwrap_or_else(|e| panic!("max_pool: {e}"));
    let mut y = Tensor::zeros(out);
    let mut arg = vec![0u32; out.numel()];
    let mut o = 0;
    for bc in 0..s.n * s.c {
        let base = bc * s.plane();
        for oy in 0..out.h {
            for ox in 0..out.w {
                let mut best = Scalar::NEG_INFINITY;
                let mut best_i = base + oy * stride * s.w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = base + (oy * stride + ky) * s.w + ox * stride + kx;
                        let v = x.data()[i];
                        if v > best {
                            best = v;
                            best_i = i;
                        }
                    }
                }
                y.data_mut()[o] = x.data()[best_i];
                arg[o] = best_i as u32;
                o += 1;
            }
        }
    }
    (y, arg)
}

pub(crate) fn max_pool_backward(grad: &Tensor, arg: &[u32], input: Shape) -> Tensor {
    let mut dx = Tensor::zeros(input);
    for (g, &i) in grad.data().iter().zip(arg) {
        dx.data_mut()[i as usize] += g;
    }
    dx
}

pub(crate) fn global_avg_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let plane = s.plane();
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<Scalar>() / plane as Scalar)
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data)
}

pub(crate) fn global_avg_pool_backward(grad: &Tensor, input: Shape) -> Tensor {
    let plane = input.plane();
    let mut dx = Tensor::zeros(input);
    for (chunk, g) in dx.data_mut().chunks_mut(plane).zip(grad.data()) {
        let v = g / plane as Scalar;
        chunk.iter_mut().for_each(|d| *d = v);
    }
    dx
}
