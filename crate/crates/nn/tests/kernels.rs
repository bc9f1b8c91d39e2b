//! Forward kernels against direct-loop references on random geometry.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scion_nn::{Conv2d, Layer, Linear, Scalar, Shape, Tensor};

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn idx(s: Shape, n: usize, c: usize, y: usize, x: usize) -> usize {
    ((n * s.c + c) * s.h + y) * s.w + x
}

fn direct_conv(conv: &Conv2d, x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let (k, st, p) = (conv.kernel, conv.stride, conv.padding);
    let oh = (s.h + 2 * p - k) / st + 1;
    let ow = (s.w + 2 * p - k) / st + 1;
    let w = &conv.weight.value;
    let mut out = Vec::with_capacity(s.n * conv.out_channels * oh * ow);
    for n in 0..s.n {
        for o in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[o] as f64);
                    for c in 0..s.c {
                        for u in 0..k {
                            for v in 0..k {
                                let (iy, ix) = ((oy * st + u) as isize - p as isize, (ox * st + v) as isize - p as isize);
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let xv = x.data()[idx(s, n, c, iy as usize, ix as usize)] as f64;
                                acc += w[((o * s.c + c) * k + u) * k + v] as f64 * xv;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn max_err(got: &[Scalar], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter().zip(want).map(|(g, w)| (*g as f64 - w).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn conv_matches_direct_loops(
        seed in any::<u64>(),
        n in 1usize..3, c in 1usize..5, o in 1usize..5,
        hw in 3usize..9, k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3, bias in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = Conv2d::new(c, o, k, stride, k / 2, bias, &mut rng);
        let x = random_tensor(&mut rng, Shape::new(n, c, hw, hw));
        let y = conv.forward(&x);
        prop_assert_eq!(y.shape(), conv.output_shape(x.shape()).unwrap());
        prop_assert!(max_err(y.data(), &direct_conv(&conv, &x)) < 1e-4);
    }

    #[test]
    fn linear_matches_direct_loops(seed in any::<u64>(), n in 1usize..5, i in 1usize..12, o in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lin = Linear::new(i, o, true, &mut rng);
        let x = random_tensor(&mut rng, Shape::new(n, i, 1, 1));
        let want: Vec<f64> = (0..n)
            .flat_map(|r| {
                let (lin, x) = (&lin, &x);
                (0..o).map(move |j| {
                    let b = lin.bias.as_ref().unwrap().value[j] as f64;
                    b + (0..i).map(|q| lin.weight.value[j * i + q] as f64 * x.data()[r * i + q] as f64).sum::<f64>()
                })
            })
            .collect();
        prop_assert!(max_err(lin.forward(&x).data(), &want) < 1e-5);
    }

    #[test]
    fn max_pool_matches_direct_loops(seed in any::<u64>(), c in 1usize..4, hw in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, Shape::new(2, c, hw, hw));
        let y = Layer::MaxPool2d { kernel: 2, stride: 2 }.forward(&x);
        let s = x.shape();
        let oh = (hw - 2) / 2 + 1;
        let mut want = Vec::new();
        for n in 0..2 {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..oh {
                        let m = (0..4)
                            .map(|q| x.data()[idx(s, n, ch, oy * 2 + q / 2, ox * 2 + q % 2)] as f64)
                            .fold(f64::NEG_INFINITY, f64::max);
                        want.push(m);
                    }
                }
            }
        }
        prop_assert_eq!(max_err(y.data(), &want), 0.0);
    }
}
