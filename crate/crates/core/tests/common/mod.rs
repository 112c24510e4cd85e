//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lightstereo::ops::ConvParams;
use lightstereo::{Real, Shape, Tensor};

pub fn tensor(seed: u64, shape: Shape, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-scale..scale))
}

/// Direct definition of a zero-padded grouped cross-correlation, in f64.
pub fn conv_oracle<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Vec<f64> {
    let s = x.shape();
    let (kh, kw) = p.kernel();
    let cout = p.out_channels();
    let cin_g = s.c / p.groups;
    let cout_g = cout / p.groups;
    let oh = (s.h + 2 * p.padding.0 - kh) / p.stride.0 + 1;
    let ow = (s.w + 2 * p.padding.1 - kw) / p.stride.1 + 1;
    let mut out = Vec::with_capacity(s.n * cout * oh * ow);
    for n in 0..s.n {
        for o in 0..cout {
            let g = o / cout_g;
            for y in 0..oh {
                for x0 in 0..ow {
                    let mut acc = p.bias.as_ref().map_or(0.0, |b| b[o].as_f64());
                    for ci in 0..cin_g {
                        for i in 0..kh {
                            for j in 0..kw {
                                let yy = (y * p.stride.0 + i) as isize - p.padding.0 as isize;
                                let xx = (x0 * p.stride.1 + j) as isize - p.padding.1 as isize;
                                if yy < 0 || xx < 0 || yy >= s.h as isize || xx >= s.w as isize {
                                    continue;
                                }
                                acc += p.weight.at(o, ci, i, j).as_f64()
                                    * x.at(n, g * cin_g + ci, yy as usize, xx as usize).as_f64();
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

/// Triple loop over (d, h, w) with the channel mean innermost.
pub fn correlation_oracle<T: Real>(left: &Tensor<T>, right: &Tensor<T>, levels: usize) -> Vec<f64> {
    let s = left.shape();
    let mut out = Vec::with_capacity(s.n * levels * s.h * s.w);
    for n in 0..s.n {
        for d in 0..levels {
            for h in 0..s.h {
                for w in 0..s.w {
                    if w < d {
                        out.push(0.0);
                        continue;
                    }
                    let sum: f64 = (0..s.c)
                        .map(|c| left.at(n, c, h, w).as_f64() * right.at(n, c, h, w - d).as_f64())
                        .sum();
                    out.push(sum / s.c as f64);
                }
            }
        }
    }
    out
}

/// Largest elementwise relative error; `floor` guards exact zeros.
pub fn max_rel_error(actual: &[f64], expected: &[f64], floor: f64) -> f64 {
    assert_eq!(actual.len(), expected.len());
    actual
        .iter()
        .zip(expected)
        .map(|(a, e)| (a - e).abs() / e.abs().max(floor))
        .fold(0.0, f64::max)
}
