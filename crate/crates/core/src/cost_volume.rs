//! Correlation cost volume with disparity hypotheses on the channel axis.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// `(n, D/4, H/4, W/4)` matching scores; channel `d` is a shift of `d`
/// quarter-resolution pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume<T: Real = f32> {
    pub data: Tensor<T>,
    pub max_disparity: usize,
}

impl<T: Real> CostVolume<T> {
    pub fn levels(&self) -> usize {
        self.data.shape().c
    }
}

fn check<T: Real>(left: &Tensor<T>, right: &Tensor<T>, max_disparity: usize) -> Result<usize> {
    if left.shape() != right.shape() {
        return Err(Error::config(format!(
            "correlation: left features {} vs right {}",
            left.shape(),
            right.shape()
        )));
    }
    if max_disparity == 0 || !max_disparity.is_multiple_of(4) {
        return Err(Error::config(format!(
            "correlation: max disparity {max_disparity} must be a positive multiple of 4"
        )));
    }
    Ok(max_disparity / 4)
}

/// `C(d, h, w) = mean_c left(c, h, w) · right(c, h, w − d)`, zero where
/// `w − d < 0`.
pub fn build_correlation_volume<T: Real>(
    left: &Tensor<T>,
    right: &Tensor<T>,
    max_disparity: usize,
) -> Result<CostVolume<T>> {
    let levels = check(left, right, max_disparity)?;
    let s = left.shape();
    let inv_c = 1.0 / s.c as f64;
    let out_shape = Shape::new(s.n, levels, s.h, s.w);
    let mut out = vec![T::zero(); out_shape.numel()];
    out.par_chunks_mut(s.plane()).enumerate().for_each(|(idx, plane)| {
        let (b, d) = (idx / levels, idx % levels);
        if d >= s.w {
            return;
        }
        let mut acc = vec![0.0f64; s.plane()];
        for c in 0..s.c {
            let lp = left.plane(b, c);
            let rp = right.plane(b, c);
            for y in 0..s.h {
                let row = y * s.w;
                for x in d..s.w {
                    acc[row + x] += lp[row + x].as_f64() * rp[row + x - d].as_f64();
                }
            }
        }
        for (o, a) in plane.iter_mut().zip(acc) {
            *o = T::cast(a * inv_c);
        }
    });
    let data = Tensor::from_parts(out_shape, out);
    data.ensure_finite("correlation volume")?;
    Ok(CostVolume { data, max_disparity })
}

/// Gradients of `sum(grad ⊙ volume)` w.r.t. the left and right features.
pub fn correlation_backward<T: Real>(
    left: &Tensor<T>,
    right: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = left.shape();
    if right.shape() != s || grad.shape().with_c(s.c) != s {
        return Err(Error::config(format!(
            "correlation_backward: left {} right {} grad {}",
            s,
            right.shape(),
            grad.shape()
        )));
    }
    let levels = grad.shape().c;
    let inv_c = 1.0 / s.c as f64;
    let mut gl = vec![T::zero(); s.numel()];
    let mut gr = vec![T::zero(); s.numel()];
    gl.par_chunks_mut(s.plane())
        .zip(gr.par_chunks_mut(s.plane()))
        .enumerate()
        .for_each(|(idx, (pl, pr))| {
            let (b, c) = (idx / s.c, idx % s.c);
            let lp = left.plane(b, c);
            let rp = right.plane(b, c);
            let mut al = vec![0.0f64; s.plane()];
            let mut ar = vec![0.0f64; s.plane()];
            for d in 0..levels.min(s.w) {
                let gp = grad.plane(b, d);
                for y in 0..s.h {
                    let row = y * s.w;
                    for x in d..s.w {
                        let g = gp[row + x].as_f64();
                        al[row + x] += g * rp[row + x - d].as_f64();
                        ar[row + x - d] += g * lp[row + x].as_f64();
                    }
                }
            }
            for (o, a) in pl.iter_mut().zip(al) {
                *o = T::cast(a * inv_c);
            }
            for (o, a) in pr.iter_mut().zip(ar) {
                *o = T::cast(a * inv_c);
            }
        });
    Ok((Tensor::from_parts(s, gl), Tensor::from_parts(s, gr)))
}
