//! Soft-argmax disparity regression and full-resolution upsampling.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Real, Shape, Tensor};

/// Full-resolution disparity in pixels with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DisparityMap {
    /// All pixels valid.
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        let valid = vec![true; values.len()];
        Self::with_mask(width, height, values, valid)
    }

    pub fn with_mask(width: usize, height: usize, values: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(Error::config(format!(
                "disparity map {width}x{height} with {} values and {} mask entries",
                values.len(),
                valid.len()
            )));
        }
        Ok(DisparityMap {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Batch entry `n` of an `(n, 1, H, W)` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let s = t.shape();
        if s.c != 1 || n >= s.n {
            return Err(Error::config(format!("disparity tensor {s} has no single-channel entry {n}")));
        }
        let values = t.plane(n, 0).iter().map(|v| v.as_f64() as f32).collect();
        Self::new(s.w, s.h, values)
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_parts(Shape::new(1, 1, self.height, self.width), self.values.clone())
    }
}

/// Expected disparity index under the channel softmax:
/// `d̂ = Σ_{d<D/4} d · softmax(c)_d`, shape `(n, 1, h, w)`.
pub fn soft_argmax<T: Real>(costs: &Tensor<T>) -> Result<Tensor<T>> {
    let probs = ops::channel_softmax(costs)?;
    let s = costs.shape();
    let p = s.plane();
    let mut out = Tensor::zeros(s.with_c(1));
    for b in 0..s.n {
        for i in 0..p {
            let mut acc = 0.0;
            for d in 0..s.c {
                acc += d as f64 * probs.data()[(b * s.c + d) * p + i].as_f64();
            }
            out.data_mut()[b * p + i] = T::cast(acc);
        }
    }
    Ok(out)
}

/// `∂d̂/∂c_k = p_k (k − d̂)`.
pub fn soft_argmax_backward<T: Real>(costs: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let s = costs.shape();
    if grad.shape() != s.with_c(1) {
        return Err(Error::config(format!(
            "soft_argmax_backward: costs {s} grad {}",
            grad.shape()
        )));
    }
    let probs = ops::channel_softmax(costs)?;
    let p = s.plane();
    let mut out = Tensor::zeros(s);
    for b in 0..s.n {
        for i in 0..p {
            let idx = |d: usize| (b * s.c + d) * p + i;
            let mean: f64 = (0..s.c).map(|d| d as f64 * probs.data()[idx(d)].as_f64()).sum();
            let g = grad.data()[b * p + i].as_f64();
            for d in 0..s.c {
                out.data_mut()[idx(d)] = T::cast(g * probs.data()[idx(d)].as_f64() * (d as f64 - mean));
            }
        }
    }
    Ok(out)
}

/// Bilinear resize to `(h, w)` and scale by the resolution ratio (4) to
/// express disparities in full-resolution pixels.
pub fn upsample_disparity_tensor<T: Real>(quarter: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = quarter.shape();
    if s.c != 1 {
        return Err(Error::config(format!("upsample_disparity: expected one channel, got {s}")));
    }
    let ratio = w as f64 / s.w as f64;
    Ok(ops::scale(&ops::bilinear_resize(quarter, h, w, false)?, ratio))
}

pub fn upsample_disparity_backward<T: Real>(grad: &Tensor<T>, quarter_h: usize, quarter_w: usize) -> Result<Tensor<T>> {
    let ratio = grad.shape().w as f64 / quarter_w as f64;
    ops::bilinear_resize_backward(&ops::scale(grad, ratio), quarter_h, quarter_w, false)
}

/// Single-pair convenience: every pixel is marked valid.
pub fn upsample_disparity<T: Real>(quarter: &Tensor<T>, h: usize, w: usize) -> Result<DisparityMap> {
    if quarter.shape().n != 1 {
        return Err(Error::config("upsample_disparity: expected a batch of one"));
    }
    DisparityMap::from_tensor(&upsample_disparity_tensor(quarter, h, w)?, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(vals: &[f64]) -> Tensor<f64> {
        Tensor::new(Shape::new(1, vals.len(), 1, 1), vals.to_vec()).unwrap()
    }

    #[test]
    fn near_one_hot() {
        let mut v = vec![0.0; 48];
        v[5] = 100.0;
        let d = soft_argmax(&logits(&v)).unwrap().data()[0];
        assert!((d - 5.0).abs() < 1e-3);
    }

    #[test]
    fn uniform_is_mean_index() {
        let d = soft_argmax(&logits(&[0.0; 48])).unwrap().data()[0];
        assert_eq!(d, 23.5);
        let d32 = soft_argmax(&Tensor::<f32>::full(Shape::new(1, 48, 1, 1), 0.3)).unwrap().data()[0];
        assert_eq!(d32, 23.5);
    }

    #[test]
    fn two_equal_peaks() {
        let mut v = vec![-1e4; 48];
        v[10] = 0.0;
        v[20] = 0.0;
        assert_eq!(soft_argmax(&logits(&v)).unwrap().data()[0], 15.0);
    }

    #[test]
    fn constant_quarter_map_scales_by_four() {
        let q = Tensor::<f32>::full(Shape::new(1, 1, 4, 6), 10.0);
        let m = upsample_disparity(&q, 16, 24).unwrap();
        assert_eq!((m.width, m.height), (24, 16));
        assert!(m.values.iter().all(|&v| (v - 40.0).abs() < 1e-5));
        assert_eq!(m.valid_count(), 16 * 24);
    }

    #[test]
    fn horizontal_ramp_stays_linear() {
        // quarter value q(x) = 0.5 x + 1; the full-res sample at X has source
        // coordinate (X + 0.5)/4 − 0.5, so interior values are 4 q(that).
        let q = Tensor::from_fn(Shape::new(1, 1, 3, 8), |_, _, _, x| 0.5 * x as f64 + 1.0);
        let m = upsample_disparity_tensor(&q, 12, 32).unwrap();
        for y in 0..12 {
            for x in 2..30 {
                let src = (x as f64 + 0.5) / 4.0 - 0.5;
                let want = 4.0 * (0.5 * src + 1.0);
                assert!((m.at(0, 0, y, x) - want).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn mask_length_checked() {
        assert!(DisparityMap::with_mask(2, 2, vec![0.0; 4], vec![true; 3]).is_err());
    }
}
