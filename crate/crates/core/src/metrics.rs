//! End-point error and outlier rates over valid pixels.

use crate::error::{Error, Result};
use crate::regression::DisparityMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epe: f64,
    pub bad1: f64,
    pub bad2: f64,
    pub bad3: f64,
    /// Error > 3 px and > 5 % of the ground truth.
    pub d1: f64,
    pub valid_pixels: usize,
}

/// Evaluated over pixels valid in both maps.
pub fn compute_metrics(pred: &DisparityMap, gt: &DisparityMap) -> Result<MetricsRecord> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::config(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut n = 0usize;
    let (mut sum, mut b1, mut b2, mut b3, mut d1) = (0.0f64, 0usize, 0usize, 0usize, 0usize);
    for i in 0..gt.values.len() {
        if !(gt.valid[i] && pred.valid[i]) {
            continue;
        }
        let g = gt.values[i] as f64;
        let e = (pred.values[i] as f64 - g).abs();
        n += 1;
        sum += e;
        b1 += (e > 1.0) as usize;
        b2 += (e > 2.0) as usize;
        b3 += (e > 3.0) as usize;
        d1 += (e > 3.0 && e > 0.05 * g.abs()) as usize;
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    let frac = |k: usize| k as f64 / n as f64;
    Ok(MetricsRecord {
        epe: sum / n as f64,
        bad1: frac(b1),
        bad2: frac(b2),
        bad3: frac(b3),
        d1: frac(d1),
        valid_pixels: n,
    })
}
