//! Smooth-L1 disparity loss, AdamW, a random-dot stereogram generator and a
//! small training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::normalize;
use crate::layers::Module;
use crate::metrics::compute_metrics;
use crate::model::Model;
use crate::regression::DisparityMap;
use crate::tensor::{Real, Shape, Tensor};

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Mean smooth-L1 over valid pixels and its gradient w.r.t. `pred`.
/// `gt` and `valid` are laid out like `pred` (any shape).
pub fn smooth_l1_with_grad<T: Real>(pred: &Tensor<T>, gt: &[f32], valid: &[bool]) -> Result<(f64, Tensor<T>)> {
    if gt.len() != pred.numel() || valid.len() != pred.numel() {
        return Err(Error::config(format!(
            "loss: prediction {} vs {} targets and {} mask entries",
            pred.shape(),
            gt.len(),
            valid.len()
        )));
    }
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(pred.shape());
    for (i, g) in grad.data_mut().iter_mut().enumerate() {
        if valid[i] {
            let (l, d) = smooth_l1(pred.data()[i].as_f64() - gt[i] as f64);
            loss += l;
            *g = T::cast(d * inv);
        }
    }
    Ok((loss * inv, grad))
}

pub fn smooth_l1_loss(pred: &DisparityMap, gt: &DisparityMap) -> Result<f64> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::config(format!(
            "loss: prediction {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    Ok(smooth_l1_with_grad(&pred.to_tensor(), &gt.values, &gt.valid)?.0)
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn update<T: Real>(&self, param: &mut [T], grad: &[T], m: &mut [f64], v: &mut [f64]) {
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = self.lr * self.weight_decay;
        for i in 0..param.len() {
            let g = grad[i].as_f64();
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mut p = param[i].as_f64();
            p -= decay * p;
            p -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.epsilon);
            param[i] = T::cast(p);
        }
    }

    /// One step over raw slices; state is keyed by position in `params`.
    pub fn step_slices<T: Real>(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) {
        self.step += 1;
        if self.moments.is_empty() {
            self.moments = params.iter().map(|p| (vec![0.0; p.len()], vec![0.0; p.len()])).collect();
        }
        let mut moments = std::mem::take(&mut self.moments);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(moments.iter_mut()) {
            self.update(p, g, m, v);
        }
        self.moments = moments;
    }

    /// One step over every trainable tensor of `model`.
    pub fn step<T: Real, M: Module<T>>(&mut self, model: &mut M) {
        self.step += 1;
        let mut moments = std::mem::take(&mut self.moments);
        let mut k = 0;
        model.visit_mut("", &mut |p| {
            let Some(g) = p.grad else { return };
            if moments.len() <= k {
                moments.push((vec![0.0; g.len()], vec![0.0; g.len()]));
            }
            let (m, v) = &mut moments[k];
            self.update(p.value, g, m, v);
            k += 1;
        });
        self.moments = moments;
    }
}

/// One rectified pair: `left(y, x) = right(y, x − gt(y, x))` at valid pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    /// `(1, 3, h, w)` in [0, 1].
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    pub gt: DisparityMap,
}

/// Value noise: uniform samples on a lattice with spacing `step`, bilinearly
/// interpolated. Structure at a few pixels survives the stride-4 features.
fn texture(rng: &mut ChaCha8Rng, h: usize, w: usize, step: usize) -> Tensor<f32> {
    let lh = h / step + 2;
    let lw = w / step + 2;
    let g: Vec<f32> = (0..3 * lh * lw).map(|_| rng.random::<f32>()).collect();
    let inv = 1.0 / step as f32;
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        let (y0, x0) = (y / step, x / step);
        let ty = (y % step) as f32 * inv;
        let tx = (x % step) as f32 * inv;
        let at = |yy: usize, xx: usize| g[(c * lh + yy) * lw + xx];
        let top = (1.0 - tx) * at(y0, x0) + tx * at(y0, x0 + 1);
        let bottom = (1.0 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1);
        (1.0 - ty) * top + ty * bottom
    })
}

/// Random-dot stereogram: a background plane plus 3–6 fronto-parallel
/// rectangles with integer disparities below `max_disparity`. Pixels whose
/// source column falls off the image or that are hidden in the right view by
/// a nearer surface are invalid.
pub fn gen_stereogram(seed: u64, h: usize, w: usize, max_disparity: usize) -> Result<StereoSample> {
    if h == 0 || w == 0 || max_disparity >= w {
        return Err(Error::config(format!(
            "stereogram: need max_disparity < width and a nonempty image, got {h}x{w}, D={max_disparity}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let right = texture(&mut rng, h, w, 3);
    // keep targets inside the range a D-level regressor can express
    let hi = if max_disparity > 4 { max_disparity - 4 } else { max_disparity.saturating_sub(1) };
    let mut disp = vec![0usize; h * w];
    if max_disparity > 0 {
        let bg = rng.random_range(0..=hi / 2);
        disp.iter_mut().for_each(|d| *d = bg);
        let mut rects: Vec<(usize, usize, usize, usize, usize)> = (0..rng.random_range(3..=6))
            .map(|_| {
                let rh = rng.random_range(h / 5..=h / 2).max(1);
                let rw = rng.random_range(w / 5..=w / 2).max(1);
                let y0 = rng.random_range(0..=h - rh);
                let x0 = rng.random_range(0..=w - rw);
                (y0, x0, rh, rw, rng.random_range(bg..=hi))
            })
            .collect();
        // far to near so nearer rectangles overwrite
        rects.sort_by_key(|r| r.4);
        for (y0, x0, rh, rw, d) in rects {
            for y in y0..y0 + rh {
                disp[y * w + x0..y * w + x0 + rw].iter_mut().for_each(|v| *v = d);
            }
        }
    }
    let mut valid = vec![true; h * w];
    let mut left = Tensor::zeros(right.shape());
    for y in 0..h {
        // nearest surface seen at each right-view column
        let mut winner = vec![None::<usize>; w];
        for x in 0..w {
            let d = disp[y * w + x];
            if x >= d {
                let slot = &mut winner[x - d];
                *slot = Some(slot.map_or(d, |v: usize| v.max(d)));
            }
        }
        for x in 0..w {
            let d = disp[y * w + x];
            let i = y * w + x;
            if x < d {
                valid[i] = false;
                continue;
            }
            if winner[x - d] != Some(d) {
                valid[i] = false;
            }
            for c in 0..3 {
                left.set(0, c, y, x, right.at(0, c, y, x - d));
            }
        }
        // off-image sources get fresh texture
        for x in 0..w {
            if x < disp[y * w + x] {
                for c in 0..3 {
                    left.set(0, c, y, x, rng.random());
                }
            }
        }
    }
    let values = disp.iter().map(|&d| d as f32).collect();
    Ok(StereoSample {
        left,
        right,
        gt: DisparityMap::with_mask(w, h, values, valid)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// `(h, w)` of the generated stereograms.
    pub crop: (usize, usize),
    pub seed: u64,
    pub max_disparity: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub eval_every: usize,
    /// Cosine decay to zero over `steps` instead of a constant rate.
    pub cosine: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let batch = 4;
        TrainConfig {
            steps: 500,
            batch,
            lr: 1e-4 * batch as f64,
            weight_decay: 1e-4,
            crop: (64, 96),
            seed: 0,
            max_disparity: 32,
            train_samples: 32,
            val_samples: 8,
            eval_every: 50,
            cosine: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.crop;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::config(format!("crop {h}x{w} must be nonzero multiples of 32")));
        }
        if self.max_disparity == 0 || !self.max_disparity.is_multiple_of(4) || self.max_disparity > w {
            return Err(Error::config(format!(
                "max_disparity {} must be a positive multiple of 4 no larger than the crop width {w}",
                self.max_disparity
            )));
        }
        if self.batch == 0 || self.train_samples == 0 || self.val_samples == 0 {
            return Err(Error::config("batch, train_samples and val_samples must be >= 1"));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("lr {} and weight_decay {} must be >= 0", self.lr, self.weight_decay)));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if self.cosine && self.steps > 0 {
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * step as f64 / self.steps as f64).cos())
        } else {
            self.lr
        }
    }
}

/// Train and held-out sets with disjoint seeds derived from `config.seed`.
pub fn toy_dataset(config: &TrainConfig) -> Result<(Vec<StereoSample>, Vec<StereoSample>)> {
    let (h, w) = config.crop;
    let gen = |k: u64| gen_stereogram(config.seed.wrapping_mul(1_000_003).wrapping_add(k), h, w, config.max_disparity);
    let train = (0..config.train_samples as u64).map(gen).collect::<Result<_>>()?;
    let val = (0..config.val_samples as u64).map(|k| gen(1 << 32 | k)).collect::<Result<_>>()?;
    Ok((train, val))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRecord {
    pub step: usize,
    /// Training loss of the batch at this step; `None` for the final record.
    pub loss: Option<f64>,
    /// Held-out EPE when evaluated at this step.
    pub epe: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub fn initial_epe(&self) -> Option<f64> {
        self.records.iter().find_map(|r| r.epe)
    }

    pub fn final_epe(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.epe)
    }
}

fn stack(samples: &[&StereoSample]) -> Result<(Tensor<f32>, Tensor<f32>, Vec<f32>, Vec<bool>)> {
    let lefts: Vec<Tensor<f32>> = samples.iter().map(|s| normalize(&s.left)).collect();
    let rights: Vec<Tensor<f32>> = samples.iter().map(|s| normalize(&s.right)).collect();
    let left = Tensor::concat_batch(&lefts.iter().collect::<Vec<_>>())?;
    let right = Tensor::concat_batch(&rights.iter().collect::<Vec<_>>())?;
    let gt = samples.iter().flat_map(|s| s.gt.values.iter().copied()).collect();
    let valid = samples.iter().flat_map(|s| s.gt.valid.iter().copied()).collect();
    Ok((left, right, gt, valid))
}

/// Mean EPE of the model (inference mode) over `samples`, pooled by pixel.
pub fn evaluate_epe(model: &Model<f32>, samples: &[StereoSample]) -> Result<f64> {
    let mut err = 0.0;
    let mut n = 0usize;
    for s in samples {
        let pred = model.infer(&normalize(&s.left), &normalize(&s.right))?;
        let m = compute_metrics(&pred, &s.gt)?;
        err += m.epe * m.valid_pixels as f64;
        n += m.valid_pixels;
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok(err / n as f64)
}

/// One optimization step on a batch; returns the loss.
pub fn train_step(model: &mut Model<f32>, opt: &mut AdamW, batch: &[&StereoSample], step: usize) -> Result<f64> {
    let (left, right, gt, valid) = stack(batch)?;
    model.zero_grad();
    let (pred, cache) = model.forward_train(&left, &right)?;
    let (loss, grad) = smooth_l1_with_grad(&pred, &gt, &valid)?;
    if !loss.is_finite() {
        return Err(Error::Diverged { step, loss });
    }
    model.backward(&cache, &grad)?;
    opt.step(model);
    Ok(loss)
}

/// Trains `model` in place. `on_record` sees every history entry as it is
/// produced (for progress output).
pub fn train_loop(
    model: &mut Model<f32>,
    config: &TrainConfig,
    mut on_record: impl FnMut(&HistoryRecord),
) -> Result<TrainHistory> {
    config.validate()?;
    if model.config.max_disparity != config.max_disparity {
        return Err(Error::config(format!(
            "model max_disparity {} differs from training max_disparity {}",
            model.config.max_disparity, config.max_disparity
        )));
    }
    let (train, val) = toy_dataset(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut opt = AdamW::new(config.lr, config.weight_decay);
    let mut history = TrainHistory::default();
    let mut push = |r: HistoryRecord, h: &mut TrainHistory| {
        on_record(&r);
        h.records.push(r);
    };
    for step in 0..config.steps {
        let epe = if config.eval_every > 0 && step % config.eval_every == 0 {
            Some(evaluate_epe(model, &val)?)
        } else {
            None
        };
        let mut batch = Vec::with_capacity(config.batch);
        while batch.len() < config.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        opt.lr = config.lr_at(step);
        let loss = train_step(model, &mut opt, &batch, step)?;
        push(HistoryRecord { step, loss: Some(loss), epe }, &mut history);
    }
    let epe = evaluate_epe(model, &val)?;
    push(HistoryRecord { step: config.steps, loss: None, epe: Some(epe) }, &mut history);
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let gt = DisparityMap::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(smooth_l1_loss(&gt, &gt).unwrap(), 0.0);
        let off = |e: f32| DisparityMap::new(3, 1, gt.values.iter().map(|v| v + e).collect()).unwrap();
        assert_eq!(smooth_l1_loss(&off(0.5), &gt).unwrap(), 0.125);
        assert_eq!(smooth_l1_loss(&off(-2.0), &gt).unwrap(), 1.5);
    }

    #[test]
    fn loss_without_valid_pixels_errors() {
        let gt = DisparityMap::with_mask(2, 1, vec![0.0; 2], vec![false; 2]).unwrap();
        assert!(matches!(smooth_l1_loss(&gt, &gt), Err(Error::NoValidPixels)));
    }

    #[test]
    fn adamw_zero_gradient() {
        let mut p = vec![1.5f64, -2.0];
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step_slices(&mut [&mut p[..]], &[&[0.0, 0.0][..]]);
        assert_eq!(p, [1.5, -2.0]);

        let mut opt = AdamW::new(0.1, 0.5);
        opt.step_slices(&mut [&mut p[..]], &[&[0.0, 0.0][..]]);
        let shrink = |v: f64| v - (0.1 * 0.5) * v;
        assert_eq!(p, [shrink(1.5), shrink(-2.0)]);
    }

    #[test]
    fn adamw_quadratic() {
        let mut x = [1.0f64];
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..200 {
            let g = [2.0 * x[0]];
            opt.step_slices(&mut [&mut x[..]], &[&g[..]]);
        }
        assert!(x[0].abs() < 0.05, "{}", x[0]);
    }

    #[test]
    fn stereogram_identity_and_masks() {
        let s = gen_stereogram(3, 32, 64, 16).unwrap();
        let mut valid = 0;
        for y in 0..32 {
            for x in 0..64 {
                if !s.gt.is_valid(x, y) {
                    continue;
                }
                valid += 1;
                let d = s.gt.get(x, y) as usize;
                assert!(d < 16);
                for c in 0..3 {
                    assert_eq!(s.left.at(0, c, y, x), s.right.at(0, c, y, x - d));
                }
            }
        }
        assert!(valid > 32 * 64 / 2);
        assert_eq!(s, gen_stereogram(3, 32, 64, 16).unwrap());
        assert_ne!(s, gen_stereogram(4, 32, 64, 16).unwrap());
    }

    #[test]
    fn zero_disparity_stereogram() {
        let s = gen_stereogram(1, 8, 8, 0).unwrap();
        assert_eq!(s.left, s.right);
        assert_eq!(s.gt.valid_count(), 64);
    }

    #[test]
    fn train_config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!(TrainConfig::default().lr, 4e-4);
        let bad = TrainConfig { crop: (60, 96), ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { max_disparity: 30, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }
}
