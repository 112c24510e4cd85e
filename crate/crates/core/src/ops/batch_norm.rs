use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T: Real = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl<T: Real> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, c: usize) -> Result<()> {
        let k = self.channels();
        if self.beta.len() != k || self.running_mean.len() != k || self.running_var.len() != k {
            return Err(Error::config("batch_norm: parameter vectors differ in length"));
        }
        if k != c {
            return Err(Error::config(format!(
                "batch_norm: {k} parameters for {c} input channels"
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("batch_norm: epsilon must be > 0"));
        }
        Ok(())
    }
}

/// State saved by the training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T: Real> {
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
}

pub struct BatchNormGrads<T: Real> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Normalize with batch statistics and fold them into the running averages.
pub fn batch_norm_train<T: Real>(
    input: &Tensor<T>,
    params: &mut BatchNormParams<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let s = input.shape();
    params.check(s.c)?;
    let count = s.n * s.plane();
    if count == 0 {
        return Err(Error::config("batch_norm: empty batch"));
    }
    let mut y = Tensor::zeros(s);
    let mut xhat = Tensor::zeros(s);
    let mut inv_std = Vec::with_capacity(s.c);
    for c in 0..s.c {
        let mut mean = 0.0;
        for b in 0..s.n {
            mean += input.plane(b, c).iter().map(|v| v.as_f64()).sum::<f64>();
        }
        mean /= count as f64;
        let mut var = 0.0;
        for b in 0..s.n {
            var += input
                .plane(b, c)
                .iter()
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>();
        }
        var /= count as f64;
        let istd = 1.0 / (var + params.epsilon).sqrt();
        let (g, bt) = (params.gamma[c].as_f64(), params.beta[c].as_f64());
        for b in 0..s.n {
            let src = input.plane(b, c);
            let xh: Vec<f64> = src.iter().map(|v| (v.as_f64() - mean) * istd).collect();
            for (d, &v) in xhat.plane_mut(b, c).iter_mut().zip(&xh) {
                *d = T::cast(v);
            }
            for (d, &v) in y.plane_mut(b, c).iter_mut().zip(&xh) {
                *d = T::cast(g * v + bt);
            }
        }
        let unbiased = if count > 1 {
            var * count as f64 / (count - 1) as f64
        } else {
            var
        };
        let m = params.momentum;
        params.running_mean[c] = T::cast((1.0 - m) * params.running_mean[c].as_f64() + m * mean);
        params.running_var[c] = T::cast((1.0 - m) * params.running_var[c].as_f64() + m * unbiased);
        inv_std.push(istd);
    }
    y.ensure_finite("batch_norm")?;
    Ok((y, BatchNormCache { xhat, inv_std }))
}

/// Normalize with the running statistics.
pub fn batch_norm_eval<T: Real>(input: &Tensor<T>, params: &BatchNormParams<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    params.check(s.c)?;
    let mut y = input.clone();
    for c in 0..s.c {
        let istd = 1.0 / (params.running_var[c].as_f64() + params.epsilon).sqrt();
        let scale = params.gamma[c].as_f64() * istd;
        let shift = params.beta[c].as_f64() - params.running_mean[c].as_f64() * scale;
        for b in 0..s.n {
            for v in y.plane_mut(b, c) {
                *v = T::cast(v.as_f64() * scale + shift);
            }
        }
    }
    y.ensure_finite("batch_norm")?;
    Ok(y)
}

pub fn batch_norm<T: Real>(
    input: &Tensor<T>,
    params: &mut BatchNormParams<T>,
    training: bool,
) -> Result<Tensor<T>> {
    if training {
        Ok(batch_norm_train(input, params)?.0)
    } else {
        batch_norm_eval(input, params)
    }
}

/// Reverse of [`batch_norm_train`].
pub fn batch_norm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    params: &BatchNormParams<T>,
    grad_output: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let s = grad_output.shape();
    if s != cache.xhat.shape() {
        return Err(Error::config(format!(
            "batch_norm_backward: grad {} vs cached {}",
            s,
            cache.xhat.shape()
        )));
    }
    let count = (s.n * s.plane()) as f64;
    let mut gx = Tensor::zeros(s);
    let mut gg = Vec::with_capacity(s.c);
    let mut gb = Vec::with_capacity(s.c);
    for c in 0..s.c {
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for b in 0..s.n {
            for (g, xh) in grad_output.plane(b, c).iter().zip(cache.xhat.plane(b, c)) {
                sum_g += g.as_f64();
                sum_gx += g.as_f64() * xh.as_f64();
            }
        }
        let k = params.gamma[c].as_f64() * cache.inv_std[c];
        let (mg, mgx) = (sum_g / count, sum_gx / count);
        for b in 0..s.n {
            let gp = grad_output.plane(b, c);
            let xp = cache.xhat.plane(b, c);
            for ((d, g), xh) in gx.plane_mut(b, c).iter_mut().zip(gp).zip(xp) {
                *d = T::cast(k * (g.as_f64() - mg - xh.as_f64() * mgx));
            }
        }
        gg.push(T::cast(sum_gx));
        gb.push(T::cast(sum_g));
    }
    Ok(BatchNormGrads {
        input: gx,
        gamma: gg,
        beta: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn noise(shape: Shape) -> Tensor<f64> {
        let mut k = 7u64;
        Tensor::from_fn(shape, |_, c, _, _| {
            k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (k >> 11) as f64 / (1u64 << 53) as f64 * 4.0 + c as f64
        })
    }

    #[test]
    fn identity_parameters_in_inference() {
        let x = noise(Shape::new(2, 3, 4, 4));
        let p = BatchNormParams::new(3);
        let y = batch_norm_eval(&x, &p).unwrap();
        let k = 1.0 / (1.0 + p.epsilon).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * k).abs() < 1e-12);
            assert!((a - b).abs() < 1e-4 * b.abs().max(1.0));
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::<f32>::full(Shape::new(2, 2, 3, 3), 5.0);
        let mut p = BatchNormParams::new(2);
        p.beta = vec![0.25, -1.5];
        let (y, _) = batch_norm_train(&x, &mut p).unwrap();
        for b in 0..2 {
            assert!(y.plane(b, 0).iter().all(|&v| v == 0.25));
            assert!(y.plane(b, 1).iter().all(|&v| v == -1.5));
        }
    }

    #[test]
    fn training_output_has_beta_mean_and_gamma_std() {
        let x = noise(Shape::new(2, 3, 4, 4));
        let mut p = BatchNormParams::new(3);
        p.gamma = vec![0.5, 2.0, 1.5];
        p.beta = vec![-1.0, 0.0, 3.0];
        let (y, _) = batch_norm_train(&x, &mut p).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|b| y.plane(b, c).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!((m - p.beta[c]).abs() < 1e-4);
            assert!((sd - p.gamma[c]).abs() < 1e-4);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::new(Shape::new(1, 1, 1, 2), vec![1.0f64, 3.0]).unwrap();
        let mut p = BatchNormParams::new(1);
        batch_norm_train(&x, &mut p).unwrap();
        assert!((p.running_mean[0] - 0.2).abs() < 1e-12);
        // unbiased variance of {1, 3} is 2
        assert!((p.running_var[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 2, 2));
        assert!(batch_norm_eval(&x, &BatchNormParams::new(2)).is_err());
    }
}
