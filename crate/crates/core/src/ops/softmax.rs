use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Softmax along the channel axis, independently for every (n, h, w).
pub fn channel_softmax<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    let p = s.plane();
    let mut out = Tensor::zeros(s);
    let mut buf = vec![0.0f64; s.c];
    for b in 0..s.n {
        for i in 0..p {
            let mut mx = f64::NEG_INFINITY;
            for (c, v) in buf.iter_mut().enumerate() {
                *v = input.data()[(b * s.c + c) * p + i].as_f64();
                mx = mx.max(*v);
            }
            let mut z = 0.0;
            for v in buf.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for (c, v) in buf.iter().enumerate() {
                out.data_mut()[(b * s.c + c) * p + i] = T::cast(v / z);
            }
        }
    }
    out.ensure_finite("channel_softmax")?;
    Ok(out)
}

/// Gradient given the forward *output* `probs`: `p ⊙ (g − Σ_c g·p)`.
pub fn channel_softmax_backward<T: Real>(probs: &Tensor<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    let s = probs.shape();
    if grad_output.shape() != s {
        return Err(Error::config(format!(
            "channel_softmax_backward: probs {} vs grad {}",
            s,
            grad_output.shape()
        )));
    }
    let p = s.plane();
    let mut out = Tensor::zeros(s);
    for b in 0..s.n {
        for i in 0..p {
            let idx = |c: usize| (b * s.c + c) * p + i;
            let dot: f64 = (0..s.c)
                .map(|c| probs.data()[idx(c)].as_f64() * grad_output.data()[idx(c)].as_f64())
                .sum();
            for c in 0..s.c {
                let pc = probs.data()[idx(c)].as_f64();
                out.data_mut()[idx(c)] = T::cast(pc * (grad_output.data()[idx(c)].as_f64() - dot));
            }
        }
    }
    Ok(out)
}
