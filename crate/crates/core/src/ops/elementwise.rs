use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EwiseOp {
    Add,
    Mul,
}

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!("{op}: shape {} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn ewise<T: Real>(op: EwiseOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("ewise", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| match op {
            EwiseOp::Add => x + y,
            EwiseOp::Mul => x * y,
        })
        .collect();
    let out = Tensor::new(a.shape(), data)?;
    out.ensure_finite(match op {
        EwiseOp::Add => "add",
        EwiseOp::Mul => "mul",
    })?;
    Ok(out)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ewise(EwiseOp::Add, a, b)
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ewise(EwiseOp::Mul, a, b)
}

/// Gradients of `sum(g ⊙ (a ⊙ b))` w.r.t. `a` and `b`. (Addition passes `g`
/// through unchanged to both operands.)
pub fn mul_backward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, grad: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    same_shape("mul_backward", a, b)?;
    same_shape("mul_backward", a, grad)?;
    Ok((mul(grad, b)?, mul(grad, a)?))
}

pub fn scale<T: Real>(a: &Tensor<T>, k: f64) -> Tensor<T> {
    a.map(|v| T::cast(v.as_f64() * k))
}

/// Concatenate along the channel axis in argument order.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::config("concat_channels of an empty list"))?
        .shape();
    let mut c = 0;
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::config(format!("concat_channels: {} vs {}", s, first)));
        }
        c += s.c;
    }
    let plane = first.plane();
    let mut data = Vec::with_capacity(first.n * c * plane);
    for b in 0..first.n {
        for p in parts {
            let k = p.shape().c * plane;
            data.extend_from_slice(&p.data()[b * k..(b + 1) * k]);
        }
    }
    Tensor::new(first.with_c(c), data)
}

/// Backward of [`concat_channels`]: split along channels into `sizes`.
pub fn split_channels<T: Real>(t: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = t.shape();
    if sizes.iter().sum::<usize>() != s.c {
        return Err(Error::config(format!(
            "split_channels: sizes {:?} do not sum to {}",
            sizes, s.c
        )));
    }
    let plane = s.plane();
    let mut out: Vec<Vec<T>> = sizes.iter().map(|&k| Vec::with_capacity(s.n * k * plane)).collect();
    for b in 0..s.n {
        let mut c0 = 0;
        for (o, &k) in out.iter_mut().zip(sizes) {
            let start = (b * s.c + c0) * plane;
            o.extend_from_slice(&t.data()[start..start + k * plane]);
            c0 += k;
        }
    }
    out.into_iter()
        .zip(sizes)
        .map(|(d, &k)| Tensor::new(s.with_c(k), d))
        .collect()
}
