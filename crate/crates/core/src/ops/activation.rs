use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub fn relu6<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let six = T::cast(6.0);
    let y = input.map(|v| v.max(T::zero()).min(six));
    y.ensure_finite("relu6")?;
    Ok(y)
}

/// Passes the gradient only where `0 < x < 6`.
pub fn relu6_backward<T: Real>(input: &Tensor<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_output.shape() {
        return Err(Error::config(format!(
            "relu6_backward: input {} vs grad {}",
            input.shape(),
            grad_output.shape()
        )));
    }
    let six = T::cast(6.0);
    let data = input
        .data()
        .iter()
        .zip(grad_output.data())
        .map(|(&x, &g)| if x > T::zero() && x < six { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn clamps_to_zero_six() {
        let x = Tensor::new(Shape::new(1, 1, 1, 3), vec![7.0f32, -1.0, 3.5]).unwrap();
        assert_eq!(relu6(&x).unwrap().data(), &[6.0, 0.0, 3.5]);
    }

    #[test]
    fn gradient_mask() {
        let x = Tensor::new(Shape::new(1, 1, 1, 4), vec![7.0f32, -1.0, 3.5, 0.0]).unwrap();
        let g = Tensor::full(x.shape(), 2.0);
        assert_eq!(relu6_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 2.0, 0.0]);
    }
}
