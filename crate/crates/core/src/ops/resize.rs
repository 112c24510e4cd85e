use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Source sample for one output coordinate: `(i0, i1, frac)`.
fn axis_taps(in_len: usize, out_len: usize, align_corners: bool) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|d| {
            let src = if align_corners {
                if out_len == 1 {
                    0.0
                } else {
                    d as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
                }
            } else {
                ((d as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0)
            };
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear interpolation of every (h, w) plane. With `align_corners=false`
/// pixel centers sit at half-integer coordinates.
pub fn bilinear_resize<T: Real>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    align_corners: bool,
) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("bilinear_resize: output dims must be >= 1"));
    }
    let s = input.shape();
    let ys = axis_taps(s.h, out_h, align_corners);
    let xs = axis_taps(s.w, out_w, align_corners);
    let os = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Tensor::zeros(os);
    for b in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(b, c);
            let dst = out.plane_mut(b, c);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[y0 * s.w + x0].as_f64() * (1.0 - fx) + src[y0 * s.w + x1].as_f64() * fx;
                    let bot = src[y1 * s.w + x0].as_f64() * (1.0 - fx) + src[y1 * s.w + x1].as_f64() * fx;
                    dst[oy * out_w + ox] = T::cast(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    out.ensure_finite("bilinear_resize")?;
    Ok(out)
}

/// Adjoint of [`bilinear_resize`]: scatters the output gradient back onto the
/// `(in_h, in_w)` grid.
pub fn bilinear_resize_backward<T: Real>(
    grad_output: &Tensor<T>,
    in_h: usize,
    in_w: usize,
    align_corners: bool,
) -> Result<Tensor<T>> {
    if in_h == 0 || in_w == 0 {
        return Err(Error::config("bilinear_resize_backward: input dims must be >= 1"));
    }
    let s = grad_output.shape();
    let ys = axis_taps(in_h, s.h, align_corners);
    let xs = axis_taps(in_w, s.w, align_corners);
    let is = Shape::new(s.n, s.c, in_h, in_w);
    let mut gin = Tensor::zeros(is);
    let mut acc = vec![0.0f64; in_h * in_w];
    for b in 0..s.n {
        for c in 0..s.c {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let g = grad_output.plane(b, c);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let v = g[oy * s.w + ox].as_f64();
                    acc[y0 * in_w + x0] += v * (1.0 - fy) * (1.0 - fx);
                    acc[y0 * in_w + x1] += v * (1.0 - fy) * fx;
                    acc[y1 * in_w + x0] += v * fy * (1.0 - fx);
                    acc[y1 * in_w + x1] += v * fy * fx;
                }
            }
            for (d, a) in gin.plane_mut(b, c).iter_mut().zip(&acc) {
                *d = T::cast(*a);
            }
        }
    }
    Ok(gin)
}
