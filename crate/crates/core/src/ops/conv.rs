//! 2-D cross-correlation (the deep-learning "convolution") with zero padding
//! and channel groups, plus its reverse-mode gradient.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T: Real = f32> {
    /// (c_out, c_in / groups, k_h, k_w)
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl<T: Real> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Vec<T>>) -> Self {
        ConvParams {
            weight,
            bias,
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn with_padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape().h, self.weight.shape().w)
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.weight.shape().c == 1 && self.groups == self.out_channels()
    }

    pub fn validate(&self) -> Result<()> {
        let cout = self.out_channels();
        if self.groups == 0 || !cout.is_multiple_of(self.groups) {
            return Err(Error::config(format!(
                "conv: c_out {cout} not divisible by groups {}",
                self.groups
            )));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::config("conv: stride must be >= 1"));
        }
        if let Some(b) = &self.bias {
            if b.len() != cout {
                return Err(Error::config(format!(
                    "conv: bias length {} != c_out {cout}",
                    b.len()
                )));
            }
        }
        Ok(())
    }

    /// Output spatial dims for an (h, w) input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let (ph, pw) = self.padding;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::config(format!(
                "conv: input {h}x{w} with padding ({ph}, {pw}) smaller than kernel {kh}x{kw}"
            )));
        }
        Ok((
            (h + 2 * ph - kh) / self.stride.0 + 1,
            (w + 2 * pw - kw) / self.stride.1 + 1,
        ))
    }

    fn check_input(&self, s: Shape) -> Result<(usize, usize)> {
        self.validate()?;
        if s.c != self.in_channels() {
            return Err(Error::config(format!(
                "conv: input has {} channels, weight {} with groups {} expects {}",
                s.c,
                self.weight.shape(),
                self.groups,
                self.in_channels()
            )));
        }
        self.output_dims(s.h, s.w)
    }
}

pub struct ConvGrads<T: Real> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

/// Output positions `o` in `[lo, hi)` whose input index `o*stride + k - pad`
/// falls inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, stride: usize, k: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad <= k {
        0
    } else {
        ((len - 1 + pad - k) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

struct Geometry {
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl Geometry {
    fn new<T: Real>(p: &ConvParams<T>, s: Shape, ho: usize, wo: usize) -> Self {
        let (kh, kw) = p.kernel();
        Geometry {
            h: s.h,
            w: s.w,
            ho,
            wo,
            kh,
            kw,
            sh: p.stride.0,
            sw: p.stride.1,
            ph: p.padding.0,
            pw: p.padding.1,
        }
    }

    /// acc[oy, ox] += wv * input[oy*sh + ky - ph, ox*sw + kx - pw]
    #[inline]
    fn gather<T: Real>(&self, acc: &mut [f64], input: &[T], ky: usize, kx: usize, wv: f64) {
        let (y0, y1) = valid_range(self.ho, self.sh, ky, self.ph, self.h);
        let (x0, x1) = valid_range(self.wo, self.sw, kx, self.pw, self.w);
        if x0 >= x1 {
            return;
        }
        for oy in y0..y1 {
            let iy = oy * self.sh + ky - self.ph;
            let row = &input[iy * self.w..(iy + 1) * self.w];
            let arow = &mut acc[oy * self.wo + x0..oy * self.wo + x1];
            if self.sw == 1 {
                let ix0 = x0 + kx - self.pw;
                for (a, &x) in arow.iter_mut().zip(&row[ix0..ix0 + (x1 - x0)]) {
                    *a += wv * x.as_f64();
                }
            } else {
                for (j, a) in arow.iter_mut().enumerate() {
                    *a += wv * row[(x0 + j) * self.sw + kx - self.pw].as_f64();
                }
            }
        }
    }

    /// acc[oy*sh + ky - ph, ox*sw + kx - pw] += wv * grad[oy, ox]
    #[inline]
    fn scatter<T: Real>(&self, acc: &mut [f64], grad: &[T], ky: usize, kx: usize, wv: f64) {
        let (y0, y1) = valid_range(self.ho, self.sh, ky, self.ph, self.h);
        let (x0, x1) = valid_range(self.wo, self.sw, kx, self.pw, self.w);
        if x0 >= x1 {
            return;
        }
        for oy in y0..y1 {
            let iy = oy * self.sh + ky - self.ph;
            let grow = &grad[oy * self.wo + x0..oy * self.wo + x1];
            let arow = &mut acc[iy * self.w..(iy + 1) * self.w];
            if self.sw == 1 {
                let ix0 = x0 + kx - self.pw;
                for (a, &g) in arow[ix0..ix0 + (x1 - x0)].iter_mut().zip(grow) {
                    *a += wv * g.as_f64();
                }
            } else {
                for (j, &g) in grow.iter().enumerate() {
                    arow[(x0 + j) * self.sw + kx - self.pw] += wv * g.as_f64();
                }
            }
        }
    }

    /// sum over valid (oy, ox) of grad[oy, ox] * input[iy, ix]
    #[inline]
    fn correlate<T: Real>(&self, grad: &[T], input: &[T], ky: usize, kx: usize) -> f64 {
        let (y0, y1) = valid_range(self.ho, self.sh, ky, self.ph, self.h);
        let (x0, x1) = valid_range(self.wo, self.sw, kx, self.pw, self.w);
        let mut s = 0.0;
        for oy in y0..y1 {
            let iy = oy * self.sh + ky - self.ph;
            let row = &input[iy * self.w..(iy + 1) * self.w];
            for ox in x0..x1 {
                s += grad[oy * self.wo + ox].as_f64() * row[ox * self.sw + kx - self.pw].as_f64();
            }
        }
        s
    }
}

pub fn conv2d<T: Real>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    let (ho, wo) = params.check_input(s)?;
    input.ensure_finite("conv2d input")?;
    let geo = Geometry::new(params, s, ho, wo);
    let cout = params.out_channels();
    let cin_g = params.weight.shape().c;
    let cout_g = cout / params.groups;
    let ksz = geo.kh * geo.kw;
    let wdata = params.weight.data();
    let out_shape = Shape::new(s.n, cout, ho, wo);
    let mut out = vec![T::zero(); out_shape.numel()];

    out.par_chunks_mut(ho * wo).enumerate().for_each(|(idx, plane)| {
        let (b, co) = (idx / cout, idx % cout);
        let g = co / cout_g;
        let b0 = params.bias.as_ref().map_or(0.0, |bv| bv[co].as_f64());
        let mut acc = vec![b0; ho * wo];
        for cil in 0..cin_g {
            let inp = input.plane(b, g * cin_g + cil);
            let wk = &wdata[(co * cin_g + cil) * ksz..(co * cin_g + cil + 1) * ksz];
            for ky in 0..geo.kh {
                for kx in 0..geo.kw {
                    let wv = wk[ky * geo.kw + kx].as_f64();
                    if wv != 0.0 {
                        geo.gather(&mut acc, inp, ky, kx, wv);
                    }
                }
            }
        }
        for (o, a) in plane.iter_mut().zip(acc) {
            *o = T::cast(a);
        }
    });
    let out = Tensor::from_parts(out_shape, out);
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// Gradients of `sum(grad_output ⊙ conv2d(input, params))`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    grad_output: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let s = input.shape();
    let (ho, wo) = params.check_input(s)?;
    let cout = params.out_channels();
    let expected = Shape::new(s.n, cout, ho, wo);
    if grad_output.shape() != expected {
        return Err(Error::config(format!(
            "conv2d_backward: grad_output {} but output is {expected}",
            grad_output.shape()
        )));
    }
    let geo = Geometry::new(params, s, ho, wo);
    let cin_g = params.weight.shape().c;
    let cout_g = cout / params.groups;
    let ksz = geo.kh * geo.kw;
    let wdata = params.weight.data();

    let mut gin = vec![T::zero(); s.numel()];
    gin.par_chunks_mut(s.plane()).enumerate().for_each(|(idx, plane)| {
        let (b, ci) = (idx / s.c, idx % s.c);
        let (g, cil) = (ci / cin_g, ci % cin_g);
        let mut acc = vec![0.0f64; s.plane()];
        for col in 0..cout_g {
            let co = g * cout_g + col;
            let go = grad_output.plane(b, co);
            let wk = &wdata[(co * cin_g + cil) * ksz..(co * cin_g + cil + 1) * ksz];
            for ky in 0..geo.kh {
                for kx in 0..geo.kw {
                    let wv = wk[ky * geo.kw + kx].as_f64();
                    if wv != 0.0 {
                        geo.scatter(&mut acc, go, ky, kx, wv);
                    }
                }
            }
        }
        for (o, a) in plane.iter_mut().zip(acc) {
            *o = T::cast(a);
        }
    });

    let mut gw = vec![T::zero(); params.weight.numel()];
    gw.par_chunks_mut(cin_g * ksz).enumerate().for_each(|(co, wk)| {
        let g = co / cout_g;
        for cil in 0..cin_g {
            for ky in 0..geo.kh {
                for kx in 0..geo.kw {
                    let mut acc = 0.0;
                    for b in 0..s.n {
                        acc += geo.correlate(
                            grad_output.plane(b, co),
                            input.plane(b, g * cin_g + cil),
                            ky,
                            kx,
                        );
                    }
                    wk[cil * ksz + ky * geo.kw + kx] = T::cast(acc);
                }
            }
        }
    });

    let gb = (0..cout)
        .map(|co| {
            let acc: f64 = (0..s.n)
                .map(|b| grad_output.plane(b, co).iter().map(|v| v.as_f64()).sum::<f64>())
                .sum();
            T::cast(acc)
        })
        .collect();

    Ok(ConvGrads {
        input: Tensor::from_parts(s, gin),
        weight: Tensor::from_parts(params.weight.shape(), gw),
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: Shape, scale: f64) -> Tensor<f64> {
        let mut k = 0u64;
        Tensor::from_fn(shape, |_, _, _, _| {
            k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((k >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * scale
        })
    }

    /// Straight six-loop direct summation.
    fn oracle(x: &Tensor<f64>, p: &ConvParams<f64>) -> Tensor<f64> {
        let s = x.shape();
        let (ho, wo) = p.output_dims(s.h, s.w).unwrap();
        let ws = p.weight.shape();
        let cout_g = ws.n / p.groups;
        Tensor::from_fn(Shape::new(s.n, ws.n, ho, wo), |b, co, oy, ox| {
            let g = co / cout_g;
            let mut acc = p.bias.as_ref().map_or(0.0, |v| v[co]);
            for cil in 0..ws.c {
                for ky in 0..ws.h {
                    for kx in 0..ws.w {
                        let iy = (oy * p.stride.0 + ky) as isize - p.padding.0 as isize;
                        let ix = (ox * p.stride.1 + kx) as isize - p.padding.1 as isize;
                        if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                            continue;
                        }
                        acc += p.weight.at(co, cil, ky, kx)
                            * x.at(b, g * ws.c + cil, iy as usize, ix as usize);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::<f32>::full(Shape::new(1, 1, 3, 3), 1.0);
        let mut w = Tensor::zeros(Shape::new(1, 1, 3, 3));
        w.set(0, 0, 1, 1, 1.0);
        let y = conv2d(&x, &ConvParams::new(w, None).with_padding(1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let x = seq(Shape::new(2, 3, 5, 4), 2.0).cast::<f32>();
        let w = Tensor::zeros(Shape::new(4, 3, 3, 3));
        let y = conv2d(&x, &ConvParams::new(w, None).with_padding(1, 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn strided_matches_direct_sum() {
        let x = seq(Shape::new(1, 2, 4, 4), 2.0);
        let w = seq(Shape::new(3, 2, 3, 3), 1.0);
        let p = ConvParams::new(w, Some(vec![0.1, -0.2, 0.3]))
            .with_stride(2)
            .with_padding(1, 1);
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 2, 2));
        let want = oracle(&x, &p);
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn strip_kernels_preserve_spatial_dims() {
        let x = seq(Shape::new(1, 3, 9, 13), 1.0);
        for k in [7usize, 11, 21] {
            let v = ConvParams::new(seq(Shape::new(3, 1, k, 1), 1.0), None)
                .with_groups(3)
                .with_padding((k - 1) / 2, 0);
            let hz = ConvParams::new(seq(Shape::new(3, 1, 1, k), 1.0), None)
                .with_groups(3)
                .with_padding(0, (k - 1) / 2);
            assert_eq!(conv2d(&x, &v).unwrap().shape(), x.shape());
            assert_eq!(conv2d(&x, &hz).unwrap().shape(), x.shape());
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_non_finite_input() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let p = ConvParams::new(Tensor::zeros(Shape::new(1, 3, 1, 1)), None);
        assert!(matches!(conv2d(&x, &p), Err(Error::Config(_))));
        let mut x = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        x.set(0, 1, 2, 2, f32::NAN);
        assert!(matches!(conv2d(&x, &p), Err(Error::Numeric(_))));
    }

    #[test]
    fn zero_grad_output_gives_zero_gradients() {
        let x = seq(Shape::new(1, 2, 5, 5), 1.0);
        let p = ConvParams::new(seq(Shape::new(3, 2, 3, 3), 1.0), Some(vec![0.0; 3]))
            .with_padding(1, 1);
        let g = conv2d_backward(&x, &p, &Tensor::zeros(Shape::new(1, 3, 5, 5))).unwrap();
        assert_eq!(g.input.max_abs(), 0.0);
        assert_eq!(g.weight.max_abs(), 0.0);
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_single_pixel_closed_form() {
        // out_o = sum_i w[o,i] x_i  =>  dW[o,i] = g_o x_i, dx_i = sum_o w[o,i] g_o
        let x = Tensor::new(Shape::new(1, 2, 1, 1), vec![2.0f64, -3.0]).unwrap();
        let w = Tensor::new(Shape::new(3, 2, 1, 1), vec![1.0, 0.5, -1.0, 2.0, 0.25, 4.0]).unwrap();
        let go = Tensor::new(Shape::new(1, 3, 1, 1), vec![1.0, -2.0, 0.5]).unwrap();
        let g = conv2d_backward(&x, &ConvParams::new(w, Some(vec![0.0; 3])), &go).unwrap();
        assert_eq!(g.weight.data(), &[2.0, -3.0, -4.0, 6.0, 1.0, -1.5]);
        assert_eq!(g.input.data(), &[1.0 + 2.0 + 0.125, 0.5 - 4.0 + 2.0]);
        assert_eq!(g.bias, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn backward_rejects_wrong_grad_shape() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 4, 4));
        let p = ConvParams::new(Tensor::zeros(Shape::new(1, 1, 3, 3)), None);
        let bad = Tensor::zeros(Shape::new(1, 1, 4, 4));
        assert!(conv2d_backward(&x, &p, &bad).is_err());
    }
}
