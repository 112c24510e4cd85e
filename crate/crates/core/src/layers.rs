//! Stateful layer wrappers over [`crate::ops`]: parameters, accumulated
//! gradients and a uniform visitor for checkpointing and optimization.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::ops::{self, BatchNormCache, BatchNormParams, ConvParams};
use crate::tensor::{Real, Shape, Tensor};

/// Read-only view of one named tensor.
pub struct ParamView<'a, T> {
    pub name: &'a str,
    pub dims: Vec<usize>,
    pub value: &'a [T],
    /// False for buffers such as batch-norm running statistics.
    pub trainable: bool,
}

/// Mutable view of one named tensor and, for trainable ones, its gradient.
pub struct ParamMut<'a, T> {
    pub name: &'a str,
    pub dims: Vec<usize>,
    pub value: &'a mut [T],
    pub grad: Option<&'a mut [T]>,
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything that owns named tensors.
pub trait Module<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>));

    /// Number of trainable scalars.
    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |p| {
            if p.trainable {
                n += p.value.len()
            }
        });
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |p| {
            if let Some(g) = p.grad {
                g.iter_mut().for_each(|v| *v = T::zero());
            }
        });
    }
}

/// He-normal (fan-in) initialization.
pub(crate) fn he_normal<T: Real, R: Rng>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_, _, _, _| T::cast(dist.sample(rng)))
}

pub(crate) fn accumulate<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, k: usize) -> Self {
        ConvSpec {
            c_in,
            c_out,
            kernel: (k, k),
            stride: 1,
            groups: 1,
            bias: false,
        }
    }

    pub fn depthwise(c: usize, kh: usize, kw: usize) -> Self {
        ConvSpec {
            c_in: c,
            c_out: c,
            kernel: (kh, kw),
            stride: 1,
            groups: c,
            bias: false,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn bias(mut self) -> Self {
        self.bias = true;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Real> {
    pub params: ConvParams<T>,
    grad_weight: Vec<T>,
    grad_bias: Option<Vec<T>>,
}

impl<T: Real> Conv2d<T> {
    /// "Same" padding for odd kernels.
    pub fn new<R: Rng>(spec: ConvSpec, rng: &mut R) -> Self {
        let (kh, kw) = spec.kernel;
        let cin_g = spec.c_in / spec.groups;
        let weight = he_normal(Shape::new(spec.c_out, cin_g, kh, kw), cin_g * kh * kw, rng);
        let bias = spec.bias.then(|| vec![T::zero(); spec.c_out]);
        let params = ConvParams::new(weight, bias)
            .with_stride(spec.stride)
            .with_padding((kh - 1) / 2, (kw - 1) / 2)
            .with_groups(spec.groups);
        Self::from_params(params)
    }

    pub fn from_params(params: ConvParams<T>) -> Self {
        Conv2d {
            grad_weight: vec![T::zero(); params.weight.numel()],
            grad_bias: params.bias.as_ref().map(|b| vec![T::zero(); b.len()]),
            params,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d(x, &self.params)
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = ops::conv2d_backward(x, &self.params, grad)?;
        accumulate(&mut self.grad_weight, g.weight.data());
        if let Some(gb) = &mut self.grad_bias {
            accumulate(gb, &g.bias);
        }
        Ok(g.input)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, T>)) {
        let name = join(prefix, "weight");
        f(ParamView {
            name: &name,
            dims: self.params.weight.shape().dims().to_vec(),
            value: self.params.weight.data(),
            trainable: true,
        });
        if let Some(b) = &self.params.bias {
            let name = join(prefix, "bias");
            f(ParamView {
                name: &name,
                dims: vec![b.len()],
                value: b,
                trainable: true,
            });
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        let name = join(prefix, "weight");
        let dims = self.params.weight.shape().dims().to_vec();
        f(ParamMut {
            name: &name,
            dims,
            value: self.params.weight.data_mut(),
            grad: Some(&mut self.grad_weight),
        });
        if let (Some(b), Some(gb)) = (&mut self.params.bias, &mut self.grad_bias) {
            let name = join(prefix, "bias");
            f(ParamMut {
                name: &name,
                dims: vec![b.len()],
                value: b,
                grad: Some(gb),
            });
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Real> {
    pub params: BatchNormParams<T>,
    grad_gamma: Vec<T>,
    grad_beta: Vec<T>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            params: BatchNormParams::new(channels),
            grad_gamma: vec![T::zero(); channels],
            grad_beta: vec![T::zero(); channels],
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::batch_norm_eval(x, &self.params)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        ops::batch_norm_train(x, &mut self.params)
    }

    pub fn backward(&mut self, cache: &BatchNormCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = ops::batch_norm_backward(cache, &self.params, grad)?;
        accumulate(&mut self.grad_gamma, &g.gamma);
        accumulate(&mut self.grad_beta, &g.beta);
        Ok(g.input)
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, T>)) {
        let p = &self.params;
        for (name, v, trainable) in [
            ("gamma", &p.gamma, true),
            ("beta", &p.beta, true),
            ("running_mean", &p.running_mean, false),
            ("running_var", &p.running_var, false),
        ] {
            let name = join(prefix, name);
            f(ParamView {
                name: &name,
                dims: vec![v.len()],
                value: v,
                trainable,
            });
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        let c = self.params.channels();
        let p = &mut self.params;
        let name = join(prefix, "gamma");
        f(ParamMut { name: &name, dims: vec![c], value: &mut p.gamma, grad: Some(&mut self.grad_gamma) });
        let name = join(prefix, "beta");
        f(ParamMut { name: &name, dims: vec![c], value: &mut p.beta, grad: Some(&mut self.grad_beta) });
        let name = join(prefix, "running_mean");
        f(ParamMut { name: &name, dims: vec![c], value: &mut p.running_mean, grad: None });
        let name = join(prefix, "running_var");
        f(ParamMut { name: &name, dims: vec![c], value: &mut p.running_var, grad: None });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu6,
}

/// Convolution → batch norm → optional ReLU6.
#[derive(Clone, Debug)]
pub struct ConvBn<T: Real> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub act: Activation,
}

pub struct ConvBnCache<T: Real> {
    input: Tensor<T>,
    conv_out_shape: Shape,
    bn: BatchNormCache<T>,
    pre_act: Option<Tensor<T>>,
}

impl<T: Real> ConvBn<T> {
    pub fn new<R: Rng>(spec: ConvSpec, act: Activation, rng: &mut R) -> Self {
        ConvBn {
            conv: Conv2d::new(spec, rng),
            bn: BatchNorm2d::new(spec.c_out),
            act,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.bn.forward(&self.conv.forward(x)?)?;
        match self.act {
            Activation::None => Ok(y),
            Activation::Relu6 => ops::relu6(&y),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvBnCache<T>)> {
        let c = self.conv.forward(x)?;
        let conv_out_shape = c.shape();
        let (y, bn) = self.bn.forward_train(&c)?;
        let (out, pre_act) = match self.act {
            Activation::None => (y, None),
            Activation::Relu6 => (ops::relu6(&y)?, Some(y)),
        };
        Ok((
            out,
            ConvBnCache {
                input: x.clone(),
                conv_out_shape,
                bn,
                pre_act,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ConvBnCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        debug_assert_eq!(grad.shape(), cache.conv_out_shape);
        let g = match &cache.pre_act {
            Some(pre) => ops::relu6_backward(pre, grad)?,
            None => grad.clone(),
        };
        let g = self.bn.backward(&cache.bn, &g)?;
        self.conv.backward(&cache.input, &g)
    }
}

impl<T: Real> Module<T> for ConvBn<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}
