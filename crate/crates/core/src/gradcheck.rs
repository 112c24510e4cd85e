//! Central finite-difference checks of every backward pass, run in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::aggregation::{InvertedResidual, Msca};
use crate::backbone::BackboneConfig;
use crate::cost_volume::{build_correlation_volume, correlation_backward};
use crate::error::Result;
use crate::layers::{BatchNorm2d, Conv2d, ConvSpec, Module, ParamMut, ParamView};
use crate::model::{Model, ModelConfig, Variant};
use crate::ops;
use crate::regression::{soft_argmax, soft_argmax_backward, upsample_disparity_backward, upsample_disparity_tensor};
use crate::tensor::{Shape, Tensor};
use crate::training::smooth_l1_with_grad;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
    /// Tensor and flat index of the worst entry.
    pub worst: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// `max_i |a−n| / max(|a|, |n|, 1e-3·max(‖a‖∞, ‖n‖∞))`; the floor keeps
/// entries that are tiny relative to the rest from dominating.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    relative_errors(analytic, numeric).into_iter().fold(0.0, f64::max)
}

fn relative_errors(analytic: &[f64], numeric: &[f64]) -> Vec<f64> {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .collect()
}

pub fn random_tensor(shape: Shape, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| StandardNormal.sample(rng))
}

fn pick(len: usize, limit: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len <= limit {
        (0..len).collect()
    } else {
        rand::seq::index::sample(rng, len, limit).into_vec()
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Parameter-free wrapper for checking plain functions.
struct NoParams;

impl Module<f64> for NoParams {
    fn visit(&self, _: &str, _: &mut dyn FnMut(ParamView<'_, f64>)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(ParamMut<'_, f64>)) {}
}

/// Checks `L = Σ r ⊙ forward(m, x)` for a fixed random `r`. `backward`
/// must run a training forward pass and backward with `r`, accumulating
/// parameter gradients and returning input gradients (one per input, or an
/// empty vector to skip inputs). Up to `limit` entries per tensor are probed.
pub struct Checker {
    pub step: f64,
    pub limit: usize,
    rng: ChaCha8Rng,
}

impl Checker {
    pub fn new(seed: u64) -> Self {
        Checker {
            step: 1e-5,
            limit: 24,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn check<M: Module<f64>>(
        &mut self,
        name: &str,
        m: &mut M,
        inputs: &[Tensor<f64>],
        forward: impl Fn(&mut M, &[Tensor<f64>]) -> Result<Tensor<f64>>,
        backward: impl Fn(&mut M, &[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>>,
    ) -> Result<CheckResult> {
        let out = forward(m, inputs)?;
        let r = random_tensor(out.shape(), &mut self.rng);
        m.zero_grad();
        let g_inputs = backward(m, inputs, &r)?;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let mut labels = Vec::new();
        let h = self.step;

        let mut xs = inputs.to_vec();
        for (k, g) in g_inputs.iter().enumerate() {
            for i in pick(g.numel(), self.limit, &mut self.rng) {
                let orig = xs[k].data()[i];
                xs[k].data_mut()[i] = orig + h;
                let up = dot(&forward(m, &xs)?, &r);
                xs[k].data_mut()[i] = orig - h;
                let down = dot(&forward(m, &xs)?, &r);
                xs[k].data_mut()[i] = orig;
                analytic.push(g.data()[i]);
                numeric.push((up - down) / (2.0 * h));
                labels.push(format!("input{k}[{i}]"));
            }
        }

        // snapshot parameter gradients, then probe the parameters by index
        let mut params: Vec<(String, Vec<f64>)> = Vec::new();
        m.visit_mut("", &mut |p| {
            if let Some(g) = p.grad {
                params.push((p.name.to_string(), g.to_vec()));
            }
        });
        for (k, (pname, grad)) in params.iter().enumerate() {
            for i in pick(grad.len(), self.limit, &mut self.rng) {
                let eval = |delta: f64, m: &mut M| -> Result<f64> {
                    set_param(m, k, i, delta);
                    let v = dot(&forward(m, inputs)?, &r);
                    set_param(m, k, i, -delta);
                    Ok(v)
                };
                let up = eval(h, m)?;
                let down = eval(-h, m)?;
                analytic.push(grad[i]);
                numeric.push((up - down) / (2.0 * h));
                labels.push(format!("{pname}[{i}]"));
            }
        }
        let errors = relative_errors(&analytic, &numeric);
        let (worst_i, max_rel_error) = errors
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
        if std::env::var_os("LIGHTSTEREO_GRADCHECK_TRACE").is_some() {
            for (i, e) in errors.iter().enumerate().filter(|(_, e)| **e >= TOLERANCE) {
                eprintln!("{name}: {} analytic {:.6e} numeric {:.6e} rel {e:.2e}", labels[i], analytic[i], numeric[i]);
            }
        }
        Ok(CheckResult {
            name: name.to_string(),
            max_rel_error,
            entries: analytic.len(),
            worst: labels.get(worst_i).cloned().unwrap_or_default(),
        })
    }
}

fn set_param<M: Module<f64>>(m: &mut M, k: usize, i: usize, delta: f64) {
    let mut idx = 0;
    m.visit_mut("", &mut |p| {
        if p.grad.is_some() {
            if idx == k {
                p.value[i] += delta;
            }
            idx += 1;
        }
    });
}

fn conv_case(c: &mut Checker, name: &str, spec: ConvSpec, input: Shape) -> Result<CheckResult> {
    let mut layer: Conv2d<f64> = Conv2d::new(spec, &mut c.rng);
    if let Some(b) = &mut layer.params.bias {
        b.iter_mut().for_each(|v| *v = 0.1);
    }
    let x = random_tensor(input, &mut c.rng);
    c.check(
        name,
        &mut layer,
        &[x],
        |m, xs| m.forward(&xs[0]),
        |m, xs, r| Ok(vec![m.backward(&xs[0], r)?]),
    )
}

/// Inputs are kept away from the ReLU6 kinks so the central difference is
/// never taken across one.
fn away_from_kinks(shape: Shape, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let v: f64 = rng.random_range(-1.0..7.0);
        if v.abs() < 0.05 || (v - 6.0).abs() < 0.05 {
            v + 0.2
        } else {
            v
        }
    })
}

/// Tiny end-to-end network: one aggregation block per scale, reduced
/// backbone, D = 16.
pub fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::new(Variant::Custom, 16).with_backbone(BackboneConfig {
        input_channels: 3,
        stem_channels: 4,
        stem_depth: 1,
        stage_channels: [4, 6, 8, 8],
        stage_block_counts: [1, 1, 1, 1],
        expansion: 2,
        decoder_channels: [6, 6, 4],
    });
    cfg.aggregation.blocks = [1, 1, 1];
    cfg.aggregation.expansion = [2, 2, 2];
    cfg
}

/// Runs the whole suite; each entry is one op or module.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut c = Checker::new(seed);
    let mut out = Vec::new();

    out.push(conv_case(&mut c, "conv2d", ConvSpec::new(3, 4, 3).bias(), Shape::new(2, 3, 5, 6))?);
    out.push(conv_case(&mut c, "conv2d_strided", ConvSpec::new(2, 3, 3).stride(2).bias(), Shape::new(2, 2, 6, 5))?);
    out.push(conv_case(&mut c, "conv2d_depthwise", ConvSpec::depthwise(4, 3, 3).bias(), Shape::new(2, 4, 6, 6))?);
    out.push(conv_case(&mut c, "conv2d_depthwise_strided", ConvSpec::depthwise(3, 3, 3).stride(2), Shape::new(1, 3, 7, 6))?);
    out.push(conv_case(&mut c, "conv2d_strip_vertical", ConvSpec::depthwise(2, 7, 1).bias(), Shape::new(2, 2, 6, 6))?);
    out.push(conv_case(&mut c, "conv2d_strip_horizontal", ConvSpec::depthwise(2, 1, 11).bias(), Shape::new(1, 2, 4, 6))?);
    out.push(conv_case(&mut c, "conv2d_pointwise", ConvSpec::new(4, 3, 1), Shape::new(2, 4, 3, 3))?);

    {
        let mut bn: BatchNorm2d<f64> = BatchNorm2d::new(3);
        bn.params.gamma = vec![1.3, -0.7, 0.4];
        bn.params.beta = vec![0.1, 0.0, -0.2];
        let x = random_tensor(Shape::new(2, 3, 4, 5), &mut c.rng);
        out.push(c.check(
            "batch_norm_train",
            &mut bn,
            &[x],
            |m, xs| Ok(m.forward_train(&xs[0])?.0),
            |m, xs, r| {
                let (_, cache) = m.forward_train(&xs[0])?;
                Ok(vec![m.backward(&cache, r)?])
            },
        )?);
    }

    let x = away_from_kinks(Shape::new(2, 3, 4, 4), &mut c.rng);
    out.push(c.check(
        "relu6",
        &mut NoParams,
        &[x],
        |_, xs| ops::relu6(&xs[0]),
        |_, xs, r| Ok(vec![ops::relu6_backward(&xs[0], r)?]),
    )?);

    let x = random_tensor(Shape::new(2, 3, 3, 5), &mut c.rng);
    out.push(c.check(
        "bilinear_resize_up",
        &mut NoParams,
        &[x],
        |_, xs| ops::bilinear_resize(&xs[0], 7, 10, false),
        |_, _, r| Ok(vec![ops::bilinear_resize_backward(r, 3, 5, false)?]),
    )?);
    let x = random_tensor(Shape::new(1, 2, 6, 6), &mut c.rng);
    out.push(c.check(
        "bilinear_resize_down_aligned",
        &mut NoParams,
        &[x],
        |_, xs| ops::bilinear_resize(&xs[0], 4, 3, true),
        |_, _, r| Ok(vec![ops::bilinear_resize_backward(r, 6, 6, true)?]),
    )?);

    let x = random_tensor(Shape::new(2, 5, 3, 3), &mut c.rng);
    out.push(c.check(
        "channel_softmax",
        &mut NoParams,
        &[x],
        |_, xs| ops::channel_softmax(&xs[0]),
        |_, xs, r| Ok(vec![ops::channel_softmax_backward(&ops::channel_softmax(&xs[0])?, r)?]),
    )?);

    let s = Shape::new(2, 3, 3, 4);
    let (a, b) = (random_tensor(s, &mut c.rng), random_tensor(s, &mut c.rng));
    out.push(c.check(
        "add",
        &mut NoParams,
        &[a.clone(), b.clone()],
        |_, xs| ops::add(&xs[0], &xs[1]),
        |_, _, r| Ok(vec![r.clone(), r.clone()]),
    )?);
    out.push(c.check(
        "mul",
        &mut NoParams,
        &[a.clone(), b.clone()],
        |_, xs| ops::mul(&xs[0], &xs[1]),
        |_, xs, r| {
            let (ga, gb) = ops::mul_backward(&xs[0], &xs[1], r)?;
            Ok(vec![ga, gb])
        },
    )?);
    let b2 = random_tensor(Shape::new(2, 2, 3, 4), &mut c.rng);
    out.push(c.check(
        "concat_channels",
        &mut NoParams,
        &[a, b2],
        |_, xs| ops::concat_channels(&[&xs[0], &xs[1]]),
        |_, _, r| ops::split_channels(r, &[3, 2]),
    )?);

    let s = Shape::new(2, 3, 3, 7);
    let (l, r0) = (random_tensor(s, &mut c.rng), random_tensor(s, &mut c.rng));
    out.push(c.check(
        "correlation_volume",
        &mut NoParams,
        &[l, r0],
        |_, xs| Ok(build_correlation_volume(&xs[0], &xs[1], 16)?.data),
        |_, xs, r| {
            let (gl, gr) = correlation_backward(&xs[0], &xs[1], r)?;
            Ok(vec![gl, gr])
        },
    )?);

    let x = random_tensor(Shape::new(2, 6, 3, 4), &mut c.rng);
    out.push(c.check(
        "soft_argmax",
        &mut NoParams,
        &[x],
        |_, xs| soft_argmax(&xs[0]),
        |_, xs, r| Ok(vec![soft_argmax_backward(&xs[0], r)?]),
    )?);

    let x = random_tensor(Shape::new(2, 1, 3, 4), &mut c.rng);
    out.push(c.check(
        "upsample_disparity",
        &mut NoParams,
        &[x],
        |_, xs| upsample_disparity_tensor(&xs[0], 12, 16),
        |_, _, r| Ok(vec![upsample_disparity_backward(r, 3, 4)?]),
    )?);

    {
        // r-weighted loss is not what we want here: check dL/dpred directly
        let s = Shape::new(1, 1, 4, 5);
        let pred = random_tensor(s, &mut c.rng).map(|v| v * 2.0);
        let gt: Vec<f32> = (0..s.numel()).map(|i| (i % 3) as f32 * 0.7).collect();
        let valid: Vec<bool> = (0..s.numel()).map(|i| i % 4 != 0).collect();
        // keep |pred − gt| away from the kink at 1
        let pred = Tensor::from_fn(s, |_, _, y, x| {
            let i = y * 5 + x;
            let d = pred.data()[i] - gt[i] as f64;
            if (d.abs() - 1.0).abs() < 0.05 {
                pred.data()[i] + 0.2
            } else {
                pred.data()[i]
            }
        });
        let (gt2, valid2) = (gt.clone(), valid.clone());
        out.push(c.check(
            "smooth_l1_loss",
            &mut NoParams,
            &[pred],
            move |_, xs| {
                let (l, _) = smooth_l1_with_grad(&xs[0], &gt, &valid)?;
                Ok(Tensor::full(Shape::new(1, 1, 1, 1), l))
            },
            move |_, xs, r| {
                let (_, g) = smooth_l1_with_grad(&xs[0], &gt2, &valid2)?;
                Ok(vec![ops::scale(&g, r.data()[0])])
            },
        )?);
    }

    {
        let mut block: InvertedResidual<f64> = InvertedResidual::new(4, 4, 1, 2, &mut c.rng);
        let x = random_tensor(Shape::new(2, 4, 5, 5), &mut c.rng);
        out.push(c.check(
            "inverted_residual",
            &mut block,
            &[x],
            |m, xs| Ok(m.forward_train(&xs[0])?.0),
            |m, xs, r| {
                let (_, cache) = m.forward_train(&xs[0])?;
                Ok(vec![m.backward(&cache, r)?])
            },
        )?);
        let mut block: InvertedResidual<f64> = InvertedResidual::new(3, 5, 2, 2, &mut c.rng);
        let x = random_tensor(Shape::new(2, 3, 6, 6), &mut c.rng);
        out.push(c.check(
            "inverted_residual_strided",
            &mut block,
            &[x],
            |m, xs| Ok(m.forward_train(&xs[0])?.0),
            |m, xs, r| {
                let (_, cache) = m.forward_train(&xs[0])?;
                Ok(vec![m.backward(&cache, r)?])
            },
        )?);
    }

    {
        let mut msca: Msca<f64> = Msca::new(3, 4, &mut c.rng);
        msca.visit_mut("", &mut |p| {
            if p.name.ends_with("bias") {
                p.value.iter_mut().for_each(|v| *v = 0.05);
            }
        });
        let img = random_tensor(Shape::new(2, 3, 5, 6), &mut c.rng);
        let cost = random_tensor(Shape::new(2, 4, 5, 6), &mut c.rng);
        out.push(c.check(
            "msca",
            &mut msca,
            &[img, cost],
            |m, xs| Ok(m.forward_train(&xs[0], &xs[1])?.0),
            |m, xs, r| {
                let (_, cache) = m.forward_train(&xs[0], &xs[1])?;
                let (gi, gc) = m.backward(&cache, r)?;
                Ok(vec![gi, gc])
            },
        )?);
    }

    {
        let mut model: Model<f64> = Model::new(&tiny_model_config(), seed)?;
        let left = random_tensor(Shape::new(1, 3, 64, 64), &mut c.rng);
        let right = random_tensor(Shape::new(1, 3, 64, 64), &mut c.rng);
        // thousands of ReLU6 units: a small step keeps the probes from
        // straddling kinks
        c.limit = 3;
        c.step = 1e-7;
        out.push(c.check(
            "end_to_end_model",
            &mut model,
            &[left, right],
            |m, xs| Ok(m.forward_train(&xs[0], &xs[1])?.0),
            |m, xs, r| {
                let (_, cache) = m.forward_train(&xs[0], &xs[1])?;
                let g = m.backward(&cache, r)?;
                Ok(vec![g.left, g.right])
            },
        )?);
    }

    Ok(out)
}
