//! 2-D cost aggregation: inverted residual stacks at 1/4, 1/8 and 1/16
//! resolution, multi-scale convolutional attention (MSCA) driven by the
//! left-image features, and a two-level upsampling decoder.

use rand::Rng;

use crate::backbone::{FeaturePyramid, PyramidGrads};
use crate::error::{Error, Result};
use crate::layers::{join, Activation, BatchNorm2d, Conv2d, ConvBn, ConvBnCache, ConvSpec, Module, ParamMut, ParamView};
use crate::ops;
use crate::tensor::{Real, Tensor};

/// Expand (1×1) → depthwise 3×3 → linear project (1×1), each followed by
/// batch norm; ReLU6 after the first two. The identity skip is present only
/// for stride 1 with equal channel counts.
#[derive(Clone, Debug)]
pub struct InvertedResidual<T: Real> {
    pub expand: ConvBn<T>,
    pub depthwise: ConvBn<T>,
    pub project: ConvBn<T>,
    pub skip: bool,
}

pub struct InvertedResidualCache<T: Real> {
    expand: ConvBnCache<T>,
    depthwise: ConvBnCache<T>,
    project: ConvBnCache<T>,
}

impl<T: Real> InvertedResidual<T> {
    pub fn new<R: Rng>(c_in: usize, c_out: usize, stride: usize, expansion: usize, rng: &mut R) -> Self {
        let hidden = c_in * expansion;
        InvertedResidual {
            expand: ConvBn::new(ConvSpec::new(c_in, hidden, 1), Activation::Relu6, rng),
            depthwise: ConvBn::new(ConvSpec::depthwise(hidden, 3, 3).stride(stride), Activation::Relu6, rng),
            project: ConvBn::new(ConvSpec::new(hidden, c_out, 1), Activation::None, rng),
            skip: stride == 1 && c_in == c_out,
        }
    }

    pub fn hidden_channels(&self) -> usize {
        self.expand.conv.params.out_channels()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.expand.forward(x)?;
        let y = self.depthwise.forward(&y)?;
        let y = self.project.forward(&y)?;
        if self.skip {
            ops::add(&y, x)
        } else {
            Ok(y)
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, InvertedResidualCache<T>)> {
        let (y, expand) = self.expand.forward_train(x)?;
        let (y, depthwise) = self.depthwise.forward_train(&y)?;
        let (y, project) = self.project.forward_train(&y)?;
        let y = if self.skip { ops::add(&y, x)? } else { y };
        Ok((y, InvertedResidualCache { expand, depthwise, project }))
    }

    pub fn backward(&mut self, cache: &InvertedResidualCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.project.backward(&cache.project, grad)?;
        let g = self.depthwise.backward(&cache.depthwise, &g)?;
        let mut g = self.expand.backward(&cache.expand, &g)?;
        if self.skip {
            g.add_assign(grad)?;
        }
        Ok(g)
    }
}

impl<T: Real> Module<T> for InvertedResidual<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, T>)) {
        self.expand.visit(&join(prefix, "expand"), f);
        self.depthwise.visit(&join(prefix, "depthwise"), f);
        self.project.visit(&join(prefix, "project"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        self.expand.visit_mut(&join(prefix, "expand"), f);
        self.depthwise.visit_mut(&join(prefix, "depthwise"), f);
        self.project.visit_mut(&join(prefix, "project"), f);
    }
}

const MIXER_WEIGHT_SCALE: f64 = 0.1;
/// Initial batch-norm scale closing each residual branch of the aggregator.
pub const RESIDUAL_GAMMA: f64 = 0.1;

pub const STRIP_KERNELS: [usize; 3] = [7, 11, 21];

/// Multi-scale convolutional attention. Depthwise strip convolutions over the
/// image features (1×1, and k×1 followed by 1×k for k in 7/11/21) are
/// concatenated, mixed by a 1×1 convolution into the cost channels and
/// multiplied into the cost features.
#[derive(Clone, Debug)]
pub struct Msca<T: Real> {
    pub branch_1: Conv2d<T>,
    pub strips: Vec<(Conv2d<T>, Conv2d<T>)>,
    pub mixer: Conv2d<T>,
}

pub struct MscaCache<T: Real> {
    image: Tensor<T>,
    cost: Tensor<T>,
    vertical: Vec<Tensor<T>>,
    mixed_in: Tensor<T>,
    attention: Tensor<T>,
}

impl<T: Real> Msca<T> {
    pub fn new<R: Rng>(image_channels: usize, cost_channels: usize, rng: &mut R) -> Self {
        let c = image_channels;
        let branch_1 = Conv2d::new(ConvSpec::depthwise(c, 1, 1).bias(), rng);
        let strips = STRIP_KERNELS
            .iter()
            .map(|&k| {
                (
                    Conv2d::new(ConvSpec::depthwise(c, k, 1).bias(), rng),
                    Conv2d::new(ConvSpec::depthwise(c, 1, k).bias(), rng),
                )
            })
            .collect();
        let mut mixer = Conv2d::new(ConvSpec::new(4 * c, cost_channels, 1).bias(), rng);
        // attention starts near 1 so the cost passes through mostly unchanged
        let w = &mut mixer.params.weight;
        *w = w.map(|v| v * T::cast(MIXER_WEIGHT_SCALE));
        if let Some(b) = &mut mixer.params.bias {
            b.fill(T::one());
        }
        Msca { branch_1, strips, mixer }
    }

    fn check(image: &Tensor<T>, cost: &Tensor<T>) -> Result<()> {
        let (a, b) = (image.shape(), cost.shape());
        if (a.n, a.h, a.w) != (b.n, b.h, b.w) {
            return Err(Error::config(format!(
                "msca: image features {a} and cost features {b} differ in batch or spatial size"
            )));
        }
        Ok(())
    }

    fn attention_input(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut branches = vec![self.branch_1.forward(image)?];
        let mut vertical = Vec::with_capacity(self.strips.len());
        for (v, h) in &self.strips {
            let mid = v.forward(image)?;
            branches.push(h.forward(&mid)?);
            vertical.push(mid);
        }
        let refs: Vec<&Tensor<T>> = branches.iter().collect();
        Ok((ops::concat_channels(&refs)?, vertical))
    }

    pub fn attention(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.mixer.forward(&self.attention_input(image)?.0)
    }

    pub fn forward(&self, image: &Tensor<T>, cost: &Tensor<T>) -> Result<Tensor<T>> {
        Self::check(image, cost)?;
        ops::mul(cost, &self.attention(image)?)
    }

    pub fn forward_train(&mut self, image: &Tensor<T>, cost: &Tensor<T>) -> Result<(Tensor<T>, MscaCache<T>)> {
        Self::check(image, cost)?;
        let (mixed_in, vertical) = self.attention_input(image)?;
        let attention = self.mixer.forward(&mixed_in)?;
        let out = ops::mul(cost, &attention)?;
        Ok((
            out,
            MscaCache {
                image: image.clone(),
                cost: cost.clone(),
                vertical,
                mixed_in,
                attention,
            },
        ))
    }

    /// Returns `(grad_image, grad_cost)`.
    pub fn backward(&mut self, cache: &MscaCache<T>, grad: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (g_cost, g_att) = ops::mul_backward(&cache.cost, &cache.attention, grad)?;
        let g_mixed = self.mixer.backward(&cache.mixed_in, &g_att)?;
        let c = cache.image.shape().c;
        let parts = ops::split_channels(&g_mixed, &[c; 4])?;
        let mut g_img = self.branch_1.backward(&cache.image, &parts[0])?;
        for ((v, h), (mid, gp)) in self.strips.iter_mut().zip(cache.vertical.iter().zip(&parts[1..])) {
            let g_mid = h.backward(mid, gp)?;
            g_img.add_assign(&v.backward(&cache.image, &g_mid)?)?;
        }
        Ok((g_img, g_cost))
    }
}

impl<T: Real> Module<T> for Msca<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, T>)) {
        self.branch_1.visit(&join(prefix, "branch_1"), f);
        for ((v, h), k) in self.strips.iter().zip(STRIP_KERNELS) {
            v.visit(&join(prefix, &format!("strip_{k}.vertical")), f);
            h.visit(&join(prefix, &format!("strip_{k}.horizontal")), f);
        }
        self.mixer.visit(&join(prefix, "mixer"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        self.branch_1.visit_mut(&join(prefix, "branch_1"), f);
        for ((v, h), k) in self.strips.iter_mut().zip(STRIP_KERNELS) {
            v.visit_mut(&join(prefix, &format!("strip_{k}.vertical")), f);
            h.visit_mut(&join(prefix, &format!("strip_{k}.horizontal")), f);
        }
        self.mixer.visit_mut(&join(prefix, "mixer"), f);
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AggregationConfig {
    /// Inverted residual blocks per scale (1/4, 1/8, 1/16).
    pub blocks: [usize; 3],
    pub expansion: [usize; 3],
    pub channels: [usize; 3],
    pub use_msca: bool,
}

impl AggregationConfig {
    /// Width plan (D/4, D/2, D).
    pub fn new(blocks: [usize; 3], expansion: [usize; 3], max_disparity: usize) -> Self {
        AggregationConfig {
            blocks,
            expansion,
            channels: [max_disparity / 4, max_disparity / 2, max_disparity],
            use_msca: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.iter().chain(&self.expansion).chain(&self.channels).any(|&v| v == 0) {
            return Err(Error::config(format!("aggregation: all counts must be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

/// One encoder scale: optional stride-2 transition, a block stack, MSCA.
#[derive(Clone, Debug)]
pub struct EncoderStage<T: Real> {
    pub transition: Option<InvertedResidual<T>>,
    pub blocks: Vec<InvertedResidual<T>>,
    pub msca: Option<Msca<T>>,
}

/// Bilinear ×2 → 1×1 projection (+BN) → add encoder skip → fusing block.
#[derive(Clone, Debug)]
pub struct DecoderStep<T: Real> {
    pub project: ConvBn<T>,
    pub fuse: InvertedResidual<T>,
}

#[derive(Clone, Debug)]
pub struct Aggregator<T: Real> {
    pub config: AggregationConfig,
    pub stages: Vec<EncoderStage<T>>,
    /// `decoder[0]` restores 1/16 → 1/8, `decoder[1]` restores 1/8 → 1/4.
    pub decoder: Vec<DecoderStep<T>>,
}

struct StageCache<T: Real> {
    transition: Option<InvertedResidualCache<T>>,
    blocks: Vec<InvertedResidualCache<T>>,
    msca: Option<MscaCache<T>>,
}

struct DecoderCache<T: Real> {
    deeper_shape: (usize, usize),
    upsampled: Tensor<T>,
    project: ConvBnCache<T>,
    fuse: InvertedResidualCache<T>,
}

pub struct AggregatorCache<T: Real> {
    stages: Vec<StageCache<T>>,
    decoder: Vec<DecoderCache<T>>,
}

impl<T: Real> Aggregator<T> {
    /// `image_channels` are the pyramid widths at 1/4, 1/8, 1/16.
    pub fn new<R: Rng>(config: &AggregationConfig, image_channels: [usize; 3], rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ch = config.channels;
        let mut stages = Vec::with_capacity(3);
        for i in 0..3 {
            let t = config.expansion[i];
            let transition = (i > 0).then(|| InvertedResidual::new(ch[i - 1], ch[i], 2, t, rng));
            let blocks = (0..config.blocks[i])
                .map(|_| InvertedResidual::new(ch[i], ch[i], 1, t, rng))
                .collect();
            let msca = config.use_msca.then(|| Msca::new(image_channels[i], ch[i], rng));
            stages.push(EncoderStage { transition, blocks, msca });
        }
        let mut decoder = [1usize, 0]
            .iter()
            .map(|&i| DecoderStep {
                project: ConvBn::new(ConvSpec::new(ch[i + 1], ch[i], 1), Activation::None, rng),
                fuse: InvertedResidual::new(ch[i], ch[i], 1, config.expansion[i], rng),
            })
            .collect::<Vec<DecoderStep<T>>>();
        // Residual branches and the coarse decoder path start small, so the
        // volume initially reaches the regression nearly untouched.
        let damp = |bn: &mut BatchNorm2d<T>| bn.params.gamma.fill(T::cast(RESIDUAL_GAMMA));
        for st in &mut stages {
            st.blocks.iter_mut().for_each(|b| damp(&mut b.project.bn));
        }
        for d in &mut decoder {
            damp(&mut d.project.bn);
            damp(&mut d.fuse.project.bn);
        }
        Ok(Aggregator {
            config: config.clone(),
            stages,
            decoder,
        })
    }

    fn check(&self, volume: &Tensor<T>, pyr: &FeaturePyramid<T>) -> Result<()> {
        let v = volume.shape();
        if v.c != self.config.channels[0] {
            return Err(Error::config(format!(
                "aggregate: volume has {} disparity channels, aggregator expects {}",
                v.c, self.config.channels[0]
            )));
        }
        for (f, k) in [(&pyr.f4, 1), (&pyr.f8, 2), (&pyr.f16, 4)] {
            let s = f.shape();
            if s.n != v.n || s.h * k != v.h || s.w * k != v.w {
                return Err(Error::config(format!(
                    "aggregate: pyramid level {s} misaligned with 1/4-scale volume {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, volume: &Tensor<T>, pyr: &FeaturePyramid<T>) -> Result<Tensor<T>> {
        self.check(volume, pyr)?;
        let images = [&pyr.f4, &pyr.f8, &pyr.f16];
        let mut skips = Vec::with_capacity(3);
        let mut x = volume.clone();
        for (stage, img) in self.stages.iter().zip(images) {
            if let Some(t) = &stage.transition {
                x = t.forward(&x)?;
            }
            for b in &stage.blocks {
                x = b.forward(&x)?;
            }
            if let Some(m) = &stage.msca {
                x = m.forward(img, &x)?;
            }
            skips.push(x.clone());
        }
        for (step, skip) in self.decoder.iter().zip([&skips[1], &skips[0]]) {
            let s = skip.shape();
            let up = ops::bilinear_resize(&x, s.h, s.w, false)?;
            let y = ops::add(&step.project.forward(&up)?, skip)?;
            x = step.fuse.forward(&y)?;
        }
        Ok(x)
    }

    pub fn forward_train(
        &mut self,
        volume: &Tensor<T>,
        pyr: &FeaturePyramid<T>,
    ) -> Result<(Tensor<T>, AggregatorCache<T>)> {
        self.check(volume, pyr)?;
        let images = [&pyr.f4, &pyr.f8, &pyr.f16];
        let mut skips = Vec::with_capacity(3);
        let mut stage_caches = Vec::with_capacity(3);
        let mut x = volume.clone();
        for (stage, img) in self.stages.iter_mut().zip(images) {
            let transition = match &mut stage.transition {
                Some(t) => {
                    let (y, c) = t.forward_train(&x)?;
                    x = y;
                    Some(c)
                }
                None => None,
            };
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            for b in &mut stage.blocks {
                let (y, c) = b.forward_train(&x)?;
                x = y;
                blocks.push(c);
            }
            let msca = match &mut stage.msca {
                Some(m) => {
                    let (y, c) = m.forward_train(img, &x)?;
                    x = y;
                    Some(c)
                }
                None => None,
            };
            skips.push(x.clone());
            stage_caches.push(StageCache { transition, blocks, msca });
        }
        let mut dec_caches = Vec::with_capacity(2);
        for (step, skip) in self.decoder.iter_mut().zip([&skips[1], &skips[0]]) {
            let s = skip.shape();
            let deeper_shape = (x.shape().h, x.shape().w);
            let upsampled = ops::bilinear_resize(&x, s.h, s.w, false)?;
            let (p, project) = step.project.forward_train(&upsampled)?;
            let y = ops::add(&p, skip)?;
            let (out, fuse) = step.fuse.forward_train(&y)?;
            x = out;
            dec_caches.push(DecoderCache {
                deeper_shape,
                upsampled,
                project,
                fuse,
            });
        }
        Ok((
            x,
            AggregatorCache {
                stages: stage_caches,
                decoder: dec_caches,
            },
        ))
    }

    /// Returns the gradient w.r.t. the cost volume and the left pyramid.
    pub fn backward(
        &mut self,
        cache: &AggregatorCache<T>,
        grad: &Tensor<T>,
    ) -> Result<(Tensor<T>, PyramidGrads<T>)> {
        // decoder, in reverse: 1/4 step first
        let mut skip_grads: [Option<Tensor<T>>; 3] = [None, None, None];
        let mut g = grad.clone();
        for (k, (step, dc)) in self.decoder.iter_mut().zip(&cache.decoder).enumerate().rev() {
            let gy = step.fuse.backward(&dc.fuse, &g)?;
            // skip index: decoder[0] adds skips[1], decoder[1] adds skips[0]
            skip_grads[1 - k] = Some(gy.clone());
            let gup = step.project.backward(&dc.project, &gy)?;
            debug_assert_eq!(gup.shape(), dc.upsampled.shape());
            g = ops::bilinear_resize_backward(&gup, dc.deeper_shape.0, dc.deeper_shape.1, false)?;
        }
        // g is now the gradient at the 1/16 encoder output
        let mut pyr = PyramidGrads::default();
        for i in (0..3).rev() {
            if let Some(sg) = &skip_grads[i] {
                g.add_assign(sg)?;
            }
            let stage = &mut self.stages[i];
            let sc = &cache.stages[i];
            if let (Some(m), Some(mc)) = (&mut stage.msca, &sc.msca) {
                let (g_img, g_cost) = m.backward(mc, &g)?;
                match i {
                    0 => pyr.f4 = Some(g_img),
                    1 => pyr.f8 = Some(g_img),
                    _ => pyr.f16 = Some(g_img),
                }
                g = g_cost;
            }
            for (b, bc) in stage.blocks.iter_mut().zip(&sc.blocks).rev() {
                g = b.backward(bc, &g)?;
            }
            if let (Some(t), Some(tc)) = (&mut stage.transition, &sc.transition) {
                g = t.backward(tc, &g)?;
            }
        }
        Ok((g, pyr))
    }
}

impl<T: Real> Module<T> for Aggregator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, T>)) {
        for (i, st) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("enc{}", 4 << i));
            if let Some(t) = &st.transition {
                t.visit(&join(&p, "transition"), f);
            }
            for (j, b) in st.blocks.iter().enumerate() {
                b.visit(&join(&p, &format!("blocks.{j}")), f);
            }
            if let Some(m) = &st.msca {
                m.visit(&join(&p, "msca"), f);
            }
        }
        for (step, name) in self.decoder.iter().zip(["dec8", "dec4"]) {
            let p = join(prefix, name);
            step.project.visit(&join(&p, "project"), f);
            step.fuse.visit(&join(&p, "fuse"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        for (i, st) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("enc{}", 4 << i));
            if let Some(t) = &mut st.transition {
                t.visit_mut(&join(&p, "transition"), f);
            }
            for (j, b) in st.blocks.iter_mut().enumerate() {
                b.visit_mut(&join(&p, &format!("blocks.{j}")), f);
            }
            if let Some(m) = &mut st.msca {
                m.visit_mut(&join(&p, "msca"), f);
            }
        }
        for (step, name) in self.decoder.iter_mut().zip(["dec8", "dec4"]) {
            let p = join(prefix, name);
            step.project.visit_mut(&join(&p, "project"), f);
            step.fuse.visit_mut(&join(&p, "fuse"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn zero_weights<T: Real>(m: &mut impl Module<T>) {
        m.visit_mut("", &mut |p| {
            if p.name.ends_with("weight") {
                p.value.iter_mut().for_each(|v| *v = T::zero());
            }
        });
    }

    fn noise(s: Shape, seed: u64) -> Tensor<f64> {
        use rand_distr::{Distribution, StandardNormal};
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(s, |_, _, _, _| StandardNormal.sample(&mut r))
    }

    #[test]
    fn zero_weights_leave_only_the_skip() {
        let mut b: InvertedResidual<f64> = InvertedResidual::new(8, 8, 1, 4, &mut rng());
        zero_weights(&mut b);
        let x = noise(Shape::new(1, 8, 5, 6), 1);
        assert_eq!(b.forward(&x).unwrap(), x);
    }

    #[test]
    fn hidden_width_and_parameter_count() {
        let b: InvertedResidual<f32> = InvertedResidual::new(48, 48, 1, 4, &mut rng());
        assert_eq!(b.hidden_channels(), 192);
        assert_eq!(b.num_params(), 48 * 192 + 192 * 9 + 192 * 48 + 2 * (192 + 192 + 48));
    }

    #[test]
    fn skip_condition() {
        let mut r = rng();
        assert!(InvertedResidual::<f32>::new(8, 8, 1, 2, &mut r).skip);
        assert!(!InvertedResidual::<f32>::new(8, 8, 2, 2, &mut r).skip);
        assert!(!InvertedResidual::<f32>::new(8, 16, 1, 2, &mut r).skip);
    }

    #[test]
    fn msca_zero_mixer_annihilates() {
        let mut m: Msca<f64> = Msca::new(6, 4, &mut rng());
        m.mixer.params.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        m.mixer.params.bias.as_mut().unwrap().fill(0.0);
        let y = m.forward(&noise(Shape::new(1, 6, 8, 10), 2), &noise(Shape::new(1, 4, 8, 10), 3)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 8, 10));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn msca_initial_bias_passes_cost_through() {
        let mut m: Msca<f64> = Msca::new(6, 4, &mut rng());
        m.mixer.params.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let cost = noise(Shape::new(1, 4, 8, 10), 3);
        let y = m.forward(&noise(Shape::new(1, 6, 8, 10), 2), &cost).unwrap();
        assert_eq!(y, cost);
    }

    #[test]
    fn msca_rejects_spatial_mismatch() {
        let m: Msca<f64> = Msca::new(6, 4, &mut rng());
        let r = m.forward(&noise(Shape::new(1, 6, 8, 10), 2), &noise(Shape::new(1, 4, 8, 12), 3));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn strip_pair_equals_outer_product_kernel() {
        let c = 3;
        let mut r = rng();
        let v: Conv2d<f64> = Conv2d::new(ConvSpec::depthwise(c, 7, 1), &mut r);
        let h: Conv2d<f64> = Conv2d::new(ConvSpec::depthwise(c, 1, 7), &mut r);
        let x = noise(Shape::new(1, c, 12, 15), 4);
        let pair = h.forward(&v.forward(&x).unwrap()).unwrap();
        let full = Tensor::from_fn(Shape::new(c, 1, 7, 7), |ch, _, ky, kx| {
            v.params.weight.at(ch, 0, ky, 0) * h.params.weight.at(ch, 0, 0, kx)
        });
        let k = ops::ConvParams::new(full, None).with_groups(c).with_padding(3, 3);
        let dense = ops::conv2d(&x, &k).unwrap();
        for ch in 0..c {
            for y in 0..12 {
                for xx in 0..15 {
                    let a = pair.at(0, ch, y, xx);
                    let b = dense.at(0, ch, y, xx);
                    assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} {b}");
                }
            }
        }
    }

    #[test]
    fn aggregate_preserves_volume_shape() {
        let cfg = AggregationConfig::new([1, 2, 4], [4, 4, 4], 192);
        let agg: Aggregator<f32> = Aggregator::new(&cfg, [16, 12, 8], &mut rng()).unwrap();
        let pyr = FeaturePyramid {
            f4: Tensor::full(Shape::new(1, 16, 16, 24), 0.5),
            f8: Tensor::full(Shape::new(1, 12, 8, 12), 0.5),
            f16: Tensor::full(Shape::new(1, 8, 4, 6), 0.5),
            raw32: Tensor::full(Shape::new(1, 8, 2, 3), 0.5),
        };
        let vol = noise(Shape::new(1, 48, 16, 24), 5).cast::<f32>();
        assert_eq!(agg.forward(&vol, &pyr).unwrap().shape(), vol.shape());
        let depths: Vec<usize> = agg.stages.iter().map(|s| s.blocks.len()).collect();
        assert_eq!(depths, [1, 2, 4]);

        let mut no_msca = cfg.clone();
        no_msca.use_msca = false;
        let agg: Aggregator<f32> = Aggregator::new(&no_msca, [16, 12, 8], &mut rng()).unwrap();
        assert_eq!(agg.forward(&vol, &pyr).unwrap().shape(), vol.shape());
    }
}
