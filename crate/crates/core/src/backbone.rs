//! MobileNetV2-style feature extractor with a lightweight top-down decoder
//! producing features at 1/4, 1/8 and 1/16 resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{InvertedResidual, InvertedResidualCache};
use crate::error::{Error, Result};
use crate::layers::{join, Activation, ConvBn, ConvBnCache, ConvSpec, Module, ParamMut, ParamView};
use crate::ops;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub stem_channels: usize,
    /// Extra stride-1 3×3 convolutions after the stride-2 stem conv.
    pub stem_depth: usize,
    /// Widths of the 1/4, 1/8, 1/16, 1/32 stages.
    pub stage_channels: [usize; 4],
    pub stage_block_counts: [usize; 4],
    pub expansion: usize,
    /// Decoder output widths at 1/16, 1/8, 1/4.
    pub decoder_channels: [usize; 3],
}

impl Default for BackboneConfig {
    /// Full-size layout used for the S/M/L variants.
    fn default() -> Self {
        BackboneConfig {
            input_channels: 3,
            stem_channels: 48,
            stem_depth: 1,
            stage_channels: [24, 32, 96, 192],
            stage_block_counts: [2, 3, 6, 3],
            expansion: 6,
            decoder_channels: [96, 64, 48],
        }
    }
}

impl BackboneConfig {
    /// Small layout for quick experiments and tests.
    pub fn compact() -> Self {
        BackboneConfig {
            input_channels: 3,
            stem_channels: 16,
            stem_depth: 1,
            stage_channels: [24, 32, 96, 160],
            stage_block_counts: [2, 3, 4, 3],
            expansion: 4,
            decoder_channels: [96, 64, 48],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.input_channels, self.stem_channels, self.expansion];
        if counts
            .iter()
            .chain(&self.stage_channels)
            .chain(&self.stage_block_counts)
            .chain(&self.decoder_channels)
            .any(|&v| v == 0)
        {
            return Err(Error::config(format!("backbone: all widths and counts must be >= 1, got {self:?}")));
        }
        if self.stage_channels.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::config(format!(
                "backbone: stage channels must be nondecreasing, got {:?}",
                self.stage_channels
            )));
        }
        Ok(())
    }

    /// Pyramid widths at 1/4, 1/8, 1/16.
    pub fn pyramid_channels(&self) -> [usize; 3] {
        let d = self.decoder_channels;
        [d[2], d[1], d[0]]
    }
}

/// Features of one or more images. Spatial sizes are exactly H/4, H/8, H/16
/// (and H/32 for the raw deepest stage).
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T: Real = f32> {
    pub f4: Tensor<T>,
    pub f8: Tensor<T>,
    pub f16: Tensor<T>,
    pub raw32: Tensor<T>,
}

impl<T: Real> FeaturePyramid<T> {
    /// Splits a pyramid computed on a concatenated batch at item `n0`.
    pub fn split_batch(&self, n0: usize) -> Result<(Self, Self)> {
        let (a4, b4) = self.f4.split_batch(n0)?;
        let (a8, b8) = self.f8.split_batch(n0)?;
        let (a16, b16) = self.f16.split_batch(n0)?;
        let (a32, b32) = self.raw32.split_batch(n0)?;
        Ok((
            FeaturePyramid { f4: a4, f8: a8, f16: a16, raw32: a32 },
            FeaturePyramid { f4: b4, f8: b8, f16: b16, raw32: b32 },
        ))
    }
}

/// Gradients w.r.t. a feature pyramid; `None` where nothing flows back.
#[derive(Clone, Debug, Default)]
pub struct PyramidGrads<T: Real> {
    pub f4: Option<Tensor<T>>,
    pub f8: Option<Tensor<T>>,
    pub f16: Option<Tensor<T>>,
}

/// Upsample the deeper map ×2, project to the skip width, add the skip, then
/// depthwise 3×3 and pointwise 1×1 to the decoder width.
#[derive(Clone, Debug)]
pub struct DecoderLevel<T: Real> {
    pub project: ConvBn<T>,
    pub depthwise: ConvBn<T>,
    pub pointwise: ConvBn<T>,
}

#[derive(Clone, Debug)]
pub struct Backbone<T: Real = f32> {
    pub config: BackboneConfig,
    pub stem: Vec<ConvBn<T>>,
    pub stages: Vec<Vec<InvertedResidual<T>>>,
    /// Ordered 1/16, 1/8, 1/4.
    pub decoder: Vec<DecoderLevel<T>>,
}

struct LevelCache<T: Real> {
    deeper_hw: (usize, usize),
    project: ConvBnCache<T>,
    depthwise: ConvBnCache<T>,
    pointwise: ConvBnCache<T>,
}

pub struct BackboneCache<T: Real> {
    stem: Vec<ConvBnCache<T>>,
    stages: Vec<Vec<InvertedResidualCache<T>>>,
    levels: Vec<LevelCache<T>>,
}

pub fn build_backbone<T: Real>(config: &BackboneConfig, seed: u64) -> Result<Backbone<T>> {
    Backbone::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
}

impl<T: Real> Backbone<T> {
    pub fn new<R: rand::Rng>(config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let sc = config.stem_channels;
        let mut stem = vec![ConvBn::new(
            ConvSpec::new(config.input_channels, sc, 3).stride(2),
            Activation::Relu6,
            rng,
        )];
        for _ in 0..config.stem_depth {
            stem.push(ConvBn::new(ConvSpec::new(sc, sc, 3), Activation::Relu6, rng));
        }
        let mut c_prev = sc;
        let mut stages = Vec::with_capacity(4);
        for (&c, &n) in config.stage_channels.iter().zip(&config.stage_block_counts) {
            let mut blocks = vec![InvertedResidual::new(c_prev, c, 2, config.expansion, rng)];
            for _ in 1..n {
                blocks.push(InvertedResidual::new(c, c, 1, config.expansion, rng));
            }
            stages.push(blocks);
            c_prev = c;
        }
        let mut decoder = Vec::with_capacity(3);
        for (lvl, &out) in config.decoder_channels.iter().enumerate() {
            let skip = config.stage_channels[2 - lvl];
            decoder.push(DecoderLevel {
                project: ConvBn::new(ConvSpec::new(c_prev, skip, 1), Activation::None, rng),
                depthwise: ConvBn::new(ConvSpec::depthwise(skip, 3, 3), Activation::Relu6, rng),
                pointwise: ConvBn::new(ConvSpec::new(skip, out, 1), Activation::Relu6, rng),
            });
            c_prev = out;
        }
        Ok(Backbone {
            config: config.clone(),
            stem,
            stages,
            decoder,
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.c != self.config.input_channels {
            return Err(Error::config(format!(
                "backbone: expected {} input channels, got {s}",
                self.config.input_channels
            )));
        }
        if !s.h.is_multiple_of(32) || !s.w.is_multiple_of(32) {
            return Err(Error::config(format!(
                "backbone: input height and width must be multiples of 32, got {}x{}",
                s.h, s.w
            )));
        }
        Ok(())
    }

    pub fn extract_features(&self, x: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        self.check_input(x)?;
        let mut y = x.clone();
        for c in &self.stem {
            y = c.forward(&y)?;
        }
        let mut skips = Vec::with_capacity(4);
        for stage in &self.stages {
            for b in stage {
                y = b.forward(&y)?;
            }
            skips.push(y.clone());
        }
        let raw32 = y.clone();
        let mut outs = Vec::with_capacity(3);
        for (lvl, level) in self.decoder.iter().enumerate() {
            let skip = &skips[2 - lvl];
            let s = skip.shape();
            let up = ops::bilinear_resize(&y, s.h, s.w, false)?;
            let z = ops::add(&level.project.forward(&up)?, skip)?;
            y = level.pointwise.forward(&level.depthwise.forward(&z)?)?;
            outs.push(y.clone());
        }
        let mut it = outs.into_iter();
        let (f16, f8, f4) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        Ok(FeaturePyramid { f4, f8, f16, raw32 })
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(FeaturePyramid<T>, BackboneCache<T>)> {
        self.check_input(x)?;
        let mut y = x.clone();
        let mut stem = Vec::with_capacity(self.stem.len());
        for c in &mut self.stem {
            let (o, cache) = c.forward_train(&y)?;
            y = o;
            stem.push(cache);
        }
        let mut skips = Vec::with_capacity(4);
        let mut stages = Vec::with_capacity(4);
        for stage in &mut self.stages {
            let mut caches = Vec::with_capacity(stage.len());
            for b in stage.iter_mut() {
                let (o, cache) = b.forward_train(&y)?;
                y = o;
                caches.push(cache);
            }
            skips.push(y.clone());
            stages.push(caches);
        }
        let raw32 = y.clone();
        let mut outs = Vec::with_capacity(3);
        let mut levels = Vec::with_capacity(3);
        for (lvl, level) in self.decoder.iter_mut().enumerate() {
            let skip = &skips[2 - lvl];
            let s = skip.shape();
            let deeper_hw = (y.shape().h, y.shape().w);
            let up = ops::bilinear_resize(&y, s.h, s.w, false)?;
            let (p, project) = level.project.forward_train(&up)?;
            let z = ops::add(&p, skip)?;
            let (d, depthwise) = level.depthwise.forward_train(&z)?;
            let (o, pointwise) = level.pointwise.forward_train(&d)?;
            y = o;
            outs.push(y.clone());
            levels.push(LevelCache {
                deeper_hw,
                project,
                depthwise,
                pointwise,
            });
        }
        let mut it = outs.into_iter();
        let (f16, f8, f4) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        Ok((FeaturePyramid { f4, f8, f16, raw32 }, BackboneCache { stem, stages, levels }))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &BackboneCache<T>, grads: &PyramidGrads<T>) -> Result<Tensor<T>> {
        let level_grads = [&grads.f16, &grads.f8, &grads.f4];
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; 4];
        // gradient flowing into the current decoder output from the level above
        let mut carry: Option<Tensor<T>> = None;
        for lvl in (0..3).rev() {
            let mut g = match (carry.take(), level_grads[lvl]) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(b)?;
                    a
                }
                (Some(a), None) => a,
                (None, Some(b)) => b.clone(),
                (None, None) => continue,
            };
            let level = &mut self.decoder[lvl];
            let lc = &cache.levels[lvl];
            g = level.pointwise.backward(&lc.pointwise, &g)?;
            g = level.depthwise.backward(&lc.depthwise, &g)?;
            skip_grads[2 - lvl] = Some(g.clone());
            let gup = level.project.backward(&lc.project, &g)?;
            carry = Some(ops::bilinear_resize_backward(&gup, lc.deeper_hw.0, lc.deeper_hw.1, false)?);
        }
        // carry now holds the gradient at the deepest stage output
        let mut g: Option<Tensor<T>> = carry;
        for si in (0..4).rev() {
            g = match (g, skip_grads[si].take()) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b)?;
                    Some(a)
                }
                (a, b) => a.or(b),
            };
            let Some(mut gg) = g.take() else { continue };
            for (b, bc) in self.stages[si].iter_mut().zip(&cache.stages[si]).rev() {
                gg = b.backward(bc, &gg)?;
            }
            g = Some(gg);
        }
        let mut g = g.ok_or_else(|| Error::config("backbone backward: no gradient supplied"))?;
        for (c, cc) in self.stem.iter_mut().zip(&cache.stem).rev() {
            g = c.backward(cc, &g)?;
        }
        Ok(g)
    }
}

impl<T: Real> Module<T> for Backbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, T>)) {
        for (i, c) in self.stem.iter().enumerate() {
            c.visit(&join(prefix, &format!("stem.{i}")), f);
        }
        for (i, st) in self.stages.iter().enumerate() {
            for (j, b) in st.iter().enumerate() {
                b.visit(&join(prefix, &format!("stage{i}.{j}")), f);
            }
        }
        for (l, name) in self.decoder.iter().zip(["dec16", "dec8", "dec4"]) {
            let p = join(prefix, name);
            l.project.visit(&join(&p, "project"), f);
            l.depthwise.visit(&join(&p, "depthwise"), f);
            l.pointwise.visit(&join(&p, "pointwise"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        for (i, c) in self.stem.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("stem.{i}")), f);
        }
        for (i, st) in self.stages.iter_mut().enumerate() {
            for (j, b) in st.iter_mut().enumerate() {
                b.visit_mut(&join(prefix, &format!("stage{i}.{j}")), f);
            }
        }
        for (l, name) in self.decoder.iter_mut().zip(["dec16", "dec8", "dec4"]) {
            let p = join(prefix, name);
            l.project.visit_mut(&join(&p, "project"), f);
            l.depthwise.visit_mut(&join(&p, "depthwise"), f);
            l.pointwise.visit_mut(&join(&p, "pointwise"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn pyramid_shapes() {
        let cfg = BackboneConfig::compact();
        let bb: Backbone<f32> = build_backbone(&cfg, 0).unwrap();
        let x = Tensor::full(Shape::new(2, 3, 64, 96), 0.1);
        let p = bb.extract_features(&x).unwrap();
        assert_eq!(p.f4.shape(), Shape::new(2, 48, 16, 24));
        assert_eq!(p.f8.shape(), Shape::new(2, 64, 8, 12));
        assert_eq!(p.f16.shape(), Shape::new(2, 96, 4, 6));
        assert_eq!(p.raw32.shape(), Shape::new(2, 160, 2, 3));
        assert!(p.f4.is_finite());
    }

    #[test]
    fn rejects_non_multiple_of_32() {
        let bb: Backbone<f32> = build_backbone(&BackboneConfig::compact(), 0).unwrap();
        let r = bb.extract_features(&Tensor::zeros(Shape::new(1, 3, 64, 100)));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn rejects_decreasing_stages() {
        let mut cfg = BackboneConfig::compact();
        cfg.stage_channels = [32, 24, 96, 160];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_weights() {
        let a: Backbone<f32> = build_backbone(&BackboneConfig::compact(), 5).unwrap();
        let b: Backbone<f32> = build_backbone(&BackboneConfig::compact(), 5).unwrap();
        let c: Backbone<f32> = build_backbone(&BackboneConfig::compact(), 6).unwrap();
        let first = |m: &Backbone<f32>| m.stem[0].conv.params.weight.data().to_vec();
        assert_eq!(first(&a), first(&b));
        assert_ne!(first(&a), first(&c));
    }

    #[test]
    fn batch_items_are_independent_in_eval() {
        let bb: Backbone<f32> = build_backbone(&BackboneConfig::compact(), 1).unwrap();
        let a = Tensor::from_fn(Shape::new(1, 3, 32, 32), |_, c, h, w| ((c + h * w) % 7) as f32 * 0.1);
        let b = Tensor::full(Shape::new(1, 3, 32, 32), 0.3);
        let both = Tensor::concat_batch(&[&a, &b]).unwrap();
        let pa = bb.extract_features(&a).unwrap();
        let (pboth, _) = bb.extract_features(&both).unwrap().split_batch(1).unwrap();
        assert!(pa.f4.max_abs_diff(&pboth.f4) < 1e-6);
    }
}
