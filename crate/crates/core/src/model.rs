//! Full network: feature extraction → cost → cost aggregation → disparity
//! regression.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{AggregationConfig, Aggregator, AggregatorCache};
use crate::backbone::{Backbone, BackboneCache, BackboneConfig, FeaturePyramid, PyramidGrads};
use crate::cost_volume::{build_correlation_volume, correlation_backward, CostVolume};
use crate::error::{Error, Result};
use crate::layers::{join, Module, ParamMut, ParamView};
use crate::regression::{
    soft_argmax, soft_argmax_backward, upsample_disparity_backward, upsample_disparity_tensor, DisparityMap,
};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    S,
    M,
    L,
    Custom,
}

impl Variant {
    /// Aggregation block counts and expansion factors of the named variants.
    pub fn aggregation_plan(self) -> Option<([usize; 3], [usize; 3])> {
        match self {
            Variant::S => Some(([1, 2, 4], [4, 4, 4])),
            Variant::M => Some(([4, 8, 14], [4, 4, 4])),
            Variant::L => Some(([8, 16, 32], [8, 8, 8])),
            Variant::Custom => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::S => "S",
            Variant::M => "M",
            Variant::L => "L",
            Variant::Custom => "custom",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" => Ok(Variant::S),
            "m" => Ok(Variant::M),
            "l" => Ok(Variant::L),
            "custom" => Ok(Variant::Custom),
            _ => Err(Error::config(format!("unknown variant '{s}' (expected S, M, L or custom)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub max_disparity: usize,
    pub backbone: BackboneConfig,
    pub aggregation: AggregationConfig,
}

impl ModelConfig {
    /// Named variant with the default backbone. `Custom` starts from S.
    pub fn new(variant: Variant, max_disparity: usize) -> Self {
        let (blocks, expansion) = variant.aggregation_plan().unwrap_or(([1, 2, 4], [4, 4, 4]));
        ModelConfig {
            variant,
            max_disparity,
            backbone: BackboneConfig::default(),
            aggregation: AggregationConfig::new(blocks, expansion, max_disparity),
        }
    }

    pub fn with_backbone(mut self, backbone: BackboneConfig) -> Self {
        self.backbone = backbone;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.max_disparity;
        if d == 0 || !d.is_multiple_of(4) {
            return Err(Error::config(format!("max_disparity must be a positive multiple of 4, got {d}")));
        }
        if let Some((blocks, expansion)) = self.variant.aggregation_plan() {
            if self.aggregation.blocks != blocks || self.aggregation.expansion != expansion {
                return Err(Error::config(format!(
                    "variant {} requires aggregation blocks {blocks:?} and expansion {expansion:?}, got {:?} and {:?}",
                    self.variant, self.aggregation.blocks, self.aggregation.expansion
                )));
            }
        }
        if self.aggregation.channels[0] != d / 4 {
            return Err(Error::config(format!(
                "aggregation width at 1/4 scale must equal max_disparity/4 = {}, got {}",
                d / 4,
                self.aggregation.channels[0]
            )));
        }
        self.backbone.validate()?;
        self.aggregation.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub aggregator: Aggregator<T>,
}

pub fn build_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    Model::new(config, seed)
}

pub struct ModelCache<T: Real> {
    batch: usize,
    backbone: BackboneCache<T>,
    left_f4: Tensor<T>,
    right_f4: Tensor<T>,
    aggregator: AggregatorCache<T>,
    aggregated: Tensor<T>,
    quarter_hw: (usize, usize),
}

/// Input gradients for the two images.
pub struct InputGrads<T: Real> {
    pub left: Tensor<T>,
    pub right: Tensor<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&config.backbone, &mut rng)?;
        let aggregator = Aggregator::new(&config.aggregation, config.backbone.pyramid_channels(), &mut rng)?;
        Ok(Model {
            config: config.clone(),
            backbone,
            aggregator,
        })
    }

    fn check_pair(left: &Tensor<T>, right: &Tensor<T>) -> Result<()> {
        if left.shape() != right.shape() {
            return Err(Error::config(format!(
                "left image {} and right image {} differ in size",
                left.shape(),
                right.shape()
            )));
        }
        Ok(())
    }

    /// Both images go through the shared backbone as one batch.
    pub fn feature_extraction(&self, left: &Tensor<T>, right: &Tensor<T>) -> Result<(FeaturePyramid<T>, FeaturePyramid<T>)> {
        Self::check_pair(left, right)?;
        let both = Tensor::concat_batch(&[left, right])?;
        self.backbone.extract_features(&both)?.split_batch(left.shape().n)
    }

    pub fn cost(&self, left: &FeaturePyramid<T>, right: &FeaturePyramid<T>) -> Result<CostVolume<T>> {
        build_correlation_volume(&left.f4, &right.f4, self.config.max_disparity)
    }

    pub fn cost_aggregation(&self, volume: &CostVolume<T>, left: &FeaturePyramid<T>) -> Result<Tensor<T>> {
        self.aggregator.forward(&volume.data, left)
    }

    /// `(n, 1, h, w)` disparities in full-resolution pixels.
    pub fn disparity_regression(&self, aggregated: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        upsample_disparity_tensor(&soft_argmax(aggregated)?, h, w)
    }

    pub fn forward(&self, left: &Tensor<T>, right: &Tensor<T>) -> Result<Tensor<T>> {
        let (fl, fr) = self.feature_extraction(left, right)?;
        let volume = self.cost(&fl, &fr)?;
        let agg = self.cost_aggregation(&volume, &fl)?;
        let s = left.shape();
        let out = self.disparity_regression(&agg, s.h, s.w)?;
        out.ensure_finite("model output")?;
        Ok(out)
    }

    /// Single stereo pair (batch 1) to a disparity map.
    pub fn infer(&self, left: &Tensor<T>, right: &Tensor<T>) -> Result<DisparityMap> {
        if left.shape().n != 1 {
            return Err(Error::config(format!("infer expects a single image pair, got {}", left.shape())));
        }
        DisparityMap::from_tensor(&self.forward(left, right)?, 0)
    }

    /// Training-mode forward (batch-norm batch statistics, running stats updated).
    pub fn forward_train(&mut self, left: &Tensor<T>, right: &Tensor<T>) -> Result<(Tensor<T>, ModelCache<T>)> {
        Self::check_pair(left, right)?;
        let batch = left.shape().n;
        let both = Tensor::concat_batch(&[left, right])?;
        let (pyr, backbone) = self.backbone.forward_train(&both)?;
        let (fl, fr) = pyr.split_batch(batch)?;
        let volume = build_correlation_volume(&fl.f4, &fr.f4, self.config.max_disparity)?;
        let (aggregated, aggregator) = self.aggregator.forward_train(&volume.data, &fl)?;
        let quarter = soft_argmax(&aggregated)?;
        let quarter_hw = (quarter.shape().h, quarter.shape().w);
        let s = left.shape();
        let out = upsample_disparity_tensor(&quarter, s.h, s.w)?;
        out.ensure_finite("model output")?;
        Ok((
            out,
            ModelCache {
                batch,
                backbone,
                left_f4: fl.f4,
                right_f4: fr.f4,
                aggregator,
                aggregated,
                quarter_hw,
            },
        ))
    }

    /// Accumulates parameter gradients of `sum(grad ⊙ output)`.
    pub fn backward(&mut self, cache: &ModelCache<T>, grad: &Tensor<T>) -> Result<InputGrads<T>> {
        let g_quarter = upsample_disparity_backward(grad, cache.quarter_hw.0, cache.quarter_hw.1)?;
        let g_agg = soft_argmax_backward(&cache.aggregated, &g_quarter)?;
        let (g_volume, g_pyr) = self.aggregator.backward(&cache.aggregator, &g_agg)?;
        let (mut gl4, gr4) = correlation_backward(&cache.left_f4, &cache.right_f4, &g_volume)?;
        if let Some(g) = &g_pyr.f4 {
            gl4.add_assign(g)?;
        }
        // right-image halves of the deeper levels receive no gradient
        let pad = |g: Option<Tensor<T>>| -> Result<Option<Tensor<T>>> {
            g.map(|g| Tensor::concat_batch(&[&g, &Tensor::zeros(g.shape())])).transpose()
        };
        let grads = PyramidGrads {
            f4: Some(Tensor::concat_batch(&[&gl4, &gr4])?),
            f8: pad(g_pyr.f8)?,
            f16: pad(g_pyr.f16)?,
        };
        let g_in = self.backbone.backward(&cache.backbone, &grads)?;
        let (left, right) = g_in.split_batch(cache.batch)?;
        Ok(InputGrads { left, right })
    }
}

impl<T: Real> Module<T> for Model<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamView<'_, T>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.aggregator.visit(&join(prefix, "aggregation"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.aggregator.visit_mut(&join(prefix, "aggregation"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn toy() -> ModelConfig {
        ModelConfig::new(Variant::S, 32).with_backbone(BackboneConfig::compact())
    }

    #[test]
    fn variant_plans() {
        assert_eq!(ModelConfig::new(Variant::S, 192).aggregation.blocks, [1, 2, 4]);
        assert_eq!(ModelConfig::new(Variant::M, 192).aggregation.blocks, [4, 8, 14]);
        let l = ModelConfig::new(Variant::L, 192);
        assert_eq!((l.aggregation.blocks, l.aggregation.expansion), ([8, 16, 32], [8, 8, 8]));
        assert_eq!(l.aggregation.channels, [48, 96, 192]);
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let mut c = ModelConfig::new(Variant::S, 192);
        c.aggregation.blocks = [2, 2, 4];
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("variant S"), "{e}");

        let mut c = ModelConfig::new(Variant::M, 192);
        c.aggregation.channels[0] = 40;
        assert!(c.validate().unwrap_err().to_string().contains("max_disparity/4"));

        assert!(ModelConfig::new(Variant::S, 30).validate().is_err());

        let mut c = ModelConfig::new(Variant::Custom, 192);
        c.aggregation.blocks = [2, 4, 8];
        c.aggregation.expansion = [16, 16, 16];
        assert!(c.validate().is_ok());
    }

    #[test]
    fn toy_model_stage_shapes() {
        let m: Model<f32> = build_model(&toy(), 3).unwrap();
        let left = Tensor::from_fn(Shape::new(1, 3, 64, 96), |_, c, h, w| ((c * 7 + h * 3 + w) % 11) as f32 / 11.0);
        let right = left.map(|v| 1.0 - v);
        let (fl, fr) = m.feature_extraction(&left, &right).unwrap();
        assert_eq!(fl.f4.shape().dims()[2..], [16, 24]);
        let vol = m.cost(&fl, &fr).unwrap();
        assert_eq!(vol.data.shape(), Shape::new(1, 8, 16, 24));
        let agg = m.cost_aggregation(&vol, &fl).unwrap();
        assert_eq!(agg.shape(), vol.data.shape());
        let disp = m.infer(&left, &right).unwrap();
        assert_eq!((disp.width, disp.height), (96, 64));
        assert!(disp.values.iter().all(|&v| (0.0..=31.0).contains(&v)));
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let m: Model<f32> = build_model(&toy(), 3).unwrap();
        let r = m.infer(&Tensor::zeros(Shape::new(1, 3, 64, 96)), &Tensor::zeros(Shape::new(1, 3, 64, 128)));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("m".parse::<Variant>().unwrap(), Variant::M);
        assert!("H".parse::<Variant>().is_err());
    }
}
