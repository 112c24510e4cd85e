//! Analytic parameter and multiply-accumulate accounting, and a wall-clock
//! profiler over the four pipeline stages.

use std::fmt;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::aggregation::{InvertedResidual, Msca};
use crate::error::{Error, Result};
use crate::layers::{Activation, Conv2d, ConvBn, Module};
use crate::model::Model;
use crate::ops::ConvParams;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    FeatureExtraction,
    Cost,
    CostAggregation,
    DisparityRegression,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::FeatureExtraction,
        Stage::Cost,
        Stage::CostAggregation,
        Stage::DisparityRegression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::FeatureExtraction => "feature_extraction",
            Stage::Cost => "cost",
            Stage::CostAggregation => "cost_aggregation",
            Stage::DisparityRegression => "disparity_regression",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRecord {
    pub name: String,
    pub stage: Stage,
    pub params: u64,
    pub macs: u64,
    /// Normalization, activation, softmax, resize and add/mul work at one
    /// op per element; kept apart from the MAC count.
    pub elementwise_ops: u64,
}

impl LayerRecord {
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComplexityReport {
    pub height: usize,
    pub width: usize,
    pub max_disparity: usize,
    pub records: Vec<LayerRecord>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Totals {
    pub params: u64,
    pub macs: u64,
    pub elementwise_ops: u64,
}

impl Totals {
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

impl ComplexityReport {
    fn sum<'a>(records: impl Iterator<Item = &'a LayerRecord>) -> Totals {
        records.fold(Totals::default(), |t, r| Totals {
            params: t.params + r.params,
            macs: t.macs + r.macs,
            elementwise_ops: t.elementwise_ops + r.elementwise_ops,
        })
    }

    pub fn stage_totals(&self, stage: Stage) -> Totals {
        Self::sum(self.records.iter().filter(|r| r.stage == stage))
    }

    pub fn totals(&self) -> Totals {
        Self::sum(self.records.iter())
    }
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<22} {:>12} {:>16} {:>16} {:>16}",
            "stage", "params", "MACs", "FLOPs (2xMAC)", "elementwise"
        )?;
        let row = |f: &mut fmt::Formatter<'_>, name: &str, t: Totals| {
            writeln!(
                f,
                "{:<22} {:>12} {:>16} {:>16} {:>16}",
                name,
                t.params,
                t.macs,
                t.flops(),
                t.elementwise_ops
            )
        };
        for s in Stage::ALL {
            row(f, s.name(), self.stage_totals(s))?;
        }
        let t = self.totals();
        row(f, "total", t)?;
        write!(
            f,
            "input {}x{}, D={}: {:.2} M params, {:.2} GMACs, {:.2} GFLOPs",
            self.height,
            self.width,
            self.max_disparity,
            t.params as f64 / 1e6,
            t.macs as f64 / 1e9,
            t.flops() as f64 / 1e9
        )
    }
}

/// Trainable scalars of any module.
pub fn count_params<T: Real, M: Module<T>>(module: &M) -> u64 {
    module.num_params() as u64
}

/// `k_h·k_w·(c_in/groups)·c_out·h_out·w_out` for one input image.
pub fn conv_macs<T: Real>(params: &ConvParams<T>, in_h: usize, in_w: usize) -> Result<u64> {
    let (ho, wo) = params.output_dims(in_h, in_w)?;
    let (kh, kw) = params.kernel();
    let cin_g = params.in_channels() / params.groups;
    Ok((kh * kw * cin_g * params.out_channels() * ho * wo) as u64)
}

/// `Σ_d C·(H/4)·(W/4 − d)` over the `D/4` shifts that stay inside the image.
pub fn correlation_macs(channels: usize, h4: usize, w4: usize, max_disparity: usize) -> u64 {
    (0..max_disparity / 4)
        .filter(|&d| d < w4)
        .map(|d| (channels * h4 * (w4 - d)) as u64)
        .sum()
}

struct Walker {
    records: Vec<LayerRecord>,
    stage: Stage,
    /// Images per forward pass through the current stage.
    images: u64,
}

impl Walker {
    fn push(&mut self, name: String, params: usize, macs: u64, elementwise: u64) {
        self.records.push(LayerRecord {
            name,
            stage: self.stage,
            params: params as u64,
            macs: macs * self.images,
            elementwise_ops: elementwise * self.images,
        });
    }

    fn conv<T: Real>(&mut self, name: &str, c: &Conv2d<T>, hw: (usize, usize)) -> Result<(usize, usize)> {
        self.push(name.to_string(), c.num_params(), conv_macs(&c.params, hw.0, hw.1)?, 0);
        c.params.output_dims(hw.0, hw.1)
    }

    fn conv_bn<T: Real>(&mut self, name: &str, c: &ConvBn<T>, hw: (usize, usize)) -> Result<(usize, usize)> {
        let out = self.conv(&format!("{name}.conv"), &c.conv, hw)?;
        let numel = (c.conv.params.out_channels() * out.0 * out.1) as u64;
        let act = if c.act == Activation::Relu6 { numel } else { 0 };
        self.push(format!("{name}.bn"), c.bn.num_params(), 0, numel + act);
        Ok(out)
    }

    fn block<T: Real>(&mut self, name: &str, b: &InvertedResidual<T>, hw: (usize, usize)) -> Result<(usize, usize)> {
        let hw1 = self.conv_bn(&format!("{name}.expand"), &b.expand, hw)?;
        let hw2 = self.conv_bn(&format!("{name}.depthwise"), &b.depthwise, hw1)?;
        let out = self.conv_bn(&format!("{name}.project"), &b.project, hw2)?;
        if b.skip {
            let numel = (b.project.conv.params.out_channels() * out.0 * out.1) as u64;
            self.push(format!("{name}.skip"), 0, 0, numel);
        }
        Ok(out)
    }

    fn msca<T: Real>(&mut self, name: &str, m: &Msca<T>, hw: (usize, usize)) -> Result<()> {
        self.conv(&format!("{name}.branch_1"), &m.branch_1, hw)?;
        for (v, h) in &m.strips {
            let k = v.params.kernel().0;
            self.conv(&format!("{name}.strip_{k}.vertical"), v, hw)?;
            self.conv(&format!("{name}.strip_{k}.horizontal"), h, hw)?;
        }
        self.conv(&format!("{name}.mixer"), &m.mixer, hw)?;
        let numel = (m.mixer.params.out_channels() * hw.0 * hw.1) as u64;
        self.push(format!("{name}.excite"), 0, 0, numel);
        Ok(())
    }
}

/// Per-layer parameters and MACs for one stereo pair at `height × width`.
/// The backbone runs once per image, so its MACs count twice.
pub fn count_flops<T: Real>(model: &Model<T>, height: usize, width: usize) -> Result<ComplexityReport> {
    if height == 0 || width == 0 || !height.is_multiple_of(32) || !width.is_multiple_of(32) {
        return Err(Error::config(format!("analysis: dims {height}x{width} must be nonzero multiples of 32")));
    }
    let d = model.config.max_disparity;
    let mut w = Walker {
        records: Vec::new(),
        stage: Stage::FeatureExtraction,
        images: 2,
    };

    let bb = &model.backbone;
    let mut hw = (height, width);
    for (i, c) in bb.stem.iter().enumerate() {
        hw = w.conv_bn(&format!("backbone.stem.{i}"), c, hw)?;
    }
    let mut skips = Vec::new();
    for (i, st) in bb.stages.iter().enumerate() {
        for (j, b) in st.iter().enumerate() {
            hw = w.block(&format!("backbone.stage{i}.{j}"), b, hw)?;
        }
        skips.push(hw);
    }
    let mut c_prev = bb.config.stage_channels[3];
    for (lvl, (l, name)) in bb.decoder.iter().zip(["dec16", "dec8", "dec4"]).enumerate() {
        let target = skips[2 - lvl];
        w.push(format!("backbone.{name}.upsample"), 0, 0, (c_prev * target.0 * target.1) as u64);
        let p = format!("backbone.{name}");
        w.conv_bn(&format!("{p}.project"), &l.project, target)?;
        let skip_c = l.project.conv.params.out_channels();
        w.push(format!("{p}.skip"), 0, 0, (skip_c * target.0 * target.1) as u64);
        w.conv_bn(&format!("{p}.depthwise"), &l.depthwise, target)?;
        w.conv_bn(&format!("{p}.pointwise"), &l.pointwise, target)?;
        c_prev = l.pointwise.conv.params.out_channels();
    }

    w.stage = Stage::Cost;
    w.images = 1;
    let q = (height / 4, width / 4);
    let c4 = bb.config.pyramid_channels()[0];
    w.push("correlation".into(), 0, correlation_macs(c4, q.0, q.1, d), 0);

    w.stage = Stage::CostAggregation;
    let agg = &model.aggregator;
    let mut hw = q;
    let mut enc_hw = Vec::new();
    for (i, st) in agg.stages.iter().enumerate() {
        let p = format!("aggregation.enc{}", 4 << i);
        if let Some(t) = &st.transition {
            hw = w.block(&format!("{p}.transition"), t, hw)?;
        }
        for (j, b) in st.blocks.iter().enumerate() {
            hw = w.block(&format!("{p}.blocks.{j}"), b, hw)?;
        }
        if let Some(m) = &st.msca {
            w.msca(&format!("{p}.msca"), m, hw)?;
        }
        enc_hw.push(hw);
    }
    let ch = agg.config.channels;
    for ((step, name), i) in agg.decoder.iter().zip(["dec8", "dec4"]).zip([1usize, 0]) {
        let target = enc_hw[i];
        let p = format!("aggregation.{name}");
        w.push(format!("{p}.upsample"), 0, 0, (ch[i + 1] * target.0 * target.1) as u64);
        w.conv_bn(&format!("{p}.project"), &step.project, target)?;
        w.push(format!("{p}.skip"), 0, 0, (ch[i] * target.0 * target.1) as u64);
        w.block(&format!("{p}.fuse"), &step.fuse, target)?;
    }

    w.stage = Stage::DisparityRegression;
    let vol = (d / 4 * q.0 * q.1) as u64;
    w.push("soft_argmax".into(), 0, vol, vol);
    w.push("upsample".into(), 0, 0, (height * width) as u64);

    Ok(ComplexityReport {
        height,
        width,
        max_disparity: d,
        records: w.records,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageTimings {
    /// Median per stage, in [`Stage::ALL`] order.
    pub stages: [Duration; 4],
    /// Median end-to-end time of the same runs.
    pub total: Duration,
    pub repeats: usize,
    pub threads: usize,
}

impl StageTimings {
    pub fn stage(&self, s: Stage) -> Duration {
        self.stages[s as usize]
    }

    pub fn stage_sum(&self) -> Duration {
        self.stages.iter().sum()
    }
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

/// Times the four stages on a random stereo pair after `warmup` untimed runs.
pub fn profile(model: &Model<f32>, height: usize, width: usize, warmup: usize, repeats: usize) -> Result<StageTimings> {
    if repeats == 0 {
        return Err(Error::config("profile: repeats must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shape = Shape::new(1, 3, height, width);
    let mut img = || Tensor::from_fn(shape, |_, _, _, _| StandardNormal.sample(&mut rng));
    let (left, right) = (img(), img());
    let mut samples: Vec<[Duration; 5]> = Vec::with_capacity(repeats);
    for i in 0..warmup + repeats {
        let t0 = Instant::now();
        let (fl, fr) = model.feature_extraction(&left, &right)?;
        let t1 = Instant::now();
        let vol = model.cost(&fl, &fr)?;
        let t2 = Instant::now();
        let agg = model.cost_aggregation(&vol, &fl)?;
        let t3 = Instant::now();
        let disp = model.disparity_regression(&agg, height, width)?;
        let t4 = Instant::now();
        std::hint::black_box(disp);
        if i >= warmup {
            samples.push([t1 - t0, t2 - t1, t3 - t2, t4 - t3, t4 - t0]);
        }
    }
    let col = |k: usize| median(samples.iter().map(|s| s[k]).collect());
    Ok(StageTimings {
        stages: [col(0), col(1), col(2), col(3)],
        total: col(4),
        repeats,
        threads: rayon::current_num_threads(),
    })
}
