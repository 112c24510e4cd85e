use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lightstereo::analysis::count_flops;
use lightstereo::backbone::BackboneConfig;
use lightstereo::cost_volume::build_correlation_volume;
use lightstereo::io::{
    decode_kitti_disparity, decode_pfm, encode_kitti_disparity, encode_pfm, read_checkpoint, write_checkpoint, Pfm,
};
use lightstereo::layers::Module;
use lightstereo::metrics::compute_metrics;
use lightstereo::model::{Model, ModelConfig, Variant};
use lightstereo::ops::{channel_softmax, conv2d, ConvParams};
use lightstereo::regression::{soft_argmax, DisparityMap};
use lightstereo::{Shape, Tensor};

mod common;
use common::{conv_oracle, tensor};

fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale.max(y.abs()))
}

prop_compose! {
    fn conv_case()(seed in any::<u64>(), n in 1usize..3, groups in 1usize..4, cin_g in 1usize..4, cout_g in 1usize..3,
                   kh in 1usize..6, kw in 1usize..6, stride in 1usize..3, h in 5usize..10, w in 5usize..10, bias in any::<bool>())
        -> (Tensor<f64>, ConvParams<f64>) {
        let cin = groups * cin_g;
        let x = tensor(seed, Shape::new(n, cin, h, w), 1.0);
        let wt = tensor(seed ^ 1, Shape::new(groups * cout_g, cin_g, kh, kw), 1.0);
        let b = bias.then(|| (0..groups * cout_g).map(|i| i as f64 * 0.1 - 0.2).collect());
        (x, ConvParams::new(wt, b).with_stride(stride).with_padding(kh / 2, kw / 2).with_groups(groups))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_oracle((x, p) in conv_case()) {
        let y = conv2d(&x, &p).unwrap();
        prop_assert!(rel_close(y.data(), &conv_oracle(&x, &p), 1e-12));
    }

    #[test]
    fn same_padding_preserves_dims(k in (0usize..6).prop_map(|i| 2 * i + 1), h in 1usize..12, w in 1usize..12, c in 1usize..4) {
        let x = Tensor::<f64>::zeros(Shape::new(1, c, h.max(k), w.max(k)));
        for (kh, kw) in [(k, k), (k, 1), (1, k)] {
            let p = ConvParams::new(Tensor::zeros(Shape::new(c, 1, kh, kw)), None)
                .with_padding((kh - 1) / 2, (kw - 1) / 2)
                .with_groups(c);
            let y = conv2d(&x, &p).unwrap();
            prop_assert_eq!((y.shape().h, y.shape().w), (x.shape().h, x.shape().w));
        }
    }

    #[test]
    fn conv_is_linear((x, p) in conv_case(), a in -3.0f64..3.0) {
        let p = ConvParams { bias: None, ..p };
        let y = conv2d(&x, &p).unwrap();
        let ya = conv2d(&x.map(|v| v * a), &p).unwrap();
        let scaled: Vec<f64> = y.data().iter().map(|v| v * a).collect();
        prop_assert!(rel_close(ya.data(), &scaled, 1e-12));
    }

    #[test]
    fn softmax_is_a_distribution(seed in any::<u64>(), c in 1usize..12, scale in 0.1f64..200.0) {
        let x = tensor(seed, Shape::new(2, c, 3, 4), scale).cast::<f32>();
        let p = channel_softmax(&x).unwrap();
        for n in 0..2 { for y in 0..3 { for w in 0..4 {
            let mut sum = 0.0f64;
            for ch in 0..c {
                let v = p.at(n, ch, y, w);
                prop_assert!(v >= 0.0);
                sum += v as f64;
            }
            prop_assert!((sum - 1.0).abs() <= 1e-6, "sum {}", sum);
        }}}
    }

    #[test]
    fn soft_argmax_bounded_and_shift_invariant(seed in any::<u64>(), levels in 1usize..24, scale in 0.1f64..500.0, shift in -50.0f64..50.0) {
        let x = tensor(seed, Shape::new(1, levels, 3, 5), scale);
        let d = soft_argmax(&x).unwrap();
        for &v in d.data() {
            prop_assert!((0.0..=(levels - 1) as f64).contains(&v));
        }
        let shifted = soft_argmax(&x.map(|v| v + shift)).unwrap();
        prop_assert!(d.max_abs_diff(&shifted) < 1e-9);
    }

    #[test]
    fn correlation_is_translation_equivariant(seed in any::<u64>(), k in 1usize..4, c in 1usize..5) {
        let (h, w, wide) = (3, 12, 12 + k);
        let left = tensor(seed, Shape::new(1, c, h, wide), 1.0);
        let right = tensor(seed ^ 7, Shape::new(1, c, h, wide), 1.0);
        let crop = |t: &Tensor<f64>, off: usize| Tensor::from_fn(Shape::new(1, c, h, w), |_, ch, y, x| t.at(0, ch, y, x + off));
        let a = build_correlation_volume(&crop(&left, k), &crop(&right, k), 16).unwrap().data;
        let b = build_correlation_volume(&crop(&left, 0), &crop(&right, 0), 16).unwrap().data;
        // column x of the shifted view is column x + k of the original
        for d in 0..4 { for y in 0..h { for x in d..w - k {
            prop_assert!((a.at(0, d, y, x) - b.at(0, d, y, x + k)).abs() < 1e-12);
        }}}
    }

    #[test]
    fn metrics_nested_and_permutation_invariant(seed in any::<u64>(), n in 1usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
        let pred: Vec<f32> = gt.iter().map(|g| g + rng.random_range(-8.0..8.0)).collect();
        let mut valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        valid[0] = true;
        let m = compute_metrics(
            &DisparityMap::new(n, 1, pred.clone()).unwrap(),
            &DisparityMap::with_mask(n, 1, gt.clone(), valid.clone()).unwrap(),
        ).unwrap();
        prop_assert!(m.bad1 >= m.bad2 && m.bad2 >= m.bad3 && m.bad3 >= m.d1);
        prop_assert!(m.bad1 <= 1.0 && m.d1 >= 0.0);

        // reverse the pixel order and scramble values under invalid pixels
        let rev = |v: &[f32]| v.iter().rev().copied().collect::<Vec<_>>();
        let mut gt2 = rev(&gt);
        let valid2: Vec<bool> = valid.iter().rev().copied().collect();
        for (g, &ok) in gt2.iter_mut().zip(&valid2) {
            if !ok { *g = 1e6; }
        }
        let m2 = compute_metrics(
            &DisparityMap::new(n, 1, rev(&pred)).unwrap(),
            &DisparityMap::with_mask(n, 1, gt2, valid2).unwrap(),
        ).unwrap();
        prop_assert!((m.epe - m2.epe).abs() < 1e-9);
        prop_assert_eq!((m.bad1, m.bad2, m.bad3, m.d1, m.valid_pixels), (m2.bad1, m2.bad2, m2.bad3, m2.d1, m2.valid_pixels));
    }

    #[test]
    fn pfm_roundtrip_is_byte_identical(seed in any::<u64>(), w in 1usize..20, h in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f32> = (0..w * h).map(|_| rng.random_range(-1e3..1e3)).collect();
        let bytes = encode_pfm(&Pfm { width: w, height: h, values: values.clone() }).unwrap();
        let back = decode_pfm(&bytes).unwrap();
        prop_assert_eq!(&back.values, &values);
        prop_assert_eq!(encode_pfm(&back).unwrap(), bytes);
    }

    #[test]
    fn kitti_roundtrip_within_quantization(seed in any::<u64>(), w in 1usize..20, h in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f32> = (0..w * h).map(|_| rng.random_range(0.0..255.0)).collect();
        let valid: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.9)).collect();
        let map = DisparityMap::with_mask(w, h, values, valid).unwrap();
        let back = decode_kitti_disparity(&encode_kitti_disparity(&map).unwrap()).unwrap();
        for i in 0..w * h {
            if map.valid[i] && map.values[i] >= 1.0 / 256.0 {
                prop_assert!(back.valid[i]);
                prop_assert!((back.values[i] - map.values[i]).abs() <= 1.0 / 512.0);
            }
            if !map.valid[i] {
                prop_assert!(!back.valid[i]);
            }
        }
    }
}

fn small_model(variant: Variant, seed: u64) -> Model<f32> {
    let cfg = ModelConfig::new(variant, 32).with_backbone(BackboneConfig::compact());
    Model::new(&cfg, seed).unwrap()
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let a = small_model(Variant::S, 3);
    let bytes = write_checkpoint(&a);
    let mut b = small_model(Variant::S, 4);
    assert_ne!(write_checkpoint(&b), bytes);
    read_checkpoint(&mut b, &bytes).unwrap();
    assert_eq!(write_checkpoint(&b), bytes);
}

#[test]
fn macs_scale_with_area() {
    let m: Model<f32> = Model::new(&ModelConfig::new(Variant::S, 64), 0).unwrap();
    let small = count_flops(&m, 64, 96).unwrap();
    let big = count_flops(&m, 128, 192).unwrap();
    for (a, b) in small.records.iter().zip(&big.records) {
        assert_eq!(a.name, b.name);
        // correlation skips the out-of-range triangle, so it is not exactly quadratic
        if a.name != "correlation" {
            assert_eq!(4 * a.macs, b.macs, "{}", a.name);
        }
    }
}

#[test]
fn report_covers_every_trainable_tensor_once() {
    for v in [Variant::S, Variant::M] {
        let m = small_model(v, 0);
        let report = count_flops(&m, 64, 64).unwrap();
        let total: u64 = report.records.iter().map(|r| r.params).sum();
        assert_eq!(total, m.num_params() as u64);
        assert_eq!(report.totals().params, total);
        m.visit("", &mut |p| {
            if !p.trainable {
                return;
            }
            let owners = report
                .records
                .iter()
                .filter(|r| p.name.strip_prefix(r.name.as_str()).is_some_and(|rest| rest.starts_with('.') && !rest[1..].contains('.')))
                .count();
            assert_eq!(owners, 1, "{}", p.name);
        });
    }
}

#[test]
fn inference_is_deterministic_and_bounded() {
    let m = small_model(Variant::S, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mk = |rng: &mut ChaCha8Rng| Tensor::from_fn(Shape::new(1, 3, 64, 96), |_, _, _, _| rng.random_range(-3.0f32..3.0));
    let (l, r) = (mk(&mut rng), mk(&mut rng));
    let a = m.infer(&l, &r).unwrap();
    let b = m.infer(&l, &r).unwrap();
    assert_eq!(a, b);
    assert!(a.values.iter().all(|v| v.is_finite() && (0.0..=31.0).contains(v)));
}
