use lightstereo::backbone::BackboneConfig;
use lightstereo::io::write_checkpoint;
use lightstereo::layers::Module;
use lightstereo::model::{Model, ModelConfig, Variant};
use lightstereo::training::{gen_stereogram, train_loop, train_step, AdamW, TrainConfig};

fn tiny_run() -> TrainConfig {
    TrainConfig {
        steps: 3,
        batch: 2,
        crop: (32, 64),
        max_disparity: 16,
        train_samples: 4,
        val_samples: 2,
        eval_every: 2,
        ..TrainConfig::default()
    }
}

fn model(seed: u64) -> Model<f32> {
    let cfg = ModelConfig::new(Variant::S, 16).with_backbone(BackboneConfig::compact());
    Model::new(&cfg, seed).unwrap()
}

#[test]
fn same_seeds_give_identical_history() {
    let cfg = tiny_run();
    let (mut a, mut b) = (model(5), model(5));
    let ha = train_loop(&mut a, &cfg, |_| {}).unwrap();
    let hb = train_loop(&mut b, &cfg, |_| {}).unwrap();
    assert_eq!(ha, hb);
    assert!(ha.records.iter().filter_map(|r| r.loss).all(f64::is_finite));
    assert_eq!(write_checkpoint(&a), write_checkpoint(&b));
}

#[test]
fn zero_learning_rate_leaves_weights_untouched() {
    let cfg = TrainConfig { lr: 0.0, weight_decay: 0.0, ..tiny_run() };
    let mut m = model(1);
    let before: Vec<Vec<f32>> = trainable(&mut m);
    train_loop(&mut m, &cfg, |_| {}).unwrap();
    assert_eq!(trainable(&mut m), before);
}

fn trainable(m: &mut Model<f32>) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    m.visit_mut("", &mut |p| {
        if p.grad.is_some() {
            out.push(p.value.to_vec());
        }
    });
    out
}

#[test]
fn every_parameter_receives_gradient() {
    let mut m = model(2);
    let samples: Vec<_> = (0..2).map(|i| gen_stereogram(100 + i, 32, 64, 16).unwrap()).collect();
    let batch: Vec<_> = samples.iter().collect();
    let mut opt = AdamW::new(4e-4, 1e-4);
    let loss = train_step(&mut m, &mut opt, &batch, 0).unwrap();
    assert!(loss.is_finite());
    let mut dead = Vec::new();
    let mut seen = 0;
    m.visit_mut("", &mut |p| {
        if let Some(g) = p.grad {
            seen += 1;
            if g.iter().all(|v| *v == 0.0) {
                dead.push(p.name.to_string());
            }
        }
    });
    assert!(seen > 100);
    assert!(dead.is_empty(), "no gradient reached {dead:?}");
}
