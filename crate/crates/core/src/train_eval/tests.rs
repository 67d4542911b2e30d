use super::*;
use crate::deblur_net::NetConfig;
use crate::dp_formation::scenes::{generate_scene, SceneParams};
use crate::vl_encoder::OracleStub;

fn samples(n: usize, size: usize, seed: u64) -> Vec<TrainSample> {
    let enc = OracleStub::new(8).unwrap();
    let prompts = PromptSet::default();
    let params = SceneParams {
        height: size,
        width: size,
        ..SceneParams::default()
    };
    (0..n as u64)
        .map(|i| {
            let scene = generate_scene(&params, seed + i).unwrap();
            TrainSample::from_scene(&scene, 16, MapFormat::Ensemble, &prompts, &enc).unwrap()
        })
        .collect()
}

fn short(steps1: usize, steps2: usize) -> TrainConfig {
    TrainConfig {
        stage1_steps: steps1,
        stage2_steps: steps2,
        batch: 2,
        patch_size: 16,
        ..TrainConfig::cpu()
    }
}

fn tiny_net() -> DeblurNet {
    DeblurNet::new(NetConfig {
        widths: Some(vec![8, 12, 16]),
        ..NetConfig::small()
    })
    .unwrap()
}

#[test]
fn cosine_schedule_values() {
    let s = 1000;
    assert_eq!(cosine_lr(0, s, 2e-4, 1e-6), 2e-4);
    assert_eq!(cosine_lr(s, s, 2e-4, 1e-6), 1e-6);
    assert!((cosine_lr(s / 2, s, 2e-4, 1e-6) - 1.005e-4).abs() < 1e-12);
    for step in 1..s {
        assert!(cosine_lr(step, s, 2e-4, 1e-6) < cosine_lr(step - 1, s, 2e-4, 1e-6));
    }
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut adam = Adam::new(3, 0.9, 0.999, 1e-8);
    let mut p = vec![1.0, -2.0, 0.5];
    adam.step(&mut p, &[0.3, -4.0, 0.0], 0.1);
    assert!((p[0] - 0.9).abs() < 1e-6);
    assert!((p[1] + 1.9).abs() < 1e-6);
    assert_eq!(p[2], 0.5);
}

#[test]
fn zero_steps_returns_the_initialization() {
    let net = tiny_net();
    let data = samples(1, 16, 1);
    let enc = OracleStub::new(8).unwrap();
    let cfg = short(0, 0);
    let out = train(&net, &data, &LossConfig::default(), &cfg, &PromptSet::default(), &enc, &mut |_| {}).unwrap();
    assert_eq!(out.params, net.init_params(cfg.seed));
    assert!(out.log.is_empty());
    assert_eq!(out.status, TrainStatus::Completed);
}

#[test]
fn training_is_deterministic() {
    let net = tiny_net();
    let data = samples(2, 24, 2);
    let enc = OracleStub::new(8).unwrap();
    let run = || {
        train(&net, &data, &LossConfig::default(), &short(6, 5), &PromptSet::default(), &enc, &mut |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.params, b.params);
    assert_eq!(a.log.len(), 11);
    for e in &a.log {
        assert!((e.loss.total - (e.loss.char + 0.1 * e.loss.bal + 0.2 * e.loss.bwl)).abs() < 1e-9);
    }
    assert_eq!(a.log[6].stage, 2);
    assert_eq!(a.log[6].lr, 2e-4);
}

#[test]
fn non_finite_loss_aborts_with_last_good_params() {
    let net = tiny_net();
    let mut data = samples(1, 16, 3);
    data[0].gt.data_mut()[0] = f64::NAN;
    let enc = OracleStub::new(8).unwrap();
    let cfg = short(3, 0);
    let out = train(&net, &data, &LossConfig::default(), &cfg, &PromptSet::default(), &enc, &mut |_| {}).unwrap();
    assert!(matches!(out.status, TrainStatus::Aborted { global_step: 0, .. }));
    assert_eq!(out.params, net.init_params(cfg.seed));
}

#[test]
fn smoke_run_reduces_charbonnier() {
    let net = DeblurNet::new(NetConfig::small()).unwrap();
    let data: Vec<TrainSample> = samples(8, 32, 10);
    let enc = OracleStub::new(8).unwrap();
    let cfg = TrainConfig {
        stage1_steps: 200,
        stage2_steps: 0,
        lr_max: 1e-3,
        patch_size: 32,
        ..TrainConfig::cpu()
    };
    let out = train(&net, &data, &LossConfig::default(), &cfg, &PromptSet::default(), &enc, &mut |_| {}).unwrap();
    let chars: Vec<f64> = out.log.iter().map(|e| e.loss.char).collect();
    let ma = |i: usize| chars[i..i + 50].iter().sum::<f64>() / 50.0;
    assert!(ma(150) < ma(0), "{} vs {}", ma(150), ma(0));
}

#[test]
fn evaluation_and_ablation_harness() {
    let net = tiny_net();
    let p = net.init_params(0);
    let data = samples(2, 32, 20);
    let restored = evaluate(&net, &p, &data).unwrap();
    let input = evaluate_input(&data).unwrap();
    // Zero-initialized output layer: restoration is the center view.
    assert_eq!(restored, input);
    let entries = vec![
        AblationEntry {
            label: "a".into(),
            objective: Some(Objective::Total),
            model: Some((&net, &p)),
        },
        AblationEntry {
            label: "b".into(),
            objective: Some(Objective::Char),
            model: Some((&net, &p)),
        },
        AblationEntry {
            label: "missing".into(),
            objective: None,
            model: None,
        },
    ];
    let report = run_ablation(&entries, &data).unwrap();
    assert_eq!(report.rows[0].metrics, report.rows[1].metrics);
    assert!(report.rows[2].metrics.is_none());
    assert_eq!(report.psnr_order.len(), 2);
}

#[test]
fn blurmap_evaluation() {
    let data = samples(3, 32, 30);
    let r = evaluate_blurmaps(&data[..1], &data[1..]).unwrap();
    let acc = r.blurmap_accuracy.unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(r.ai1.unwrap() >= 0.0 && r.ai2.unwrap() >= 0.0);
}

#[test]
fn metrics_report_serializes_infinite_psnr() {
    let r = MetricsReport {
        psnr: f64::INFINITY,
        ..MetricsReport::default()
    };
    let j = serde_json::to_string(&r).unwrap();
    assert!(j.contains("\"inf\""));
    let back: MetricsReport = serde_json::from_str(&j).unwrap();
    assert_eq!(back.psnr, f64::INFINITY);
}

#[test]
fn separate_stages_reproduce_the_full_run() {
    let net = tiny_net();
    let data = samples(2, 24, 4);
    let enc = OracleStub::new(8).unwrap();
    let (loss, cfg, prompts) = (LossConfig::default(), short(4, 3), PromptSet::default());
    let full = train(&net, &data, &loss, &cfg, &prompts, &enc, &mut |_| {}).unwrap();
    let first = run_stage(&net, net.init_params(cfg.seed), &data, &loss, &cfg, Stage::First, &prompts, &enc, 0, &mut |_| {}).unwrap();
    let second = run_stage(&net, first.params, &data, &loss, &cfg, Stage::Second, &prompts, &enc, 4, &mut |_| {}).unwrap();
    assert_eq!(second.params, full.params);
    assert_eq!(&full.log[4..], &second.log[..]);
}
