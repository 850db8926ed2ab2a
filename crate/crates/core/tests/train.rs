use std::collections::BTreeMap;

use num_rational::Ratio;
use pokebnn::graphir::build_pokebnn_toy_with_classes;
use pokebnn::nn::{Model, ModelConfig, Phase, Tensor};
use pokebnn::train::{
    adam_step, eval_averaged_top1, evaluate, kl_distill_loss, lr_at, read_teacher_csv, train_loop, AdamState, Dataset,
    MetricRecord, SyntheticSpec, ToyConfig, TrainConfig, TrainError,
};
use proptest::prelude::*;

fn toy_spec() -> SyntheticSpec {
    SyntheticSpec {
        samples: 40,
        classes: 5,
        shape: [16, 16, 3],
        noise: 1.0,
        seed: 3,
    }
}

fn model(seed: u64) -> Model {
    let g = build_pokebnn_toy_with_classes(Ratio::new(1, 4), 2, [16, 16, 3], 5).unwrap();
    Model::new(g, ModelConfig::default(), seed).unwrap()
}

fn short_cfg() -> TrainConfig {
    TrainConfig {
        total_steps: 8,
        phase_switch_step: Some(3),
        batch_size: 8,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn write_csv(text: &str) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.csv");
    std::fs::write(&path, text).unwrap();
    (dir, path)
}

#[test]
fn learning_rate_schedule() {
    let cfg = TrainConfig {
        total_steps: 750,
        base_lr: 6.4e-4,
        ..TrainConfig::default()
    };
    assert_eq!(lr_at(0, &cfg).unwrap(), 6.4e-4);
    assert_eq!(lr_at(750, &cfg).unwrap(), 0.0);
    assert!((lr_at(375, &cfg).unwrap() - 3.2e-4).abs() < 1e-15);
    assert!(matches!(lr_at(751, &cfg), Err(TrainError::StepRange { step: 751, total: 750 })));
    assert_eq!(cfg.switch_step(), 50);
    assert_eq!(cfg.phase_at(49), Phase::One);
    assert_eq!(cfg.phase_at(50), Phase::Two);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig { total_steps: 0, ..TrainConfig::default() },
        TrainConfig { phase_switch_step: Some(750), ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { beta1: 1.0, ..TrainConfig::default() },
        TrainConfig { binary_act_bound: 0.0, ..TrainConfig::default() },
        TrainConfig { tail_steps: 4, tail_checkpoints: 5, ..TrainConfig::default() },
        TrainConfig { tail_steps: 4, tail_checkpoints: 0, ..TrainConfig::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(TrainError::Config(_))), "{c:?}");
    }
}

#[test]
fn adam_with_zero_gradient_and_no_decay_is_identity() {
    let mut params = BTreeMap::from([("a.weight".to_string(), Tensor::vector(vec![1.0, -2.0, 3.0]))]);
    let before = params.clone();
    let grads = BTreeMap::from([("a.weight".to_string(), Tensor::vector(vec![0.0; 3]))]);
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut st = AdamState::default();
    for _ in 0..5 {
        adam_step(&mut params, &grads, &mut st, 1e-2, &cfg, &Model::is_weight).unwrap();
    }
    assert_eq!(params, before);
    assert_eq!(st.t, 5);
}

#[test]
fn weight_decay_applies_only_to_weights() {
    let mut params = BTreeMap::from([
        ("c.weight".to_string(), Tensor::vector(vec![2.0])),
        ("c.bn.scale".to_string(), Tensor::vector(vec![2.0])),
        ("c.act.alpha".to_string(), Tensor::vector(vec![2.0])),
    ]);
    let grads: BTreeMap<String, Tensor> = params.keys().map(|k| (k.clone(), Tensor::vector(vec![0.0]))).collect();
    let cfg = TrainConfig {
        weight_decay: 0.1,
        ..TrainConfig::default()
    };
    adam_step(&mut params, &grads, &mut AdamState::default(), 0.5, &cfg, &Model::is_weight).unwrap();
    assert!((params["c.weight"].data[0] - 2.0 * (1.0 - 0.5 * 0.1)).abs() < 1e-15);
    assert_eq!(params["c.bn.scale"].data[0], 2.0);
    assert_eq!(params["c.act.alpha"].data[0], 2.0);
}

#[test]
fn adam_first_step_moves_by_lr() {
    // The bias-corrected first step is lr * g / (|g| + eps).
    let mut params = BTreeMap::from([("p".to_string(), Tensor::vector(vec![0.0, 0.0]))]);
    let grads = BTreeMap::from([("p".to_string(), Tensor::vector(vec![3.0, -0.5]))]);
    let cfg = TrainConfig::default();
    adam_step(&mut params, &grads, &mut AdamState::default(), 0.01, &cfg, &|_| false).unwrap();
    assert!((params["p"].data[0] + 0.01).abs() < 1e-9);
    assert!((params["p"].data[1] - 0.01).abs() < 1e-9);
}

#[test]
fn adam_rejects_bad_gradients() {
    let mut params = BTreeMap::from([("p".to_string(), Tensor::vector(vec![0.0]))]);
    let cfg = TrainConfig::default();
    let nan = BTreeMap::from([("p".to_string(), Tensor::vector(vec![f64::NAN]))]);
    let r = adam_step(&mut params, &nan, &mut AdamState::default(), 0.1, &cfg, &|_| false);
    assert!(matches!(r, Err(TrainError::NonFiniteGradient(_))));
    let stray = BTreeMap::from([("q".to_string(), Tensor::vector(vec![1.0]))]);
    let r = adam_step(&mut params, &stray, &mut AdamState::default(), 0.1, &cfg, &|_| false);
    assert!(matches!(r, Err(TrainError::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_against_independent_formula(logits in prop::collection::vec(-6.0f64..6.0, 4), label in 0usize..4) {
        let s = Tensor::new([1, 1, 1, 4], logits.clone()).unwrap();
        let p = softmax(&logits);
        let own = Tensor::new([1, 1, 1, 4], p.clone()).unwrap();
        prop_assert!(kl_distill_loss(&s, &own).unwrap().abs() < 1e-12);

        let mut hot = vec![0.0; 4];
        hot[label] = 1.0;
        let ce = -p[label].ln();
        let kl = kl_distill_loss(&s, &Tensor::new([1, 1, 1, 4], hot).unwrap()).unwrap();
        prop_assert!((kl - ce).abs() < 1e-9 * (1.0 + ce));

        let uniform: f64 = p.iter().map(|q| 0.25 * (0.25 / q).ln()).sum();
        let kl = kl_distill_loss(&s, &Tensor::full([1, 1, 1, 4], 0.25)).unwrap();
        prop_assert!((kl - uniform).abs() < 1e-9 * (1.0 + uniform));
        prop_assert!(kl >= -1e-12);
    }
}

#[test]
fn kl_rejects_non_distribution() {
    let s = Tensor::zeros([1, 1, 1, 2]);
    let t = Tensor::new([1, 1, 1, 2], vec![0.7, 0.7]).unwrap();
    assert!(matches!(kl_distill_loss(&s, &t), Err(TrainError::Teacher(_))));
}

#[test]
fn teacher_csv_reading() {
    let (_d, p) = write_csv("0.25,0.75\n1, 0\n");
    let t = read_teacher_csv(&p, 2, 2).unwrap();
    assert_eq!(t.data, vec![0.25, 0.75, 1.0, 0.0]);
    for (text, n) in [
        ("0.25,0.75\n1,0\n", 3),
        ("0.25,0.5,0.25\n", 1),
        ("0.5,abc\n", 1),
        ("0.5,0.6\n", 1),
        ("-0.5,1.5\n", 1),
    ] {
        let (_d, p) = write_csv(text);
        assert!(matches!(read_teacher_csv(&p, n, 2), Err(TrainError::Teacher(_))), "{text:?}");
    }
    let missing = std::path::Path::new("/nonexistent/teacher.csv");
    assert!(read_teacher_csv(missing, 1, 2).is_err());
}

#[test]
fn short_run_is_bitwise_deterministic() {
    let data = Dataset::synthetic(&toy_spec()).unwrap();
    let run = || {
        let mut m = model(1);
        let mut log = Vec::new();
        let s = train_loop(&mut m, &data, &short_cfg(), Some(&mut log)).unwrap();
        (m.state_dict(), s.records, log)
    };
    let (a, ra, la) = run();
    let (b, rb, lb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(la, lb);
}

#[test]
fn metrics_log_is_ndjson() {
    let data = Dataset::synthetic(&toy_spec()).unwrap();
    let mut m = model(2);
    let mut log = Vec::new();
    let cfg = short_cfg();
    let s = train_loop(&mut m, &data, &cfg, Some(&mut log)).unwrap();
    let text = String::from_utf8(log).unwrap();
    let recs: Vec<MetricRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs, s.records);
    assert_eq!(recs.len(), cfg.total_steps);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r.step, i);
        assert_eq!(r.phase, if i < 3 { 1 } else { 2 });
        assert_eq!(r.lr, lr_at(i, &cfg).unwrap());
        assert!(r.loss.is_finite() && (0.0..=1.0).contains(&r.top1));
    }
}

#[test]
fn bounds_freeze_once_and_stay_fixed_through_tail() {
    let data = Dataset::synthetic(&toy_spec()).unwrap();
    let mut plain = model(3);
    let s = train_loop(&mut plain, &data, &short_cfg(), None).unwrap();
    assert_eq!(s.freeze_steps, vec![3]);
    assert!(plain.bound_states().values().all(|b| b.frozen && b.bound.is_finite() && b.bound > 0.0));

    let mut tailed = model(3);
    let cfg = TrainConfig {
        tail_steps: 4,
        tail_checkpoints: 2,
        ..short_cfg()
    };
    let st = train_loop(&mut tailed, &data, &cfg, None).unwrap();
    assert_eq!(st.freeze_steps, vec![3]);
    assert_eq!(st.records.len(), 12);
    assert!(st.records[8..].iter().all(|r| r.lr == 0.0));
    // Zero-LR tail: parameters and bounds are untouched, BatchNorm statistics still move.
    assert_eq!(tailed.params(), plain.params());
    assert_eq!(tailed.bound_states(), plain.bound_states());
    assert_ne!(tailed.running_stats(), plain.running_stats());
    assert_eq!(st.tail_checkpoints.len(), 2);
    assert_eq!(st.tail_checkpoints.last().unwrap(), &tailed.state_dict());
}

#[test]
fn class_mismatch_is_rejected() {
    let data = Dataset::synthetic(&SyntheticSpec { classes: 4, ..toy_spec() }).unwrap();
    let r = train_loop(&mut model(1), &data, &short_cfg(), None);
    assert!(matches!(r, Err(TrainError::Config(_))));
}

/// Forces every prediction to `class` by zeroing the classifier weights.
fn constant_predictor(m: &Model, class: usize) -> BTreeMap<String, Tensor> {
    let mut sd = m.state_dict();
    let (wname, _) = m
        .params()
        .iter()
        .filter(|(n, t)| n.ends_with(".weight") && t.shape[3] == 5 && t.shape[0] == 1)
        .last()
        .unwrap();
    let bname = wname.replace(".weight", ".bias");
    sd.get_mut(wname.as_str()).unwrap().data.fill(0.0);
    let b = sd.get_mut(&bname).unwrap();
    b.data.fill(0.0);
    b.data[class] = 1.0;
    sd
}

#[test]
fn averaged_accuracy() {
    let data = Dataset::synthetic(&toy_spec()).unwrap();
    let m = model(4);
    assert!(matches!(eval_averaged_top1(&m, &data, &[]), Err(TrainError::NoCheckpoints)));

    let mut trained = model(4);
    train_loop(&mut trained, &data, &short_cfg(), None).unwrap();
    let ct = trained.state_dict();
    let c0 = constant_predictor(&trained, 0);
    assert!((eval_averaged_top1(&m, &data, std::slice::from_ref(&c0)).unwrap() - 0.2).abs() < 1e-12);

    let single = evaluate(&mut trained, &data, Phase::Two, 64).unwrap();
    let same = eval_averaged_top1(&m, &data, &[ct.clone(), ct.clone(), ct.clone()]).unwrap();
    assert!((same - single).abs() < 1e-12);
    let mixed = eval_averaged_top1(&m, &data, &[ct, c0]).unwrap();
    assert!((mixed - (single + 0.2) / 2.0).abs() < 1e-12);
}

#[test]
fn toy_config_run_builds_matching_model() {
    let cfg = ToyConfig::from_json(
        r#"{"total_steps": 4, "phase_switch_step": 1, "batch_size": 4,
            "model": {"groups": 2}, "data": {"samples": 8, "classes": 3, "shape": [16, 16, 3]}}"#,
    )
    .unwrap();
    let (m, data, s) = cfg.run(None).unwrap();
    assert_eq!(m.classes(), 3);
    assert_eq!(data.len(), 8);
    assert_eq!(s.records.len(), 4);
    assert_eq!(s.freeze_steps, vec![1]);
}
