use proptest::prelude::*;
use sfod::detector::{DetectorConfig, ParamStore};
use sfod::engine::{adapt, adapt_step, ema_update, pretrain, AdaptConfig, PretrainConfig, TrainState};
use sfod::geom::LabeledSample;
use sfod::image::Image;
use sfod::synthdata::{render, DomainSpec, SceneSpec};
use tape::Tensor;

fn samples(preset: &str, first: u64, n: u64) -> Vec<LabeledSample> {
    let d = DomainSpec::preset(preset).unwrap();
    (first..first + n)
        .map(|i| {
            let (img, boxes, classes) = render(&d, &SceneSpec::default(), i);
            LabeledSample::new(img, boxes, classes).unwrap()
        })
        .collect()
}

fn target_images(n: u64) -> Vec<Image> {
    samples("target-color", 0, n).into_iter().map(|s| s.image).collect()
}

/// Untrained weights whose box head is confident in both object classes,
/// so every proposal yields pseudo-labels above a low threshold.
fn eager_source(det: &DetectorConfig) -> ParamStore<f32> {
    let mut ps = ParamStore::<f32>::init_detector(det, 11);
    ps.insert("roi.cls.bias".into(), Tensor::new(vec![3], vec![-8.0, 5.0, 5.0]));
    ps
}

fn eager_cfg() -> AdaptConfig {
    AdaptConfig {
        tau: 0.3,
        ..AdaptConfig::default()
    }
}

#[test]
fn zero_epoch_pretrain_returns_the_initialization() {
    let det = DetectorConfig::default();
    let init = ParamStore::<f32>::init_detector(&det, 4);
    let cfg = PretrainConfig {
        epochs: 0,
        ..PretrainConfig::default()
    };
    let mut log = Vec::new();
    let out = pretrain(&samples("source", 0, 2), &det, &cfg, init.clone(), &mut log).unwrap();
    assert_eq!(out.params, init);
    assert_eq!(out.iterations, 0);
    assert!(out.diverged.is_none());
    assert!(log.is_empty());
}

#[test]
fn pretrain_loss_on_a_fixed_batch_falls_over_100_steps() {
    let det = DetectorConfig::default();
    let data = samples("source", 0, 2);
    let cfg = PretrainConfig {
        epochs: 100,
        warmup_iters: 10,
        flip: false,
        ..PretrainConfig::default()
    };
    let mut log = Vec::new();
    let out = pretrain(&data, &det, &cfg, ParamStore::init_detector(&det, 0), &mut log).unwrap();
    assert_eq!(out.iterations, 100);
    assert!(out.diverged.is_none());
    let losses: Vec<f64> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["loss_total"].as_f64().unwrap())
        .collect();
    assert_eq!(losses.len(), 100);
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[90..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "loss {head} -> {tail}");
}

#[test]
fn step_without_pseudo_labels_only_advances_counters() {
    let det = DetectorConfig::default();
    // scores never reach 1, so nothing survives the gate
    let cfg = AdaptConfig {
        tau: 1.0,
        ..AdaptConfig::default()
    };
    let mut state = TrainState::new(&eager_source(&det), &det, &cfg).unwrap();
    let before = state.clone();
    let imgs = target_images(2);
    let refs: Vec<&Image> = imgs.iter().collect();
    let rep = adapt_step(&mut state, &refs, &det, &cfg, 1e-3, 0.5).unwrap();
    assert!(rep.skipped);
    assert_eq!(rep.pseudo_labels, 0);
    assert_eq!(rep.losses.loss_total, 0.0);
    assert_eq!(state.iter, before.iter + 1);
    assert_eq!(state.skipped, before.skipped + 1);
    assert_eq!(state.student, before.student);
    assert_eq!(state.teacher, before.teacher);
    assert_eq!(state.bank_teacher, before.bank_teacher);
    assert_eq!(state.bank_student, before.bank_student);
    assert_eq!(state.opt, before.opt);
    assert_ne!(state.rng, before.rng);
}

#[test]
fn loss_report_composition_and_total() {
    let det = DetectorConfig::default();
    let cfg = eager_cfg();
    let mut state = TrainState::new(&eager_source(&det), &det, &cfg).unwrap();
    let teacher = state.teacher.clone();
    let imgs = target_images(2);
    let refs: Vec<&Image> = imgs.iter().collect();
    let rep = adapt_step(&mut state, &refs, &det, &cfg, 1e-3, 0.5).unwrap();
    assert!(!rep.skipped);
    assert!(rep.pseudo_labels > 0);
    let l = &rep.losses;
    let (m, a, p) = (l.loss_mixup.unwrap(), l.loss_afsp.unwrap(), l.loss_pro.unwrap());
    assert!(l.loss_mt.is_none());
    assert!(m >= 0.0 && a >= 0.0 && p >= 0.0);
    assert!((l.loss_total - (m + a + 0.5 * p)).abs() <= 1e-6, "{l:?}");
    let keys: Vec<String> = serde_json::to_value(l).unwrap().as_object().unwrap().keys().cloned().collect();
    assert_eq!(keys, ["loss_afsp", "loss_mixup", "loss_pro", "loss_total"]);
    // the teacher gets no update from a step
    assert_eq!(state.teacher, teacher);
    assert_ne!(state.student_detector(), teacher);
    assert_eq!(rep.aug.len(), 2);
    assert_eq!(rep.norm_deviation.len(), 2);
}

#[test]
fn disabling_a_module_removes_its_term() {
    let det = DetectorConfig::default();
    let imgs = target_images(2);
    let refs: Vec<&Image> = imgs.iter().collect();
    let run = |cfg: AdaptConfig| {
        let mut state = TrainState::new(&eager_source(&det), &det, &cfg).unwrap();
        adapt_step(&mut state, &refs, &det, &cfg, 1e-3, 0.5).unwrap().losses
    };
    let l = run(AdaptConfig {
        enable_msp: false,
        ..eager_cfg()
    });
    assert!(l.loss_mixup.is_none() && l.loss_afsp.is_some() && l.loss_pro.is_some());
    assert!((l.loss_total - (l.loss_afsp.unwrap() + 0.5 * l.loss_pro.unwrap())).abs() <= 1e-6);
    let l = run(AdaptConfig {
        enable_afsp: false,
        ..eager_cfg()
    });
    assert!(l.loss_afsp.is_none() && l.loss_mt.is_some() && l.loss_mixup.is_some());
    let l = run(AdaptConfig {
        enable_pfd: false,
        ..eager_cfg()
    });
    assert!(l.loss_pro.is_none());
    assert!((l.loss_total - (l.loss_mixup.unwrap() + l.loss_afsp.unwrap())).abs() <= 1e-6);
    let l = run(AdaptConfig {
        enable_msp: false,
        enable_afsp: false,
        enable_pfd: false,
        ..eager_cfg()
    });
    assert_eq!(l.loss_total, l.loss_mt.unwrap());
}

#[test]
fn no_iterations_returns_the_source_weights() {
    let det = DetectorConfig::default();
    let source = eager_source(&det);
    let cfg = AdaptConfig {
        max_iter: Some(0),
        ..eager_cfg()
    };
    let mut log = Vec::new();
    let out = adapt(&target_images(4), &source, &det, &cfg, None, &mut log).unwrap();
    assert_eq!(out.teacher, source);
    assert_eq!(out.state.iter, 0);
}

fn short_run(seed: u64) -> (Vec<u8>, ParamStore<f32>) {
    let det = DetectorConfig::default();
    let cfg = AdaptConfig {
        epochs: 2,
        ema_period: Some(1),
        seed,
        ..eager_cfg()
    };
    let monitor = samples("target-color", 50, 2);
    let mut log = Vec::new();
    let out = adapt(&target_images(4), &eager_source(&det), &det, &cfg, Some(&monitor), &mut log).unwrap();
    assert_eq!(out.state.iter, 4);
    assert_eq!(out.monitor_map.len(), 2);
    (log, out.teacher)
}

#[test]
fn short_adaptation_is_deterministic_and_logs_every_step() {
    let (log_a, teacher_a) = short_run(3);
    let (log_b, teacher_b) = short_run(3);
    assert_eq!(log_a, log_b);
    assert_eq!(teacher_a, teacher_b);
    let text = String::from_utf8(log_a).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // two iterations and one summary per epoch
    assert_eq!(lines.len(), 6);
    for (k, l) in lines.iter().enumerate() {
        if k % 3 == 2 {
            assert!(l["map_monitor"].is_number());
            assert!(l["prototype_distances"].is_object());
        } else {
            for key in ["iter", "epoch", "lr", "alpha", "loss_total", "skipped", "pseudo_labels"] {
                assert!(!l[key].is_null(), "missing {key} in {l}");
            }
        }
    }
    assert_eq!(lines[0]["alpha"], 0.0);
    let (log_c, _) = short_run(4);
    assert_ne!(text.as_bytes(), &log_c[..]);
}

proptest! {
    #[test]
    fn ema_stays_between_teacher_and_student(
        t in prop::collection::vec(-10.0f32..10.0, 6),
        s in prop::collection::vec(-10.0f32..10.0, 6),
        eta in 0.0f64..=1.0,
    ) {
        let mut teacher = ParamStore::<f32>::new();
        teacher.insert("w".into(), Tensor::new(vec![2, 3], t.clone()));
        let mut student = ParamStore::<f32>::new();
        student.insert("w".into(), Tensor::new(vec![2, 3], s.clone()));
        ema_update(&mut teacher, &student, eta).unwrap();
        for ((&new, &a), &b) in teacher.expect("w").data().iter().zip(&t).zip(&s) {
            prop_assert!(new >= a.min(b) && new <= a.max(b), "{new} not between {a} and {b}");
        }
    }
}
