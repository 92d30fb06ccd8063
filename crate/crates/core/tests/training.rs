mod common;

use common::*;
use posnegdm::autodiff::{grad_check_fd, Graph, Tensor};
use posnegdm::classifier::{McArch, MortalityClassifier};
use posnegdm::model::{DualSight, ModelKind};
use posnegdm::rng::{stream, Stream};
use posnegdm::training::*;
use posnegdm::Error;
use proptest::prelude::*;

fn scalar(g: &Graph<'_, f64>, v: posnegdm::autodiff::Var) -> f64 {
    g.value(v).item()
}

#[test]
fn action_loss_examples() {
    let w = LossWeights::default();
    let mut g = Graph::<f64>::eval();
    let logits = g.constant(Tensor::zeros(&[2, 25]));
    let l = loss_action_posneg(&mut g, logits, &[3, 7], &[true, false], &[true, true], &w).unwrap();
    let ln25 = 25f64.ln();
    assert!((scalar(&g, l) - (ln25 - 0.5 * ln25)).abs() < 1e-12);
    assert!((scalar(&g, l) - 1.6094).abs() < 1e-4);

    let eta0 = LossWeights { eta: 0.0, ..w.clone() };
    let l = loss_action_posneg(&mut g, logits, &[3, 7], &[true, false], &[true, true], &eta0).unwrap();
    assert!((scalar(&g, l) - ln25).abs() < 1e-12);

    // Only positives: plain mean cross-entropy whatever eta is.
    let t = Tensor::new(vec![2, 25], (0..50).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let x = g.constant(t);
    let l = loss_action_posneg(&mut g, x, &[1, 20], &[true, true], &[true, true], &w).unwrap();
    let plain = g.cross_entropy_mean(x, &[1, 20]).unwrap();
    assert_eq!(scalar(&g, l), scalar(&g, plain));
}

#[test]
fn negative_term_respects_cap() {
    let w = LossWeights::default();
    let mut g = Graph::<f64>::eval();
    let mut row = vec![0.0; 25];
    row[0] = 100.0;
    let logits = g.constant(Tensor::new(vec![1, 25], row).unwrap());
    let l = loss_action_posneg(&mut g, logits, &[4], &[false], &[true], &w).unwrap();
    assert_eq!(scalar(&g, l), -0.5 * 10.0);
}

#[test]
fn state_loss_examples() {
    let mut g = Graph::<f64>::eval();
    let p = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let l = loss_state(&mut g, p, p, &[true, true]).unwrap();
    assert_eq!(scalar(&g, l), 0.0);
    let t = g.constant(Tensor::new(vec![2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap());
    let l = loss_state(&mut g, p, t, &[true, true]).unwrap();
    assert_eq!(scalar(&g, l), 1.0);
    let t = g.constant(Tensor::new(vec![2, 2], vec![1.0, 4.0, 100.0, -100.0]).unwrap());
    let l = loss_state(&mut g, p, t, &[true, false]).unwrap();
    assert_eq!(scalar(&g, l), 2.0);
    assert!(matches!(loss_state(&mut g, p, t, &[false, false]), Err(Error::Contract(_))));
}

#[test]
fn survival_loss_examples() {
    let half = constant_classifier(D, 0.0);
    let mut g = Graph::<f64>::eval();
    let s = g.constant(Tensor::new(vec![3, D], vec![0.7; 3 * D]).unwrap());
    let l = loss_survival(&mut g, &half, s, &[true, true, false]).unwrap();
    assert!((scalar(&g, l) - 2f64.ln()).abs() < 1e-6);

    let alive = constant_classifier(D, 60.0);
    let l = loss_survival(&mut g, &alive, s, &[true, true, true]).unwrap();
    assert!(scalar(&g, l).abs() < 1e-12);

    let unfrozen = MortalityClassifier::init(McArch::new(D), &mut stream(0, Stream::Init)).unwrap();
    assert!(matches!(
        loss_survival(&mut g, &unfrozen, s, &[true, true, true]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn total_loss_examples() {
    let mut g = Graph::<f64>::eval();
    let a = g.constant(Tensor::scalar(2.0));
    let b = g.constant(Tensor::scalar(3.0));
    let c = g.constant(Tensor::scalar(5.0));
    let w = LossWeights::default();
    assert_eq!((w.alpha, w.beta, w.gamma), (1.0, 0.1, 1.0));
    let t = loss_total(&mut g, a, b, c, &w).unwrap();
    assert!((scalar(&g, t) - 7.3).abs() < 1e-12);
    let zero = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        ..w
    };
    let t = loss_total(&mut g, a, b, c, &zero).unwrap();
    assert_eq!(scalar(&g, t), 0.0);
}

fn two_trajectory_batch() -> (posnegdm::DatasetSplit, TrainBatch) {
    let split = small_split(30, 5);
    let pos = split.train.iter().position(|t| t.outcome.is_positive()).unwrap();
    let neg = split.train.iter().position(|t| !t.outcome.is_positive()).unwrap();
    let picks = vec![(pos, 3), (neg, 1), (pos, 0), (neg, 3)];
    let batch = TrainBatch::build(&split.train, &picks, 3).unwrap();
    (split, batch)
}

#[test]
fn composite_loss_matches_finite_differences() {
    let (split, batch) = two_trajectory_batch();
    let mc = trained_classifier(&split);
    let model = DualSight::init(tiny_model_config(D), ModelKind::PosNegDm, &mut stream(2, Stream::Init)).unwrap();
    // Move the action head off zero so every path carries gradient.
    let mut params = model.params().clone();
    let head = params.find("action_head.weight").unwrap();
    for (i, v) in params.get_mut(head).data_mut().iter_mut().enumerate() {
        *v = ((i as f32) * 0.61).sin() * 0.3;
    }
    let model = DualSight::from_params(model.config().clone(), ModelKind::PosNegDm, params, false).unwrap();
    let w = LossWeights::default();
    let report = grad_check_fd(&model.params().cast::<f64>(), 1e-6, 6, |g, vars| {
        Ok(composite_loss(g, &model, vars, &batch, Some(&mc), &w)?.total)
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn decomposition_is_exact() {
    let (split, batch) = two_trajectory_batch();
    let mc = trained_classifier(&split);
    let model = DualSight::init(tiny_model_config(D), ModelKind::PosNegDm, &mut stream(3, Stream::Init)).unwrap();
    for w in [
        LossWeights::default(),
        LossWeights {
            alpha: 0.3,
            beta: 0.7,
            gamma: 0.25,
            ..LossWeights::default()
        },
    ] {
        let mut g = Graph::<f64>::eval();
        let vars = model.params().cast::<f64>().bind(&mut g, true);
        let lv = composite_loss(&mut g, &model, &vars, &batch, Some(&mc), &w).unwrap();
        let expect = w.combine(scalar(&g, lv.action), scalar(&g, lv.state), scalar(&g, lv.survival));
        assert_eq!(scalar(&g, lv.total), expect);
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let (split, batch) = two_trajectory_batch();
    let mc = trained_classifier(&split);
    let model = DualSight::init(tiny_model_config(D), ModelKind::PosNegDm, &mut stream(4, Stream::Init)).unwrap();
    let mut g = Graph::<f64>::eval();
    let vars = model.params().cast::<f64>().bind(&mut g, true);
    let lv = composite_loss(&mut g, &model, &vars, &batch, Some(&mc), &LossWeights::default()).unwrap();
    g.backward(lv.total).unwrap();
    let grads = model.params().cast::<f64>().grads_from(&g, &vars);
    for (i, gr) in grads.iter().enumerate() {
        let name = model.params().name(i);
        // Only rows of the lookup tables that the batch touched can move.
        if name.starts_with("embed_action") || name.starts_with("embed_timestep") {
            continue;
        }
        assert!(gr.iter().any(|&v| v != 0.0), "{name} has an all-zero gradient");
    }
}

#[test]
fn training_is_deterministic_and_keeps_classifier_frozen() {
    let split = small_split(40, 6);
    let mc = trained_classifier(&split);
    let hash = mc.weights_hash();
    let cfg = tiny_train_config(D, 20);
    let a = train_posnegdm(&split, &mc, &cfg).unwrap();
    let b = train_posnegdm(&split, &mc, &cfg).unwrap();
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.rows.len(), 20);
    assert_eq!(mc.weights_hash(), hash);
    assert!(a.model.state_head_trained());
    for r in &a.log.rows {
        let w = LossWeights::default();
        assert!((r.l_total - w.combine(r.l_action, r.l_state, r.l_survival)).abs() < 1e-5);
        assert!(r.l_action >= w.eta * w.neg_ce_cap - 1e-6);
    }
    let c = train_posnegdm(&split, &mc, &DMTrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.model.params(), c.model.params());
}

#[test]
fn training_log_csv_has_all_columns() {
    let split = small_split(20, 7);
    let out = train_baseline(ModelKind::Dt, &split, &tiny_train_config(D, 3)).unwrap();
    let mut buf = Vec::new();
    out.log.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iteration,l_action,l_state,l_survival,l_total,effective_lr");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("1,"));
}

#[test]
fn behaviour_cloning_only_samples_survivors() {
    let split = small_split(30, 8);
    let pool = window_pool(ModelKind::Bc, &split.train);
    assert!(!pool.is_empty());
    assert!(pool.iter().all(|&(i, _)| split.train[i].outcome.is_positive()));
    let all = window_pool(ModelKind::Dt, &split.train);
    assert!(all.iter().any(|&(i, _)| !split.train[i].outcome.is_positive()));
    let bc = train_baseline(ModelKind::Bc, &split, &tiny_train_config(D, 2)).unwrap();
    assert_eq!(bc.model.kind(), ModelKind::Bc);
}

#[test]
fn baseline_objectives() {
    let w = LossWeights::default();
    let dt = objective(ModelKind::Dt, &w);
    assert_eq!((dt.alpha, dt.beta, dt.gamma, dt.eta), (1.0, 0.1, 0.0, 1.0));
    let bc = objective(ModelKind::Bc, &w);
    assert_eq!((bc.gamma, bc.beta), (0.0, 0.1));
    let split = small_split(10, 1);
    assert!(matches!(
        train_baseline(ModelKind::PosNegDm, &split, &tiny_train_config(D, 1)),
        Err(Error::Config(_))
    ));
}

#[test]
fn zero_state_weight_marks_head_untrained() {
    let split = small_split(20, 9);
    let mc = random_classifier(D, 1);
    let mut cfg = tiny_train_config(D, 2);
    cfg.weights.beta = 0.0;
    let out = train_posnegdm(&split, &mc, &cfg).unwrap();
    assert!(!out.model.state_head_trained());
}

#[test]
fn divergence_reports_iteration() {
    let split = small_split(20, 10);
    let mc = random_classifier(D, 1);
    let mut cfg = tiny_train_config(D, 50);
    cfg.learning_rate = 1e30;
    cfg.warmup_steps = 0;
    match train_posnegdm(&split, &mc, &cfg) {
        Err(Error::Diverged { iteration, last_good }) => {
            assert!(iteration >= 1);
            assert!(last_good.len() > 0);
        }
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn negative_term_is_bounded(values in prop::collection::vec(-50.0f64..50.0, 25 * 3), targets in prop::collection::vec(0usize..25, 3)) {
        let w = LossWeights::default();
        let mut g = Graph::<f64>::eval();
        let logits = g.constant(Tensor::new(vec![3, 25], values).unwrap());
        let l = loss_action_posneg(&mut g, logits, &targets, &[false; 3], &[true; 3], &w).unwrap();
        prop_assert!(g.value(l).item().abs() <= w.eta.abs() * w.neg_ce_cap + 1e-12);
    }

    #[test]
    fn decomposition_holds_for_any_weights(a in 0.0f64..2.0, b in 0.0f64..2.0, c in 0.0f64..2.0, x in -5.0f64..5.0, y in 0.0f64..5.0, z in 0.0f64..5.0) {
        let w = LossWeights { alpha: a, beta: b, gamma: c, ..LossWeights::default() };
        let mut g = Graph::<f64>::eval();
        let (vx, vy, vz) = (g.constant(Tensor::scalar(x)), g.constant(Tensor::scalar(y)), g.constant(Tensor::scalar(z)));
        let t = loss_total(&mut g, vx, vy, vz, &w).unwrap();
        prop_assert_eq!(g.value(t).item(), w.combine(x, y, z));
    }
}
