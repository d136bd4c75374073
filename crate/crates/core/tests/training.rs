use std::fs;

use omnidet::annotations::{Sample, Split, SupervisionKind};
use omnidet::assignment::{CellLabel, GuidanceSource};
use omnidet::model::{load_checkpoint, save_checkpoint, Branch, DetectorState};
use omnidet::synthetic::{generate, mix_seed, GeneratorConfig, TrainingPools};
use omnidet::train::{evaluate, run_experiment, sample_gradients, AssignmentRule, ExperimentConfig, Regime, StepRecord};

fn small_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        iterations: 40,
        burn_in: 10,
        checkpoint_every: 20,
        threads: 1,
        deterministic: true,
        generator: GeneratorConfig { n_box: 16, n_dot: 12, n_unlabeled: 24, n_val: 8, n_test: 8, ..GeneratorConfig::default() },
        ..ExperimentConfig::default()
    };
    cfg.loss.normalize_by_positives = true;
    cfg
}

fn data(cfg: &ExperimentConfig) -> Vec<Sample> {
    generate(&cfg.generator).unwrap()
}

fn bits(log: &[StepRecord]) -> Vec<[u64; 4]> {
    log.iter()
        .map(|r| [r.loss.box_reg.to_bits(), r.loss.box_pos.to_bits(), r.loss.box_neg.to_bits(), r.loss.total.to_bits()])
        .collect()
}

fn param_bits(state: &DetectorState) -> Vec<Vec<u64>> {
    state.params.iter().map(|p| p.values.iter().map(|v| v.to_bits()).collect()).collect()
}

#[test]
fn zero_weights_under_full_burn_in_reproduce_box_only() {
    let base = small_cfg();
    let samples = data(&base);
    let plain = run_experiment(&ExperimentConfig { regime: Regime::BoxOnly, ..base.clone() }, &samples, None).unwrap();

    let mut omni = ExperimentConfig { regime: Regime::BoxDotUnlabeled, burn_in: base.iterations, ..base.clone() };
    omni.loss.lambda = 0.0;
    omni.loss.beta = 0.0;
    let reduced = run_experiment(&omni, &samples, None).unwrap();

    assert_eq!(bits(&plain.log), bits(&reduced.log));
    assert_eq!(param_bits(&plain.state), param_bits(&reduced.state));
    assert_eq!(plain.state.momentum, reduced.state.momentum);
}

#[test]
fn box_only_trains_only_box_and_localization_heads() {
    let cfg = ExperimentConfig { regime: Regime::BoxOnly, ..small_cfg() };
    let run = run_experiment(&cfg, &data(&cfg), None).unwrap();
    let init = DetectorState::new(cfg.model.clone(), mix_seed(cfg.seed, "init", 0)).unwrap();
    for (p, q) in run.state.params.iter().zip(&init.params) {
        let frozen = p.name.starts_with(Branch::ClsDot.prefix()) || p.name.starts_with(Branch::ClsUnlabeled.prefix());
        assert_eq!(frozen, p.values == q.values, "{}", p.name);
    }
    for r in &run.log {
        assert_eq!([r.loss.dot_pos, r.loss.dot_neg, r.loss.unl_pos, r.loss.unl_neg], [0.0; 4]);
        assert!(!r.box_guided);
    }
}

#[test]
fn gamma_zero_without_ca_is_binary_cross_entropy() {
    let cfg = small_cfg();
    let samples = data(&cfg);
    let pools = TrainingPools::from_samples(&samples);
    let mut state = DetectorState::new(cfg.model.clone(), 7).unwrap();
    // spread the prior so probabilities are not all near 0.01
    for p in state.params.iter_mut().filter(|p| p.name.ends_with("out.bias")) {
        p.values.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut loss = cfg.loss.clone();
    loss.gamma = 0.0;
    loss.ca_enabled = false;
    loss.normalize_by_positives = false;
    let active = Regime::BoxDotUnlabeled.classifiers();
    for kind in SupervisionKind::ALL {
        for sample in pools.pool(kind).iter().take(3) {
            let out = sample_gradients(&state, sample, AssignmentRule::Guided(GuidanceSource::Igm), &active, &loss).unwrap();
            let probs = state.forward(&sample.image).unwrap().probs(Branch::classifier(kind)).unwrap();
            let (mut pos, mut neg) = (0.0, 0.0);
            for (l, grid) in probs.iter().enumerate() {
                for (&p, &label) in grid.values.iter().zip(&out.assignment.labels[l]) {
                    match label {
                        CellLabel::Pos => pos -= p.max(loss.epsilon).ln(),
                        CellLabel::Neg => neg -= (1.0 - p).max(loss.epsilon).ln(),
                        CellLabel::Ignore => {}
                    }
                }
            }
            let r = &out.report;
            let (got_pos, got_neg) = match kind {
                SupervisionKind::Box => (r.box_pos, r.box_neg),
                SupervisionKind::Dot => (r.dot_pos, r.dot_neg),
                SupervisionKind::Unlabeled => (r.unl_pos, r.unl_neg),
            };
            assert!((got_pos - pos).abs() <= 1e-12 * pos.abs().max(1.0), "{kind:?} pos {got_pos} vs {pos}");
            assert!((got_neg - neg).abs() <= 1e-12 * neg.abs().max(1.0), "{kind:?} neg {got_neg} vs {neg}");
        }
    }
}

#[test]
fn guidance_carries_no_gradient_into_other_branches() {
    let cfg = small_cfg();
    let pools = TrainingPools::from_samples(&data(&cfg));
    let state = DetectorState::new(cfg.model.clone(), 3).unwrap();
    let active = Regime::BoxDotUnlabeled.classifiers();
    for ca in [false, true] {
        let loss = omnidet::losses::LossConfig { ca_enabled: ca, ..cfg.loss.clone() };
        for kind in SupervisionKind::ALL {
            let own = Branch::classifier(kind);
            let sample = &pools.pool(kind)[0];
            for source in [GuidanceSource::Igm, GuidanceSource::Sgm] {
                let out = sample_gradients(&state, sample, AssignmentRule::Guided(source), &active, &loss).unwrap();
                let grads = out.grads.expect("every form has seeds");
                for (p, g) in state.params.iter().zip(&grads) {
                    let other_head = [Branch::ClsBox, Branch::ClsDot, Branch::ClsUnlabeled]
                        .iter()
                        .any(|b| *b != own && p.name.starts_with(b.prefix()));
                    if other_head {
                        assert!(g.iter().all(|&v| v == 0.0), "{kind:?} {source:?} leaks into {}", p.name);
                    }
                }
            }
        }
    }
}

#[test]
fn hidden_truth_of_training_samples_never_reaches_training() {
    let cfg = small_cfg();
    let samples = data(&cfg);
    let tampered: Vec<Sample> = samples
        .iter()
        .map(|s| {
            let truth = match s.split {
                Split::Val | Split::Test => s.hidden_truth().map(<[_]>::to_vec),
                _ => None,
            };
            Sample::new(s.id, s.split, s.image.clone(), s.supervision.clone(), truth).unwrap()
        })
        .collect();
    let a = run_experiment(&cfg, &samples, None).unwrap();
    let b = run_experiment(&cfg, &tampered, None).unwrap();
    assert_eq!(serde_json::to_string(&a.log).unwrap(), serde_json::to_string(&b.log).unwrap());
    assert_eq!(a.state, b.state);
}

#[test]
fn deterministic_runs_write_identical_logs_and_reports() {
    let cfg = small_cfg();
    let samples = data(&cfg);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_experiment(&cfg, &samples, Some(d.path())).unwrap();
    }
    for file in ["loss_log.jsonl", "ap_report.json", "config.toml", "checkpoints/final.ckpt"] {
        let a = fs::read(dirs[0].path().join(file)).unwrap();
        let b = fs::read(dirs[1].path().join(file)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn embedded_config_reproduces_the_report() {
    let cfg = small_cfg();
    let samples = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let first = run_experiment(&cfg, &samples, Some(dir.path())).unwrap();
    let again = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(again, cfg);
    let second = run_experiment(&again, &generate(&again.generator).unwrap(), None).unwrap();
    assert_eq!(first.report, second.report);
}

#[test]
fn zero_iterations_leave_only_the_initial_checkpoint() {
    let cfg = ExperimentConfig { iterations: 0, ..small_cfg() };
    let dir = tempfile::tempdir().unwrap();
    let run = run_experiment(&cfg, &data(&cfg), Some(dir.path())).unwrap();
    assert!(run.log.is_empty());
    let names: Vec<String> = fs::read_dir(dir.path().join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, vec!["step_000000.ckpt".to_string()]);
    assert_eq!(fs::read_to_string(dir.path().join("loss_log.jsonl")).unwrap(), "");
    let init = load_checkpoint(&dir.path().join("checkpoints/step_000000.ckpt")).unwrap();
    assert_eq!(init, run.state);
}

#[test]
fn periodic_checkpoints_round_trip() {
    let cfg = small_cfg();
    let dir = tempfile::tempdir().unwrap();
    let run = run_experiment(&cfg, &data(&cfg), Some(dir.path())).unwrap();
    let ckpt = dir.path().join("checkpoints");
    for step in [0, 20, 40] {
        assert!(ckpt.join(format!("step_{step:06}.ckpt")).exists());
    }
    let last = load_checkpoint(&ckpt.join("final.ckpt")).unwrap();
    assert_eq!(last, run.state);
    assert_eq!(last.iteration, 40);
    let copy = ckpt.join("copy.ckpt");
    save_checkpoint(&last, &copy).unwrap();
    assert_eq!(fs::read(&copy).unwrap(), fs::read(ckpt.join("final.ckpt")).unwrap());
}

#[test]
fn training_lowers_the_loss() {
    let cfg = ExperimentConfig { regime: Regime::BoxOnly, iterations: 150, ..small_cfg() };
    let run = run_experiment(&cfg, &data(&cfg), None).unwrap();
    let mean = |r: &[StepRecord]| r.iter().map(|s| s.loss.total).sum::<f64>() / r.len() as f64;
    let (head, tail) = (mean(&run.log[..20]), mean(&run.log[130..]));
    assert!(tail < 0.7 * head, "first 20 steps {head}, last 20 steps {tail}");
}

#[test]
fn non_finite_input_aborts_and_keeps_last_good_checkpoint() {
    let cfg = small_cfg();
    let samples: Vec<Sample> = data(&cfg)
        .into_iter()
        .map(|s| {
            if s.split != Split::TrainBox {
                return s;
            }
            let mut image = s.image.clone();
            image.data[0] = f32::NAN;
            Sample::new(s.id, s.split, image, s.supervision.clone(), s.hidden_truth().map(<[_]>::to_vec)).unwrap()
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let err = run_experiment(&cfg, &samples, Some(dir.path())).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
    let kept = load_checkpoint(&dir.path().join("checkpoints/last_good.ckpt")).unwrap();
    assert!(kept.params.iter().all(|p| p.values.iter().all(|v| v.is_finite())));
    assert_eq!(kept, DetectorState::new(cfg.model.clone(), mix_seed(cfg.seed, "init", 0)).unwrap());
}

#[test]
fn regime_needing_a_missing_form_is_refused() {
    let mut cfg = small_cfg();
    cfg.generator.n_dot = 0;
    let err = run_experiment(&cfg, &data(&cfg), None).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("box_only"), "{err}");
    let ok = ExperimentConfig { regime: Regime::BoxOnly, iterations: 2, ..cfg };
    run_experiment(&ok, &data(&ok), None).unwrap();
}

#[test]
fn evaluation_is_repeatable_and_thread_independent() {
    let cfg = small_cfg();
    let samples = data(&cfg);
    let state = run_experiment(&cfg, &samples, None).unwrap().state;
    let inf = cfg.inference_config();
    let (a, da) = evaluate(&state, &samples, Split::Test, &inf, 1).unwrap();
    let (b, db) = evaluate(&state, &samples, Split::Test, &inf, 1).unwrap();
    let (c, dc) = evaluate(&state, &samples, Split::Test, &inf, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(da, db);
    assert_eq!(da, dc);
}

#[test]
fn untrained_model_scores_near_zero() {
    let cfg = small_cfg();
    let samples = data(&cfg);
    let state = DetectorState::new(cfg.model.clone(), 0).unwrap();
    let (report, _) = evaluate(&state, &samples, Split::Test, &cfg.inference_config(), 1).unwrap();
    assert!(report.map < 0.05, "{}", report.map);
}

#[test]
fn missing_split_is_an_error() {
    let mut cfg = small_cfg();
    cfg.generator.n_test = 0;
    let samples = data(&cfg);
    let state = DetectorState::new(cfg.model.clone(), 0).unwrap();
    let err = evaluate(&state, &samples, Split::Test, &cfg.inference_config(), 1).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn one_small_step_on_a_fixed_batch_descends() {
    let cfg = small_cfg();
    let pools = TrainingPools::from_samples(&data(&cfg));
    let mut state = DetectorState::new(cfg.model.clone(), mix_seed(cfg.seed, "init", 0)).unwrap();
    let active = Regime::BoxDotUnlabeled.classifiers();
    let batch: Vec<_> = SupervisionKind::ALL.iter().map(|&k| pools.pool(k)[1].clone()).collect();
    let outcomes: Vec<_> = batch
        .iter()
        .map(|s| sample_gradients(&state, s, AssignmentRule::Guided(GuidanceSource::Igm), &active, &cfg.loss).unwrap())
        .collect();
    let before: f64 = outcomes.iter().map(|o| o.report.total).sum();
    let mut grads: Vec<Vec<f64>> = state.params.iter().map(|p| vec![0.0; p.values.len()]).collect();
    for o in &outcomes {
        for (acc, g) in grads.iter_mut().zip(o.grads.as_ref().unwrap()) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    let opt = omnidet::model::OptimizerConfig { learning_rate: 1e-5, ..cfg.optimizer };
    omnidet::model::sgd_step(&mut state, &grads, &opt, 0).unwrap();
    let after: f64 = batch
        .iter()
        .zip(&outcomes)
        .map(|(s, o)| {
            let fwd = state.forward(&s.image).unwrap();
            let own = fwd.probs(Branch::classifier(s.supervision.kind())).unwrap();
            let offsets = fwd.offsets();
            omnidet::train::form_loss(&s.supervision, &own, offsets.as_deref(), &o.assignment, &cfg.loss).unwrap().0.total
        })
        .sum();
    assert!(after < before, "{before} -> {after}");
}
