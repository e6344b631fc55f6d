use hazekit_core::data::{build_real_dataset, build_synthetic_dataset, CleanSource, PairedDataset, RealDataset};
use hazekit_core::guidance::{l_rea_graph, BackendConfig, EmbeddingBackend, PromptPair};
use hazekit_core::net::{ModelHandle, NetConfig, Role};
use hazekit_core::optim::{AdamConfig, OptimizerKind};
use hazekit_core::trainer::{
    bia_ema_step, bia_lower_step, read_bia_log, read_moc_log, run_bia, run_moc, train_supervised, write_bia_log,
    write_moc_log, BiaLogRow, BiaMode, BiaState, CheckpointEvery, Guidance, NoObserver, TrainConfig, TrainObserver,
};
use hazekit_core::{Error, Result};
use hazekit_tape::gradcheck::{central_differences, relative_error};
use hazekit_tape::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn student<E: hazekit_tape::Element>(seed: u64) -> ModelHandle<E> {
    ModelHandle::<f32>::init(NetConfig::symmetric(&[4, 8], 1), Role::StudentSyn, seed).unwrap().cast()
}

fn teacher() -> ModelHandle {
    ModelHandle::init(NetConfig::symmetric(&[8, 8], 1), Role::Teacher, 9).unwrap()
}

fn trained_prompts(seed: u64) -> PromptPair {
    let mut p = PromptPair::init(32, seed);
    p.trained = true;
    p
}

fn cfg() -> TrainConfig {
    TrainConfig {
        crop: 16,
        batch_size: 2,
        n_moc: 4,
        t_bia: 4,
        n_teacher: 4,
        eta_moc: 1e-3,
        eta_bia: 1e-3,
        ..TrainConfig::default()
    }
}

fn paired() -> PairedDataset {
    build_synthetic_dataset(&CleanSource::Procedural { size: 16 }, 6, 1).unwrap()
}

fn real() -> RealDataset {
    build_real_dataset(&CleanSource::Procedural { size: 16 }, 6, 2).unwrap()
}

fn batch<E: hazekit_tape::Element>(seed: u64) -> Tensor<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::<f32>::new(vec![2, 3, 8, 8], (0..384).map(|_| rng.random::<f32>()).collect()).cast()
}

fn filled<E: hazekit_tape::Element>(m: &ModelHandle<E>, v: f64) -> ModelHandle<E> {
    let mut out = m.clone();
    let n = out.params().numel();
    out.params_mut().assign_f64(&vec![v; n]).unwrap();
    out
}

#[test]
fn ema_scalar_trace_is_one_minus_alpha_power() {
    let base = student::<f64>(0);
    let mut state =
        BiaState::from_models(filled(&base, 1.0), filled(&base, 0.0), OptimizerKind::Adam, AdamConfig::default())
            .unwrap();
    for _ in 0..3 {
        bia_ema_step(&mut state, 0.5).unwrap();
    }
    assert!(state.upper().params().to_f64_vector().iter().all(|&v| v == 0.875));
    assert!(state.lower().params().to_f64_vector().iter().all(|&v| v == 1.0));
}

#[test]
fn degenerate_alphas_are_exact() {
    let (lower, upper) = (student::<f32>(1), student::<f32>(2));
    let mut keep =
        BiaState::from_models(lower.clone(), upper.clone(), OptimizerKind::Adam, AdamConfig::default()).unwrap();
    bia_ema_step(&mut keep, 1.0).unwrap();
    assert_eq!(keep.upper().params(), upper.params());
    let mut copy = BiaState::from_models(lower.clone(), upper, OptimizerKind::Adam, AdamConfig::default()).unwrap();
    bia_ema_step(&mut copy, 0.0).unwrap();
    assert_eq!(copy.upper().params(), lower.params());
    assert!(matches!(bia_ema_step(&mut copy, 1.5), Err(Error::Config(_))));
}

#[test]
fn ema_contracts_by_alpha_against_a_frozen_lower() {
    let mut state =
        BiaState::from_models(student::<f64>(1), student::<f64>(2), OptimizerKind::Adam, AdamConfig::default())
            .unwrap();
    let linf = |s: &BiaState<f64>| {
        s.upper()
            .params()
            .to_f64_vector()
            .iter()
            .zip(s.lower().params().to_f64_vector())
            .map(|(u, l)| (u - l).abs())
            .fold(0.0, f64::max)
    };
    let mut prev = linf(&state);
    for _ in 0..5 {
        bia_ema_step(&mut state, 0.8).unwrap();
        let now = linf(&state);
        assert!((now - 0.8 * prev).abs() < 1e-12 * prev.max(1.0), "{now} vs {}", 0.8 * prev);
        prev = now;
    }
}

#[test]
fn mismatched_models_are_a_config_error() {
    let other = ModelHandle::<f32>::init(NetConfig::symmetric(&[4, 4], 1), Role::StudentSyn, 0).unwrap();
    let r = BiaState::from_models(student::<f32>(0), other, OptimizerKind::Adam, AdamConfig::default());
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn lower_step_never_touches_the_upper_model() {
    let backend = EmbeddingBackend::init(BackendConfig::default(), 0).unwrap();
    let prompts = trained_prompts(1);
    let g = Guidance { prompts: &prompts, backend: &backend };
    let mut state = BiaState::new(&student::<f32>(3), OptimizerKind::Adam, AdamConfig::default());
    let before = state.upper().params().clone();
    let acc = state.upper_accumulator().to_vec();
    let first = bia_lower_step(&mut state, &batch(0), g, 1e-2, true).unwrap();
    assert_eq!(first.l_1, Some(0.0));
    for s in 1..4 {
        bia_lower_step(&mut state, &batch(s), g, 1e-2, true).unwrap();
    }
    assert_eq!(state.upper().params(), &before);
    assert_eq!(state.upper_accumulator(), acc.as_slice());
    assert_ne!(state.lower().params(), &before);
}

#[test]
fn zero_step_size_leaves_the_lower_model() {
    let backend = EmbeddingBackend::init(BackendConfig::default(), 0).unwrap();
    let prompts = trained_prompts(1);
    let s = student::<f32>(3);
    let mut state = BiaState::new(&s, OptimizerKind::Adam, AdamConfig::default());
    bia_lower_step(&mut state, &batch(0), Guidance { prompts: &prompts, backend: &backend }, 0.0, true).unwrap();
    assert_eq!(state.lower().params(), s.params());
}

#[test]
fn sgd_lower_step_moves_by_minus_eta_times_gradient() {
    let backend = EmbeddingBackend::<f64>::init(BackendConfig::default(), 0).unwrap().cast();
    let prompts = trained_prompts(4);
    let guidance = Guidance { prompts: &prompts, backend: &backend };
    // distinct levels so L_1 is away from its kink
    let (lower, upper) = (student::<f64>(5), student::<f64>(6));
    let x: Tensor<f64> = batch(7);
    let eta = 0.05;

    let anchor = upper.forward(&x).unwrap().0;
    let objective = |m: &ModelHandle<f64>, grad: bool| -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let p = m.bind(&mut g, grad);
        let xv = g.constant(x.clone());
        let (out, _) = m.forward_graph(&mut g, &p, xv);
        let rea = l_rea_graph(&mut g, &backend, &prompts, out).unwrap();
        let a = g.constant(anchor.clone());
        let d = g.sub(out, a);
        let d = g.abs(d);
        let l1 = g.mean(d);
        let total = g.add(rea, l1);
        let value = g.value(total).item();
        if !grad {
            return (value, Vec::new());
        }
        let grads = g.backward(total);
        (value, p.iter().flat_map(|&v| grads.get(v).unwrap().data().to_vec()).collect())
    };
    let (_, grad) = objective(&lower, true);

    let mut state = BiaState::from_models(lower.clone(), upper, OptimizerKind::Sgd, AdamConfig::default()).unwrap();
    bia_lower_step(&mut state, &x, guidance, eta, true).unwrap();
    let before = lower.params().to_f64_vector();
    let after = state.lower().params().to_f64_vector();
    for ((b, a), gi) in before.iter().zip(&after).zip(&grad) {
        assert!(((a - b) - (-eta * gi)).abs() < 1e-7);
    }

    // and that gradient agrees with finite differences
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let picks: Vec<usize> = (0..10).map(|_| rng.random_range(0..before.len())).collect();
    let mut probe = lower.clone();
    let numeric = central_differences(&before, &picks, 1e-3, |v| {
        probe.params_mut().assign_f64(v).unwrap();
        objective(&probe, false).0
    });
    for (&i, n) in picks.iter().zip(&numeric) {
        assert!(relative_error(grad[i], *n, 1e-6) < 1e-4, "param {i}: {} vs {n}", grad[i]);
    }
}

#[test]
fn empty_loops_return_the_input_bitwise() {
    let s = student::<f32>(0);
    let moc = run_moc(&teacher(), &s, &paired(), &TrainConfig { n_moc: 0, ..cfg() }, &mut NoObserver).unwrap();
    assert_eq!(moc.student, s);
    assert!(moc.log.is_empty());
    let backend = EmbeddingBackend::init(BackendConfig::default(), 0).unwrap();
    let prompts = trained_prompts(1);
    let g = Guidance { prompts: &prompts, backend: &backend };
    let bia = run_bia(&s, &real(), g, &TrainConfig { t_bia: 0, ..cfg() }, BiaMode::Full, &mut NoObserver).unwrap();
    assert_eq!(bia.model.params(), s.params());
}

#[test]
fn first_iterate_hands_off_the_student() {
    let s = student::<f32>(4);
    let state = BiaState::new(&s, OptimizerKind::Adam, AdamConfig::default());
    assert_eq!(state.lower().params(), s.params());
    assert_eq!(state.upper().params(), s.params());
    assert_eq!(state.ema_distance(), 0.0);
}

#[test]
fn empty_datasets_are_input_errors() {
    let s = student::<f32>(0);
    let empty = PairedDataset::new(Vec::new(), Vec::new(), 0).unwrap();
    assert!(matches!(run_moc(&teacher(), &s, &empty, &cfg(), &mut NoObserver), Err(Error::Input(_))));
    let backend = EmbeddingBackend::init(BackendConfig::default(), 0).unwrap();
    let prompts = trained_prompts(1);
    let g = Guidance { prompts: &prompts, backend: &backend };
    let none = RealDataset::new(Vec::new(), 0).unwrap();
    assert!(matches!(run_bia(&s, &none, g, &cfg(), BiaMode::Full, &mut NoObserver), Err(Error::Input(_))));
}

#[test]
fn non_finite_loss_aborts_with_the_step() {
    let s = student::<f32>(0);
    let broken = filled(&teacher(), f64::NAN);
    match run_moc(&broken, &s, &paired(), &cfg(), &mut NoObserver) {
        Err(Error::NonFinite { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected a non-finite error, got {:?}", other.map(|r| r.log)),
    }
}

#[test]
fn untrained_prompts_block_adaptation() {
    let backend = EmbeddingBackend::init(BackendConfig::default(), 0).unwrap();
    let prompts = PromptPair::init(32, 0);
    let g = Guidance { prompts: &prompts, backend: &backend };
    assert!(matches!(run_bia(&student(0), &real(), g, &cfg(), BiaMode::Full, &mut NoObserver), Err(Error::State(_))));
}

#[test]
fn phases_are_deterministic() {
    let (t, s, d) = (teacher(), student::<f32>(0), paired());
    let a = run_moc(&t, &s, &d, &cfg(), &mut NoObserver).unwrap();
    let b = run_moc(&t, &s, &d, &cfg(), &mut NoObserver).unwrap();
    assert_eq!(a.student, b.student);
    assert_eq!(a.log, b.log);
    assert_ne!(a.student, s);
    let backend = EmbeddingBackend::init(BackendConfig::default(), 0).unwrap();
    let prompts = trained_prompts(1);
    let g = Guidance { prompts: &prompts, backend: &backend };
    for mode in [BiaMode::Full, BiaMode::LowerOnly, BiaMode::UpperOnly] {
        let x = run_bia(&a.student, &real(), g, &cfg(), mode, &mut NoObserver).unwrap();
        let y = run_bia(&a.student, &real(), g, &cfg(), mode, &mut NoObserver).unwrap();
        assert_eq!(x.model, y.model);
        assert_eq!(x.log, y.log);
    }
}

#[test]
fn logged_totals_are_sums_of_components() {
    let (t, d) = (teacher(), paired());
    let moc = run_moc(&t, &student(0), &d, &cfg(), &mut NoObserver).unwrap();
    let w = cfg().loss;
    for r in &moc.log {
        let sum = w.lambda_su * r.loss_su.unwrap()
            + w.lambda_ss * r.loss_ss.unwrap()
            + w.lambda_pe * r.loss_pe.unwrap()
            + r.loss_align.unwrap();
        assert!((r.loss_total - sum).abs() < 1e-6, "{r:?}");
    }
    let backend = EmbeddingBackend::init(BackendConfig::default(), 0).unwrap();
    let prompts = trained_prompts(1);
    let g = Guidance { prompts: &prompts, backend: &backend };
    let bia = run_bia(&moc.student, &real(), g, &cfg(), BiaMode::Full, &mut NoObserver).unwrap();
    for r in &bia.log {
        assert!((r.loss_total - (r.l_rea + r.l_1.unwrap())).abs() < 1e-7, "{r:?}");
    }
    let upper_only = run_bia(&moc.student, &real(), g, &cfg(), BiaMode::UpperOnly, &mut NoObserver).unwrap();
    assert!(upper_only.log.iter().all(|r| r.l_1.is_none() && r.loss_total == r.l_rea));
}

#[test]
fn supervised_training_skips_perceptual_and_alignment_terms() {
    let run = train_supervised(&teacher(), &paired(), &cfg(), &mut NoObserver).unwrap();
    assert_eq!(run.log.len(), 4);
    assert!(run.log.iter().all(|r| r.loss_pe.is_none() && r.loss_align.is_none()));
}

#[test]
fn logs_round_trip_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let moc = run_moc(&teacher(), &student(0), &paired(), &cfg(), &mut NoObserver).unwrap();
    write_moc_log(&dir.path().join("moc.csv"), &moc.log).unwrap();
    assert_eq!(read_moc_log(&dir.path().join("moc.csv")).unwrap(), moc.log);
    let rows = vec![
        BiaLogRow { step: 0, l_rea: 0.25, l_1: Some(0.0), loss_total: 0.25, ema_distance: 0.0 },
        BiaLogRow { step: 1, l_rea: 0.125, l_1: None, loss_total: 0.125, ema_distance: 1.5 },
    ];
    write_bia_log(&dir.path().join("bia.csv"), &rows).unwrap();
    assert_eq!(read_bia_log(&dir.path().join("bia.csv")).unwrap(), rows);
}

#[test]
fn checkpoint_observer_writes_intermediate_models() {
    let dir = tempfile::tempdir().unwrap();
    let mut obs = CheckpointEvery { dir: dir.path(), every: 2 };
    let moc = run_moc(&teacher(), &student(0), &paired(), &cfg(), &mut obs).unwrap();
    let last = ModelHandle::<f32>::load(&dir.path().join("student_moc_step00004")).unwrap();
    assert_eq!(last.params(), moc.student.params());
    assert!(dir.path().join("student_moc_step00002").exists());
    assert!(!dir.path().join("student_moc_step00003").exists());
}

/// Replays the closed form of the EMA from the recorded lower iterates.
struct ClosedForm {
    alpha: f64,
    steps: usize,
    sum: Vec<f64>,
}

impl TrainObserver for ClosedForm {
    fn on_bia_step(&mut self, row: &BiaLogRow, state: &BiaState) -> Result<()> {
        let k = self.alpha.powi((self.steps - 1 - row.step) as i32) * (1.0 - self.alpha);
        for (s, l) in self.sum.iter_mut().zip(state.lower().params().to_f64_vector()) {
            *s += k * l;
        }
        Ok(())
    }
}

#[test]
fn upper_model_matches_the_closed_form_ema() {
    let s = student::<f32>(0);
    let backend = EmbeddingBackend::init(BackendConfig::default(), 0).unwrap();
    let prompts = trained_prompts(1);
    let g = Guidance { prompts: &prompts, backend: &backend };
    let c = TrainConfig { t_bia: 30, alpha: 0.9, ..cfg() };
    let mut obs = ClosedForm { alpha: c.alpha, steps: c.t_bia, sum: vec![0.0; s.params().numel()] };
    let run = run_bia(&s, &real(), g, &c, BiaMode::Full, &mut obs).unwrap();
    let a_t = c.alpha.powi(c.t_bia as i32);
    let got = run.model.params().to_f64_vector();
    for ((theta0, sum), u) in s.params().to_f64_vector().iter().zip(&obs.sum).zip(&got) {
        assert!((a_t * theta0 + sum - u).abs() < 1e-6);
    }
}
