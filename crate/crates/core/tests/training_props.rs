use ifr_core::blocks::{HeadConfig, ParamSet, Strategy};
use ifr_core::data::{generate, load_container, save_container, DatasetSpec};
use ifr_core::solver::SolverConfig;
use ifr_core::training::{
    evaluate, from_checkpoint, sgd_step, to_checkpoint, train, HeadModel, HeadParams, TrainConfig,
    TrainState,
};

fn short(total: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        log_every: 10,
        ..TrainConfig::scaled(total)
    }
}

fn presets() -> Vec<HeadConfig> {
    vec![
        HeadConfig::toy(Strategy::ExplicitIndependent, 0),
        HeadConfig::toy(Strategy::ExplicitIndependent, 2),
        HeadConfig::toy(Strategy::UnrolledShared, 4),
        HeadConfig::toy(Strategy::ImplicitBroyden, 15),
    ]
}

fn loss_bits(state: &TrainState) -> Vec<u64> {
    state.loss_history.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn fixed_seed_training_is_bit_deterministic() {
    let ds = generate(&DatasetSpec::new(1, 40)).unwrap();
    for head in presets() {
        let model = HeadModel::new(head, SolverConfig::default()).unwrap();
        let (a, log_a) = train(&model, &short(20), &ds).unwrap();
        let (b, log_b) = train(&model, &short(20), &ds).unwrap();
        assert_eq!(loss_bits(&a), loss_bits(&b));
        assert_eq!(a.params, b.params);
        assert_eq!(log_a, log_b);
    }
}

#[test]
fn zero_iterations_return_the_initial_state() {
    let ds = generate(&DatasetSpec::new(1, 10)).unwrap();
    let model = HeadModel::new(HeadConfig::toy(Strategy::ImplicitBroyden, 15), SolverConfig::default()).unwrap();
    let cfg = TrainConfig { total_iters: 0, ..TrainConfig::default() };
    let (state, log) = train(&model, &cfg, &ds).unwrap();
    assert_eq!(state, TrainState::new(HeadParams::init(&model.config, cfg.seed).unwrap()));
    assert!(log.is_empty());
}

fn scalar_state(v: f64) -> (TrainState, HeadParams) {
    let cfg = HeadConfig::toy(Strategy::ExplicitIndependent, 0);
    let mut params = HeadParams::init(&cfg, 0).unwrap();
    for t in params.tensors_mut() {
        t.fill(v);
    }
    let mut grads = params.zeros_like();
    for t in grads.tensors_mut() {
        t.fill(1.0);
    }
    (TrainState::new(params), grads)
}

#[test]
fn sgd_momentum_recursion() {
    let (mut s, g) = scalar_state(1.0);
    assert!(sgd_step(&mut s, &g, 0.1, 0.0));
    assert!(s.params.named_tensors().iter().all(|(_, t)| t.data().iter().all(|&v| (v - 0.9).abs() < 1e-15)));

    let (mut s, g) = scalar_state(1.0);
    sgd_step(&mut s, &g, 0.1, 0.9);
    sgd_step(&mut s, &g, 0.1, 0.9);
    assert!(s.params.named_tensors().iter().all(|(_, t)| t.data().iter().all(|&v| (v - 0.71).abs() < 1e-14)));

    let (mut s, g) = scalar_state(1.0);
    let before = s.clone();
    assert!(sgd_step(&mut s, &g.zeros_like(), 0.1, 0.9));
    assert_eq!(s.params, before.params);
}

#[test]
fn non_finite_gradients_are_skipped() {
    let (mut s, mut g) = scalar_state(1.0);
    g.tensors_mut()[0].data_mut()[0] = f64::NAN;
    let before = s.params.clone();
    assert!(!sgd_step(&mut s, &g, 0.1, 0.9));
    assert_eq!(s.params, before);
    assert_eq!(s.skipped_steps, 1);
}

#[test]
fn training_reduces_the_loss_for_every_preset() {
    let ds = generate(&DatasetSpec::new(1, 60)).unwrap();
    for head in presets() {
        let name = format!("{} {}", head.strategy, head.depth_or_budget);
        let model = HeadModel::new(head, SolverConfig::default()).unwrap();
        let (state, log) = train(&model, &short(80), &ds).unwrap();
        let h = &state.loss_history;
        let first = h[..10].iter().sum::<f64>() / 10.0;
        let last = h[h.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(last < first, "{name}: {first} -> {last}");
        assert_eq!(log.len(), 8);
        assert!(log.iter().all(|r| (0.0..=1.0).contains(&r.held_out_iou)));
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let ds = generate(&DatasetSpec::new(2, 20)).unwrap();
    let model = HeadModel::new(HeadConfig::toy(Strategy::ImplicitBroyden, 10), SolverConfig::default()).unwrap();
    let (state, _) = train(&model, &short(10), &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.ifr");
    save_container(&path, &to_checkpoint(&model, &state.params).unwrap()).unwrap();
    let (model2, params2) = from_checkpoint(&load_container(&path).unwrap()).unwrap();
    assert_eq!(model2, model);
    assert_eq!(params2, state.params);
    let a = evaluate(&model, &state.params, ds.evaluation()).unwrap();
    let b = evaluate(&model2, &params2, ds.evaluation()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_evaluation_set_is_rejected() {
    let model = HeadModel::new(HeadConfig::toy(Strategy::UnrolledShared, 2), SolverConfig::default()).unwrap();
    let params = HeadParams::init(&model.config, 0).unwrap();
    assert!(evaluate(&model, &params, &[]).is_err());
}
