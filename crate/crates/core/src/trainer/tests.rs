use super::*;
use crate::autodiff::Tensor;
use crate::forecaster::{self, PROJ_BIAS, PROJ_WEIGHT};
use crate::synth::{self, SynthSpec};

fn tiny(n: usize, steps: usize, input: usize, horizon: usize) -> (ExperimentConfig, PreparedData, PriorGraph) {
    let d = synth::generate(&SynthSpec {
        n,
        steps,
        density: 0.4,
        noise: 0.05,
        seed: 5,
    })
    .unwrap();
    let mut cfg = ExperimentConfig::new(WindowSpec::new(input, horizon).unwrap());
    cfg.model.cell.hidden = 4;
    cfg.structure = structure::StructureConfig {
        embedding: 4,
        conv_channels: 2,
        kernel: 4,
        stride: 2,
        hidden: 4,
    };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg.train.val_samples = 2;
    cfg.graph.prior = PriorConfig::Random { density: 0.5, seed: 1 };
    let mut data = prepare(&cfg, &d.series, None).unwrap();
    data.prior = Some(d.truth.clone());
    (cfg, data, d.truth)
}

fn first_batch(cfg: &ExperimentConfig, data: &PreparedData, model: &GtsModel, count: usize) -> WindowBatch {
    let windows = data::make_windows(&data.scaled[TRAIN], cfg.window).unwrap();
    batch_of(&windows[..count], &data.scaled[TRAIN], cfg.window, &model.forecaster).unwrap()
}

fn store_of(values: &[(&str, Tensor)]) -> ParameterStore {
    let mut s = ParameterStore::new();
    for (k, v) in values {
        s.insert(*k, v.clone()).unwrap();
    }
    s
}

#[test]
fn learning_rate_decays_at_milestones() {
    let lr = |e| learning_rate(0.01, 0.1, &[0.6, 0.8], e, 100);
    assert_eq!(lr(0), 0.01);
    assert_eq!(lr(59), 0.01);
    assert!((lr(60) - 1e-3).abs() < 1e-15);
    assert!((lr(79) - 1e-3).abs() < 1e-15);
    assert!((lr(80) - 1e-4).abs() < 1e-15);
    assert!((lr(99) - 1e-4).abs() < 1e-15);
}

#[test]
fn clipping_rescales_only_large_gradients() {
    let mut g = store_of(&[("a", Tensor::vector(vec![6.0, 8.0]))]);
    assert_eq!(clip_global_norm(&mut g, 5.0), 10.0);
    assert_eq!(g.get("a").unwrap().data(), &[3.0, 4.0]);
    let before = g.clone();
    assert_eq!(clip_global_norm(&mut g, 5.0), 5.0);
    assert_eq!(g.get("a").unwrap().data(), before.get("a").unwrap().data());
}

#[test]
fn adam_matches_hand_updates() {
    let mut p = store_of(&[("w", Tensor::vector(vec![1.0, -2.0]))]);
    let mut adam = Adam::new(&p);
    let g1 = store_of(&[("w", Tensor::vector(vec![0.5, -3.0]))]);
    adam.step(&mut p, &g1, 0.1);
    // first bias-corrected step is lr · g/|g|
    let w = p.get("w").unwrap().data().to_vec();
    assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 1.9).abs() < 1e-7);

    let g2 = store_of(&[("w", Tensor::vector(vec![1.0, 1.0]))]);
    adam.step(&mut p, &g2, 0.1);
    let hand = |w0: f64, ga: f64, gb: f64| {
        let m = 0.9 * (0.1 * ga) + 0.1 * gb;
        let v = 0.999 * (0.001 * ga * ga) + 0.001 * gb * gb;
        let (mh, vh) = (m / (1.0 - 0.81), v / (1.0 - 0.999f64.powi(2)));
        w0 - 0.1 * mh / (vh.sqrt() + 1e-8)
    };
    let w = p.get("w").unwrap().data();
    assert!((w[0] - hand(1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 0.5, 1.0)).abs() < 1e-12);
    assert!((w[1] - hand(-2.0 + 0.1 * 3.0 / (3.0 + 1e-8), -3.0, 1.0)).abs() < 1e-12);
    assert_eq!(adam.steps(), 2);
}

#[test]
fn temperature_schedule_endpoints() {
    let s = AnnealSchedule::default().resolved(1000);
    assert_eq!(anneal_temperature(0, &s), 0.5);
    assert!((anneal_temperature(500, &s) - 0.1).abs() < 1e-12);
    assert_eq!(anneal_temperature(10_000, &s), 0.1);
    let mut last = f64::INFINITY;
    for step in (0..1000).step_by(37) {
        let t = anneal_temperature(step, &s);
        assert!(t <= last && t >= 0.1);
        last = t;
    }
}

#[test]
fn zero_lambda_loss_is_mae() {
    let (cfg, data, truth) = tiny(3, 120, 5, 2);
    let model = build_model(&cfg, &data).unwrap();
    let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let batch = first_batch(&cfg, &data, &model, 4);
    let noise = structure::logistic_noise(3, &mut ChaCha8Rng::seed_from_u64(2));
    let mut g = Graph::new();
    let out = model
        .loss(&mut g, &params, &batch, Some(&noise), 0.5, Some(truth.adjacency()), 0.0)
        .unwrap();
    assert_eq!(g.value(out.total).item(), g.value(out.mae).item());
    assert!(out.reg.is_none());

    let mut g = Graph::new();
    let out = model
        .loss(&mut g, &params, &batch, Some(&noise), 0.5, Some(truth.adjacency()), 3.0)
        .unwrap();
    let (mae, reg) = (g.value(out.mae).item(), g.value(out.reg.unwrap()).item());
    assert!((g.value(out.total).item() - (mae + 3.0 * reg)).abs() < 1e-12);
}

#[test]
fn exact_forecast_leaves_regularizer() {
    let (cfg, data, truth) = tiny(3, 120, 5, 2);
    let model = build_model(&cfg, &data).unwrap();
    let mut params = model.init_params(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    params.get_mut(PROJ_WEIGHT).unwrap().data_mut().fill(0.0);
    params.get_mut(PROJ_BIAS).unwrap().data_mut().fill(0.0);
    let mut batch = first_batch(&cfg, &data, &model, 4);
    for t in &mut batch.targets {
        t.data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let out = model
        .loss(&mut g, &params, &batch, None, 0.3, Some(truth.adjacency()), 2.0)
        .unwrap();
    let theta = model.distribution(&params).unwrap().unwrap();
    let ce = structure::regularization_loss(theta.theta(), truth.adjacency()).unwrap();
    assert_eq!(g.value(out.mae).item(), 0.0);
    assert!((g.value(out.total).item() - 2.0 * ce).abs() < 1e-10);
}

#[test]
fn two_node_single_step_by_hand() {
    let (cfg, data, _) = tiny(2, 100, 4, 1);
    let model = build_model(&cfg, &data).unwrap();
    let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let windows = data::make_windows(&data.scaled[TRAIN], cfg.window).unwrap();
    let w = windows[3];
    let (input, target) = (w.input(&data.scaled[TRAIN], cfg.window), w.target(&data.scaled[TRAIN], cfg.window));
    let batch = WindowBatch::new(&model.forecaster, &[(input.clone(), target.clone())]).unwrap();
    let prior = Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
    let (s, lambda) = (0.4, 0.7);

    let mut g = Graph::new();
    let out = model.loss(&mut g, &params, &batch, None, s, Some(&prior), lambda).unwrap();

    let theta = model.distribution(&params).unwrap().unwrap();
    let relax = |p: f64| 1.0 / (1.0 + (-(p / (1.0 - p)).ln() / s).exp());
    let (t01, t10) = (theta.get(0, 1), theta.get(1, 0));
    let a = Tensor::matrix(2, 2, vec![0.0, relax(t01), relax(t10), 0.0]).unwrap();
    let pred = forecaster::forecast_window(&params, &model.forecaster, &a, &input).unwrap();
    let mae = (0..2)
        .map(|i| (pred.at(&[0, 0, i]) - target.at(&[0, 0, i])).abs())
        .sum::<f64>()
        / 2.0;
    let ce = -t01.ln() - (1.0 - t10).ln();
    assert!((g.value(out.mae).item() - mae).abs() < 1e-12);
    assert!((g.value(out.total).item() - (mae + lambda * ce)).abs() < 1e-12);
}

#[test]
fn structure_parameters_receive_gradient_without_regularizer() {
    let (cfg, data, _) = tiny(3, 120, 5, 2);
    let model = build_model(&cfg, &data).unwrap();
    let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let batch = first_batch(&cfg, &data, &model, 6);
    let noise = structure::logistic_noise(3, &mut ChaCha8Rng::seed_from_u64(3));
    let mut g = Graph::new();
    let out = model.loss(&mut g, &params, &batch, Some(&noise), 0.5, None, 0.0).unwrap();
    let grads = g.backward(out.total).unwrap().for_store(&params);
    for name in [structure::names::CONV_KERNEL, structure::names::FC2_WEIGHT] {
        let norm: f64 = grads.get(name).unwrap().data().iter().map(|v| v * v).sum();
        assert!(norm > 0.0, "{name} has zero gradient");
    }
}

#[test]
fn fit_is_deterministic() {
    let (cfg, data, _) = tiny(3, 120, 5, 2);
    let a = fit(&cfg, &data).unwrap();
    let b = fit(&cfg, &data).unwrap();
    assert_eq!(a.history.len(), 2);
    for (x, y) in a.history.epochs.iter().zip(&b.history.epochs) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        assert_eq!(x.val_mae.to_bits(), y.val_mae.to_bits());
        assert_eq!(x.temperature.to_bits(), y.temperature.to_bits());
    }
    assert_eq!(a.trained.params.to_bytes().0, b.trained.params.to_bytes().0);
    assert_eq!(RngState::capture(&a.rng), RngState::capture(&b.rng));

    let mut other = cfg.clone();
    other.seed = 1;
    let c = fit(&other, &data).unwrap();
    assert_ne!(a.trained.params.to_bytes().0, c.trained.params.to_bytes().0);
}

#[test]
fn best_epoch_has_lowest_validation_error() {
    let (mut cfg, data, _) = tiny(3, 120, 5, 2);
    cfg.train.epochs = 4;
    let out = fit(&cfg, &data).unwrap();
    let best = out.history.best().unwrap();
    assert!(out.history.epochs.iter().all(|r| r.val_mae >= best.val_mae));
    assert_eq!(out.trained.val_mae, best.val_mae);
    assert_eq!(out.trained.epoch, best.epoch);
}

#[test]
fn fixed_prior_mode_has_no_structure_parameters() {
    let (mut cfg, data, _) = tiny(3, 120, 5, 2);
    cfg.graph.mode = GraphMode::FixedPrior;
    let out = fit(&cfg, &data).unwrap();
    assert!(out.trained.params.get(structure::names::CONV_KERNEL).is_none());
    assert!(out.trained.distribution().unwrap().is_none());
}

#[test]
fn huge_step_size_reports_divergence_with_history() {
    let (mut cfg, data, _) = tiny(3, 120, 5, 2);
    cfg.train.learning_rate = 1e308;
    cfg.train.epochs = 3;
    match fit(&cfg, &data) {
        Err(TrainError::Diverged { epoch, history, .. }) => assert_eq!(history.len(), epoch),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.history)),
    }
}

#[test]
fn history_csv_has_header_and_rows() {
    let (cfg, data, _) = tiny(3, 120, 5, 2);
    let out = fit(&cfg, &data).unwrap();
    let csv = out.history.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,train_mae,val_mae,temperature,learning_rate,seconds");
    assert_eq!(lines.len(), 3);
}

#[test]
fn checkpoint_round_trip() {
    let (cfg, data, _) = tiny(3, 120, 5, 2);
    let out = fit(&cfg, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let meta = CheckpointMeta {
        config_hash: cfg.hash(),
        dataset_fingerprint: data.fingerprint.clone(),
        epoch: out.trained.epoch,
        val_mae: out.trained.val_mae,
        temperature: out.trained.temperature,
        rng_state: RngState::capture(&out.rng),
    };
    let written = save_checkpoint(dir.path(), &out.trained, &meta).unwrap();
    assert_eq!(written.len(), 3);
    let (params, back) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back, meta);
    assert_eq!(params.to_bytes().0, out.trained.params.to_bytes().0);
    let mut restored = back.rng_state.restore().unwrap();
    let mut original = out.rng.clone();
    use rand::RngCore;
    assert_eq!(restored.next_u64(), original.next_u64());
    assert!(load_checkpoint(&dir.path().join("missing")).is_err());
}

#[test]
fn prepare_rejects_unknown_target_feature() {
    let (mut cfg, data, _) = tiny(3, 120, 5, 2);
    cfg.model.targets = vec![3];
    assert!(matches!(
        prepare(&cfg, &data.cleaned, None),
        Err(TrainError::Config(ConfigError::Invalid { field: "model.targets", .. }))
    ));
}
