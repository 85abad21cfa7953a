use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::config::PriorConfig;
use crate::data::WindowSpec;
use crate::forecaster;
use crate::structure::StructureConfig;
use crate::synth::{self, SynthSpec};

fn setup(n: usize, input: usize, horizon: usize) -> (ExperimentConfig, PreparedData) {
    let d = synth::generate(&SynthSpec {
        n,
        steps: 150,
        density: 0.4,
        noise: 0.05,
        seed: 2,
    })
    .unwrap();
    let mut cfg = ExperimentConfig::new(WindowSpec::new(input, horizon).unwrap());
    cfg.model.cell.hidden = 4;
    cfg.structure = StructureConfig {
        embedding: 4,
        conv_channels: 2,
        kernel: 4,
        stride: 2,
        hidden: 4,
    };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg.train.eval_samples = 2;
    cfg.train.val_samples = 2;
    cfg.graph.prior = PriorConfig::Random { density: 0.5, seed: 4 };
    let data = trainer::prepare(&cfg, &d.series, None).unwrap();
    (cfg, data)
}

fn untrained(cfg: &ExperimentConfig, data: &PreparedData) -> TrainedModel {
    let model = trainer::build_model(cfg, data).unwrap();
    let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    TrainedModel {
        model,
        params,
        temperature: 0.1,
        epoch: 0,
        val_mae: f64::NAN,
    }
}

/// Plain loops over the same definition, kept apart from the library code.
fn oracle(pred: &[f64], truth: &[f64], mask: &[bool]) -> (f64, f64, Option<f64>) {
    let mut n = 0.0;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut pct = Vec::new();
    for k in 0..pred.len() {
        if mask[k] {
            n += 1.0;
            abs += (pred[k] - truth[k]).abs();
            sq += (pred[k] - truth[k]) * (pred[k] - truth[k]);
            if truth[k] != 0.0 {
                pct.push(((pred[k] - truth[k]) / truth[k]).abs());
            }
        }
    }
    let mape = if pct.is_empty() {
        None
    } else {
        Some(100.0 * pct.iter().sum::<f64>() / pct.len() as f64)
    };
    (abs / n, (sq / n).sqrt(), mape)
}

#[test]
fn small_example() {
    let m = compute_metrics(&[1.0, 2.0], &[1.0, 3.0], &[true, true]).unwrap();
    assert!((m.mae - 0.5).abs() < 1e-15);
    assert!((m.rmse - 0.5f64.sqrt()).abs() < 1e-15);
    assert!((m.mape.unwrap() - 100.0 / 6.0).abs() < 1e-12);
    assert_eq!((m.count, m.masked, m.mape_count), (2, 0, 2));
}

#[test]
fn masked_and_zero_targets() {
    let m = compute_metrics(&[1.0, 5.0, 2.0], &[0.0, 1.0, 4.0], &[true, false, true]).unwrap();
    assert_eq!((m.count, m.masked, m.mape_count), (2, 1, 1));
    assert!((m.mae - 1.5).abs() < 1e-15);
    assert!((m.mape.unwrap() - 50.0).abs() < 1e-12);
    let zero = compute_metrics(&[1.0], &[0.0], &[true]).unwrap();
    assert_eq!(zero.mape, None);
}

#[test]
fn all_masked_is_an_error() {
    assert!(matches!(
        compute_metrics(&[1.0, 2.0], &[1.0, 2.0], &[false, false]),
        Err(EvalError::AllMasked)
    ));
    assert!(matches!(
        compute_metrics(&[1.0], &[1.0, 2.0], &[true, true]),
        Err(EvalError::Shape { .. })
    ));
}

fn entries() -> impl Strategy<Value = Vec<(f64, f64, bool)>> {
    prop::collection::vec(
        (-50.0..50.0f64, prop_oneof![Just(0.0), -50.0..50.0f64], prop::bool::weighted(0.8)),
        1..60,
    )
}

proptest! {
    #[test]
    fn matches_scalar_loop(v in entries()) {
        let pred: Vec<f64> = v.iter().map(|e| e.0).collect();
        let truth: Vec<f64> = v.iter().map(|e| e.1).collect();
        let mask: Vec<bool> = v.iter().map(|e| e.2).collect();
        prop_assume!(mask.iter().any(|&m| m));
        let m = compute_metrics(&pred, &truth, &mask).unwrap();
        let (mae, rmse, mape) = oracle(&pred, &truth, &mask);
        prop_assert!((m.mae - mae).abs() <= 1e-12 * mae.max(1.0));
        prop_assert!((m.rmse - rmse).abs() <= 1e-12 * rmse.max(1.0));
        match (m.mape, mape) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0)),
            (None, None) => {}
            other => prop_assert!(false, "mape mismatch {:?}", other),
        }
        prop_assert!(m.mae <= m.rmse + 1e-12);
    }

    #[test]
    fn permutation_invariant(v in entries(), seed in any::<u64>()) {
        prop_assume!(v.iter().any(|e| e.2));
        let mut w = v.clone();
        use rand::seq::SliceRandom;
        w.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let split = |v: &[(f64, f64, bool)]| {
            (
                v.iter().map(|e| e.0).collect::<Vec<_>>(),
                v.iter().map(|e| e.1).collect::<Vec<_>>(),
                v.iter().map(|e| e.2).collect::<Vec<_>>(),
            )
        };
        let (p, t, m) = split(&v);
        let (q, u, n) = split(&w);
        let a = compute_metrics(&p, &t, &m).unwrap();
        let b = compute_metrics(&q, &u, &n).unwrap();
        prop_assert!((a.mae - b.mae).abs() < 1e-10);
        prop_assert!((a.rmse - b.rmse).abs() < 1e-10);
        prop_assert_eq!(a.count, b.count);
    }
}

#[test]
fn labels_and_horizon_lists() {
    assert_eq!(parse_horizons("3,6,12").unwrap(), vec![3, 6, 12]);
    assert_eq!(parse_horizons(" 1 , 2 ").unwrap(), vec![1, 2]);
    assert!(parse_horizons("3,x").is_err());
    let labels: Vec<String> = [3, 6, 12].iter().map(|&h| horizon_label(h, 300)).collect();
    assert_eq!(labels, ["15 min", "30 min", "60 min"]);
    assert_eq!(horizon_label(2, 45), "2 steps");
}

#[test]
fn historical_average_examples() {
    let x = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(historical_average(&x, 4, 2, 1).unwrap(), 3.0);
    assert_eq!(historical_average(&x, 4, 1, 4).unwrap(), 2.5);
    assert_eq!(historical_average(&x, 4, 2, 2).unwrap(), 2.0);
    assert!(matches!(
        historical_average(&x, 4, 2, 3),
        Err(EvalError::InsufficientHistory { need: 6, have: 4 })
    ));
}

#[test]
fn historical_average_predictions_use_the_full_history() {
    let (_, data) = setup(3, 4, 2);
    let p = historical_average_predictions(&data, TEST, &[0], 5, 2).unwrap();
    let offset = data.raw[TRAIN].steps() + data.raw[VAL].steps();
    // window 1, step 1, node 2
    let t = offset + 1 + 4 + 1;
    let series = data.cleaned.series_values(0, 2);
    let expected = (series[t - 5] + series[t - 10]) / 2.0;
    let k = ((1 * 2) + 1) * 3 + 2;
    assert!((p.pred[k] - expected).abs() < 1e-12);
    assert_eq!(p.truth[k], data.raw[TEST].get(0, 1 + 4 + 1, 2));
}

#[test]
fn horizon_beyond_forecast_is_an_error() {
    let (cfg, data) = setup(3, 4, 2);
    let trained = untrained(&cfg, &data);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        evaluate_model(&trained, &data, TEST, &[1, 3], 1, &mut rng),
        Err(EvalError::Horizon { horizon: 3, tau: 2 })
    ));
    assert!(evaluate_model(&trained, &data, TEST, &[0], 1, &mut rng).is_err());
}

#[test]
fn single_sample_equals_direct_forecast() {
    let (cfg, data) = setup(3, 4, 2);
    let trained = untrained(&cfg, &data);
    let p = predict_segment(&trained, &data, TEST, 1, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();

    let theta = trained.distribution().unwrap().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = structure::sample_graph(&theta, trained.temperature, &mut rng).unwrap().adjacency;
    let seg = &data.scaled[TEST];
    let windows = data::make_windows(seg, cfg.window).unwrap();
    assert_eq!(p.windows, windows.len());
    let mut k = 0;
    for w in &windows {
        let out = forecaster::forecast_window(&trained.params, &trained.model.forecaster, &a, &w.input(seg, cfg.window))
            .unwrap();
        for step in 0..2 {
            for i in 0..3 {
                let v = data.standardizer.inverse_value(0, i, out.at(&[0, step, i]));
                assert!((p.pred[k] - v).abs() < 1e-12, "entry {k}: {} vs {v}", p.pred[k]);
                k += 1;
            }
        }
    }
}

#[test]
fn averaging_is_deterministic_for_a_seed() {
    let (cfg, data) = setup(3, 4, 2);
    let trained = untrained(&cfg, &data);
    let run = |seed| evaluate_model(&trained, &data, VAL, &[1, 2], 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let (a, b) = (run(5), run(5));
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.samples, 4);
    assert_eq!(a.horizons.len(), 2);
    assert_eq!(a.horizons[0].label, "5 min");
}

#[test]
fn report_formats() {
    let (cfg, data) = setup(3, 4, 2);
    let trained = untrained(&cfg, &data);
    let r = evaluate_model(&trained, &data, TEST, &[2], 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "horizon,label,mae,rmse,mape,count,masked");
    assert!(lines[1].starts_with("2,10 min,"));
    assert!(lines[2].starts_with("all,all,"));
    let back: MetricReport = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(back.horizons[0].steps, 2);
    assert_eq!(back.segment, "test");
    assert!(r.horizon(2).is_some() && r.horizon(1).is_none());
}

#[test]
fn ablation_trains_on_the_fixed_prior() {
    let (cfg, data) = setup(3, 4, 2);
    let (out, report) = fixed_prior_ablation(&cfg, &data).unwrap();
    assert!(!out.trained.model.is_learned());
    assert_eq!(report.horizons.len(), 2);
    assert!(report.overall.mae.is_finite());
}

#[test]
fn sweep_table_outputs() {
    let table = SweepTable {
        rows: vec![
            SweepRow {
                lambda: 0.0,
                cross_entropy: 0.7,
                val_mae: 1.0,
                test_mae: vec![(1, 1.1), (2, 1.2)],
                seeds: 2,
            },
            SweepRow {
                lambda: 10.0,
                cross_entropy: 0.02,
                val_mae: 1.05,
                test_mae: vec![(1, 1.15), (2, 1.25)],
                seeds: 2,
            },
        ],
        horizon_labels: vec!["5 min".into(), "10 min".into()],
    };
    let csv = table.to_csv();
    assert_eq!(
        csv,
        "lambda,cross_entropy,val_mae,test_mae_h1,test_mae_h2\n\
         0,0.700000,1.000000,1.100000,1.200000\n\
         10,0.020000,1.050000,1.150000,1.250000\n"
    );
    let svg = table.to_svg();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert_eq!(svg.matches("<circle").count(), 4);
}

#[test]
fn sweep_runs_each_lambda() {
    let (mut cfg, mut data) = setup(3, 4, 2);
    cfg.train.epochs = 1;
    let t = run_sweep(&cfg, &data, &[0.0, 5.0], &[0], &[1, 2]).unwrap();
    assert_eq!(t.rows.len(), 2);
    assert!(t.rows.iter().all(|r| r.cross_entropy.is_finite() && r.test_mae.len() == 2));
    data.prior = None;
    assert!(run_sweep(&cfg, &data, &[0.0], &[0], &[1]).is_err());
}
