//! Forecast metrics, sample-averaged evaluation, the historical-average
//! baseline, the fixed-prior ablation and regularization sweeps.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ExperimentConfig, GraphMode};
use crate::data::{self, DataError};
use crate::forecaster::WindowBatch;
use crate::model::ModelError;
use crate::structure::{self, StructureError};
use crate::trainer::{self, FitOutcome, PreparedData, TrainError, TrainedModel, TEST, TRAIN, VAL};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("every entry is masked; nothing to score")]
    AllMasked,
    #[error("prediction, truth and mask lengths differ: {pred}, {truth}, {mask}")]
    Shape { pred: usize, truth: usize, mask: usize },
    #[error("horizon {horizon} is outside 1..={tau}")]
    Horizon { horizon: usize, tau: usize },
    #[error("need {need} steps of history, have {have}")]
    InsufficientHistory { need: usize, have: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] Box<TrainError>),
}

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        EvalError::Train(Box::new(e))
    }
}

impl From<StructureError> for EvalError {
    fn from(e: StructureError) -> Self {
        EvalError::Model(e.into())
    }
}

type Result<T> = std::result::Result<T, EvalError>;

/// Scores over one slice of predictions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; `None` when every scored target is zero.
    pub mape: Option<f64>,
    /// Entries scored by MAE and RMSE.
    pub count: usize,
    /// Entries excluded because the target was imputed.
    pub masked: usize,
    /// Entries scored by MAPE (unmasked, non-zero target).
    pub mape_count: usize,
}

/// MAE, RMSE and MAPE over entries whose mask is true. MAPE also skips zero
/// targets. Sums run in index order, so the result is deterministic.
pub fn compute_metrics(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<Metrics> {
    if pred.len() != truth.len() || truth.len() != mask.len() {
        return Err(EvalError::Shape {
            pred: pred.len(),
            truth: truth.len(),
            mask: mask.len(),
        });
    }
    let (mut abs, mut sq, mut pct) = (0.0, 0.0, 0.0);
    let (mut count, mut mape_count) = (0usize, 0usize);
    for ((&p, &t), &m) in pred.iter().zip(truth).zip(mask) {
        if !m {
            continue;
        }
        let e = p - t;
        abs += e.abs();
        sq += e * e;
        count += 1;
        if t != 0.0 {
            pct += (e / t).abs();
            mape_count += 1;
        }
    }
    if count == 0 {
        return Err(EvalError::AllMasked);
    }
    Ok(Metrics {
        mae: abs / count as f64,
        rmse: (sq / count as f64).sqrt(),
        mape: (mape_count > 0).then(|| 100.0 * pct / mape_count as f64),
        count,
        masked: mask.len() - count,
        mape_count,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// Steps ahead, 1-based.
    pub steps: usize,
    pub label: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub segment: String,
    pub samples: usize,
    pub windows: usize,
    pub horizons: Vec<HorizonMetrics>,
    pub overall: Metrics,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,label,mae,rmse,mape,count,masked\n");
        let rows = self
            .horizons
            .iter()
            .map(|h| (h.steps.to_string(), h.label.as_str(), &h.metrics))
            .chain(std::iter::once(("all".to_string(), "all", &self.overall)));
        for (steps, label, m) in rows {
            let mape = m.mape.map_or(String::new(), |v| format!("{v:.6}"));
            let _ = writeln!(
                out,
                "{steps},{label},{:.6},{:.6},{mape},{},{}",
                m.mae, m.rmse, m.count, m.masked
            );
        }
        out
    }

    pub fn horizon(&self, steps: usize) -> Option<&Metrics> {
        self.horizons.iter().find(|h| h.steps == steps).map(|h| &h.metrics)
    }
}

/// "15 min" for 3 steps at 300 s; plain step counts otherwise.
pub fn horizon_label(steps: usize, frequency_seconds: u64) -> String {
    let secs = steps as u64 * frequency_seconds;
    if frequency_seconds > 0 && secs % 60 == 0 {
        format!("{} min", secs / 60)
    } else {
        format!("{steps} steps")
    }
}

/// Parse a comma-separated horizon list such as `"3,6,12"`.
pub fn parse_horizons(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| EvalError::Invalid(format!("invalid horizon {s:?}")))
        })
        .collect()
}

/// Predictions for every window of a segment in original units, laid out
/// `[window][step][node][target]`, with matching truth and mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentPredictions {
    pub windows: usize,
    pub horizon: usize,
    pub nodes: usize,
    pub targets: usize,
    pub pred: Vec<f64>,
    pub truth: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SegmentPredictions {
    fn step_slice(&self, step: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
        let block = self.nodes * self.targets;
        let (mut p, mut t, mut m) = (Vec::new(), Vec::new(), Vec::new());
        for w in 0..self.windows {
            let base = (w * self.horizon + step) * block;
            p.extend_from_slice(&self.pred[base..base + block]);
            t.extend_from_slice(&self.truth[base..base + block]);
            m.extend_from_slice(&self.mask[base..base + block]);
        }
        (p, t, m)
    }
}

const EVAL_BATCH: usize = 64;

/// Average the forecasts of `n_samples` graph samples (one adjacency per
/// sample, shared by all windows) at the model's evaluation temperature.
pub fn predict_segment<R: Rng>(
    trained: &TrainedModel,
    data: &PreparedData,
    segment: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<SegmentPredictions> {
    if n_samples == 0 {
        return Err(EvalError::Invalid("n_samples must be at least 1".into()));
    }
    let model = &trained.model;
    let fc = &model.forecaster;
    let spec = data.window;
    let scaled = &data.scaled[segment];
    let raw = &data.raw[segment];
    let windows = data::make_windows(scaled, spec)?;
    let batches: Vec<WindowBatch> = windows
        .chunks(EVAL_BATCH)
        .map(|chunk| {
            let pairs: Vec<_> = chunk
                .iter()
                .map(|w| (w.input(scaled, spec), w.target(scaled, spec)))
                .collect();
            WindowBatch::new(fc, &pairs).map_err(ModelError::from)
        })
        .collect::<std::result::Result<_, _>>()?;

    let (n, fout, tau) = (model.n(), fc.output_features(), fc.horizon);
    let block = n * fout;
    let mut sum = vec![0.0; windows.len() * tau * block];
    let theta = trained.distribution()?;
    for _ in 0..n_samples {
        let a = model.sample_adjacency(theta.as_ref(), trained.temperature, rng)?;
        let mut w0 = 0;
        for batch in &batches {
            let preds = model.predict(&trained.params, &batch.inputs, &a)?;
            for (step, p) in preds.iter().enumerate() {
                for (b, chunk) in p.data().chunks(block).enumerate() {
                    let base = ((w0 + b) * tau + step) * block;
                    for (acc, v) in sum[base..base + block].iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
            }
            w0 += batch.len();
        }
    }

    let mut pred = Vec::with_capacity(sum.len());
    let mut truth = Vec::with_capacity(sum.len());
    let mut mask = Vec::with_capacity(sum.len());
    for (wi, w) in windows.iter().enumerate() {
        for step in 0..tau {
            let t = w.start + spec.input + step;
            for i in 0..n {
                for (q, &f) in fc.targets.iter().enumerate() {
                    let avg = sum[((wi * tau + step) * n + i) * fout + q] / n_samples as f64;
                    pred.push(data.standardizer.inverse_value(f, i, avg));
                    truth.push(raw.get(f, t, i));
                    mask.push(raw.observed(t, i));
                }
            }
        }
    }
    Ok(SegmentPredictions {
        windows: windows.len(),
        horizon: tau,
        nodes: n,
        targets: fout,
        pred,
        truth,
        mask,
    })
}

/// Overall MAE of a segment in original units.
pub fn segment_mae<R: Rng>(
    trained: &TrainedModel,
    data: &PreparedData,
    segment: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let p = predict_segment(trained, data, segment, n_samples, rng)?;
    Ok(compute_metrics(&p.pred, &p.truth, &p.mask)?.mae)
}

fn check_horizons(horizons: &[usize], tau: usize) -> Result<()> {
    for &h in horizons {
        if h == 0 || h > tau {
            return Err(EvalError::Horizon { horizon: h, tau });
        }
    }
    Ok(())
}

fn segment_name(segment: usize) -> &'static str {
    match segment {
        TRAIN => "train",
        VAL => "val",
        _ => "test",
    }
}

/// Build a report from predictions, one block per requested horizon.
pub fn report_from(
    p: &SegmentPredictions,
    horizons: &[usize],
    frequency_seconds: u64,
    segment: &str,
    samples: usize,
) -> Result<MetricReport> {
    check_horizons(horizons, p.horizon)?;
    let mut blocks = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let (pr, tr, m) = p.step_slice(h - 1);
        blocks.push(HorizonMetrics {
            steps: h,
            label: horizon_label(h, frequency_seconds),
            metrics: compute_metrics(&pr, &tr, &m)?,
        });
    }
    Ok(MetricReport {
        segment: segment.to_string(),
        samples,
        windows: p.windows,
        horizons: blocks,
        overall: compute_metrics(&p.pred, &p.truth, &p.mask)?,
    })
}

/// Metrics per horizon on one segment with `n_samples` averaged graph samples.
pub fn evaluate_model<R: Rng>(
    trained: &TrainedModel,
    data: &PreparedData,
    segment: usize,
    horizons: &[usize],
    n_samples: usize,
    rng: &mut R,
) -> Result<MetricReport> {
    check_horizons(horizons, trained.model.forecaster.horizon)?;
    let p = predict_segment(trained, data, segment, n_samples, rng)?;
    report_from(
        &p,
        horizons,
        data.cleaned.frequency_seconds,
        segment_name(segment),
        n_samples,
    )
}

/// Uniform mean of `series[t − j·period]` for `j = 1..=past`.
pub fn historical_average(series: &[f64], t: usize, period: usize, past: usize) -> Result<f64> {
    if period == 0 || past == 0 {
        return Err(EvalError::Invalid("period and past must be at least 1".into()));
    }
    let need = past * period;
    if t < need || t > series.len() {
        return Err(EvalError::InsufficientHistory {
            need,
            have: t.min(series.len()),
        });
    }
    Ok((1..=past).map(|j| series[t - j * period]).sum::<f64>() / past as f64)
}

/// Historical-average predictions for the windows of a segment, in the
/// same layout as [`predict_segment`]. History comes from the cleaned
/// series in original units.
pub fn historical_average_predictions(
    data: &PreparedData,
    segment: usize,
    targets: &[usize],
    period: usize,
    past: usize,
) -> Result<SegmentPredictions> {
    let spec = data.window;
    let offset: usize = data.raw[..segment].iter().map(|s| s.steps()).sum();
    let raw = &data.raw[segment];
    let windows = data::make_windows(raw, spec)?;
    let n = raw.series();
    let series: Vec<Vec<Vec<f64>>> = targets
        .iter()
        .map(|&f| (0..n).map(|i| data.cleaned.series_values(f, i)).collect())
        .collect();
    let (mut pred, mut truth, mut mask) = (Vec::new(), Vec::new(), Vec::new());
    for w in &windows {
        for step in 0..spec.horizon {
            let t = w.start + spec.input + step;
            for i in 0..n {
                for (q, &f) in targets.iter().enumerate() {
                    pred.push(historical_average(&series[q][i], offset + t, period, past)?);
                    truth.push(raw.get(f, t, i));
                    mask.push(raw.observed(t, i));
                }
            }
        }
    }
    Ok(SegmentPredictions {
        windows: windows.len(),
        horizon: spec.horizon,
        nodes: n,
        targets: targets.len(),
        pred,
        truth,
        mask,
    })
}

/// Train the forecaster on the prior graph held fixed (no structure
/// learner, no sampling) and score it on the test segment.
pub fn fixed_prior_ablation(cfg: &ExperimentConfig, data: &PreparedData) -> Result<(FitOutcome, MetricReport)> {
    let mut cfg = cfg.clone();
    cfg.graph.mode = GraphMode::FixedPrior;
    cfg.graph.lambda = 0.0;
    let outcome = trainer::fit(&cfg, data)?;
    let horizons: Vec<usize> = (1..=cfg.window.horizon).collect();
    let mut rng = trainer::eval_rng(cfg.seed, u64::MAX - 1);
    let report = evaluate_model(&outcome.trained, data, TEST, &horizons, cfg.train.eval_samples, &mut rng)?;
    Ok((outcome, report))
}

/// Seed-averaged outcome of one regularization strength.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    /// Mean cross entropy per off-diagonal entry between θ and the prior.
    pub cross_entropy: f64,
    pub val_mae: f64,
    /// `(steps, test MAE)` per horizon.
    pub test_mae: Vec<(usize, f64)>,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub horizon_labels: Vec<String>,
}

/// Train once per `(λ, seed)` with the learned graph and collect
/// cross entropy to the prior and validation/test MAE.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    lambdas: &[f64],
    seeds: &[u64],
    horizons: &[usize],
) -> Result<SweepTable> {
    let prior = data
        .prior
        .as_ref()
        .ok_or_else(|| EvalError::Invalid("a sweep needs a prior graph".into()))?;
    if seeds.is_empty() || lambdas.is_empty() {
        return Err(EvalError::Invalid("need at least one λ and one seed".into()));
    }
    check_horizons(horizons, cfg.window.horizon)?;
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let (mut ce, mut val) = (0.0, 0.0);
        let mut test = vec![0.0; horizons.len()];
        for &seed in seeds {
            let mut c = cfg.clone();
            c.graph.mode = GraphMode::Learned;
            c.graph.lambda = lambda;
            c.seed = seed;
            let out = trainer::fit(&c, data)?;
            let theta = out
                .trained
                .distribution()?
                .expect("learned mode yields θ");
            ce += structure::mean_cross_entropy(theta.theta(), prior.adjacency())?;
            val += out.trained.val_mae;
            let mut rng = trainer::eval_rng(seed, u64::MAX - 1);
            let report = evaluate_model(&out.trained, data, TEST, horizons, c.train.eval_samples, &mut rng)?;
            for (acc, h) in test.iter_mut().zip(&report.horizons) {
                *acc += h.metrics.mae;
            }
        }
        let k = seeds.len() as f64;
        rows.push(SweepRow {
            lambda,
            cross_entropy: ce / k,
            val_mae: val / k,
            test_mae: horizons.iter().zip(&test).map(|(&h, &m)| (h, m / k)).collect(),
            seeds: seeds.len(),
        });
    }
    Ok(SweepTable {
        rows,
        horizon_labels: horizons
            .iter()
            .map(|&h| horizon_label(h, data.cleaned.frequency_seconds))
            .collect(),
    })
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,cross_entropy,val_mae");
        for row in self.rows.first().map(|r| r.test_mae.as_slice()).unwrap_or(&[]) {
            let _ = write!(out, ",test_mae_h{}", row.0);
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{:.6},{:.6}", r.lambda, r.cross_entropy, r.val_mae);
            for (_, m) in &r.test_mae {
                let _ = write!(out, ",{m:.6}");
            }
            out.push('\n');
        }
        out
    }

    /// Two line charts side by side: cross entropy and validation MAE
    /// against λ, with λ values evenly spaced along the x axis.
    pub fn to_svg(&self) -> String {
        let (w, h) = (900.0, 360.0);
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let xs: Vec<String> = self.rows.iter().map(|r| format!("{}", r.lambda)).collect();
        let ce: Vec<f64> = self.rows.iter().map(|r| r.cross_entropy).collect();
        let mae: Vec<f64> = self.rows.iter().map(|r| r.val_mae).collect();
        panel(&mut out, 0.0, "cross entropy to prior", &xs, &ce, "#1f77b4");
        panel(&mut out, w / 2.0, "validation MAE", &xs, &mae, "#d62728");
        out.push_str("</svg>\n");
        out
    }
}

fn panel(out: &mut String, x0: f64, title: &str, xs: &[String], ys: &[f64], colour: &str) {
    let (left, right, top, bottom) = (x0 + 60.0, x0 + 420.0, 40.0, 310.0);
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    };
    let px = |i: usize| {
        if xs.len() <= 1 {
            (left + right) / 2.0
        } else {
            left + (right - left) * i as f64 / (xs.len() - 1) as f64
        }
    };
    let py = |v: f64| bottom - (bottom - top) * (v - lo) / (hi - lo);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{title}</text>"#,
        (left + right) / 2.0
    );
    let _ = writeln!(
        out,
        r#"<path d="M{left:.1},{top:.1} V{bottom:.1} H{right:.1}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{left:.1}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
            left - 4.0,
            left - 6.0,
            y + 4.0
        );
    }
    for (i, label) in xs.iter().enumerate() {
        let x = px(i);
        let _ = writeln!(
            out,
            r#"<line x1="{x:.1}" y1="{bottom:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{label}</text>"#,
            bottom + 4.0,
            bottom + 18.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">λ</text>"#,
        (left + right) / 2.0,
        bottom + 36.0
    );
    let points: Vec<String> = ys
        .iter()
        .enumerate()
        .map(|(i, &v)| format!("{:.1},{:.1}", px(i), py(v)))
        .collect();
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
        points.join(" ")
    );
    for p in &points {
        let (x, y) = p.split_once(',').expect("x,y");
        let _ = writeln!(out, r#"<circle cx="{x}" cy="{y}" r="3" fill="{colour}"/>"#);
    }
}

#[cfg(test)]
mod tests;
