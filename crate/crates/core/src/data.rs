//! Dataset ingestion, cleaning, resampling, splitting, windowing and scaling.
//!
//! On disk a dataset is a directory holding `meta.json` plus one CSV per
//! feature (`<feature>.csv`). Each CSV has a header `timestamp,<series ids>`
//! and one row per time step; an empty cell is a missing reading.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime, TimeDelta};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: invalid meta.json: {reason}")]
    Meta { path: PathBuf, reason: String },
    #[error("{path}:{line}: expected {expected} fields, found {found}")]
    Ragged {
        path: PathBuf,
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: u64,
        reason: String,
    },
    #[error("{path}:{line}: timestamps must increase in steps of {frequency_seconds}s")]
    Timestamps {
        path: PathBuf,
        line: u64,
        frequency_seconds: u64,
    },
    #[error("{path}: header does not match meta.json series: {reason}")]
    SeriesMismatch { path: PathBuf, reason: String },
    #[error("feature files disagree on {0}")]
    FeatureMismatch(String),
    #[error("series `{series}` (feature `{feature}`) has no observed values")]
    EmptySeries { series: String, feature: String },
    #[error("invalid bounds: lower {lower} must be below upper {upper}")]
    Bounds { lower: f64, upper: f64 },
    #[error("resampling factor must be at least 1, got {0}")]
    Factor(usize),
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    Fractions([f64; 3]),
    #[error("{segment} segment has {len} steps, a window needs {need}")]
    SegmentTooShort {
        segment: &'static str,
        len: usize,
        need: usize,
    },
    #[error("window sizes must be at least 1 (T={input}, tau={horizon})")]
    Window { input: usize, horizon: usize },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Values laid out as feature × time × series. Missing readings are NaN until
/// [`clean_series`] imputes them.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesTensor {
    values: Vec<f64>,
    /// time × series; `true` = every feature observed at that cell.
    mask: Vec<bool>,
    features: usize,
    steps: usize,
    series: usize,
    pub frequency_seconds: u64,
    pub feature_names: Vec<String>,
    pub series_ids: Vec<String>,
    pub start: NaiveDateTime,
}

impl TimeSeriesTensor {
    pub fn new(
        features: usize,
        steps: usize,
        series: usize,
        values: Vec<f64>,
        frequency_seconds: u64,
    ) -> Self {
        assert_eq!(values.len(), features * steps * series);
        let mut out = Self {
            values,
            mask: vec![true; steps * series],
            features,
            steps,
            series,
            frequency_seconds,
            feature_names: (0..features).map(|f| format!("f{f}")).collect(),
            series_ids: (0..series).map(|i| format!("s{i}")).collect(),
            start: DateTime::UNIX_EPOCH.naive_utc(),
        };
        out.refresh_mask();
        out
    }

    /// Single-feature tensor from per-series vectors of equal length.
    pub fn from_series(series: &[Vec<f64>], frequency_seconds: u64) -> Self {
        let n = series.len();
        let s = series.first().map_or(0, Vec::len);
        let mut values = vec![0.0; s * n];
        for (i, col) in series.iter().enumerate() {
            assert_eq!(col.len(), s);
            for (t, &v) in col.iter().enumerate() {
                values[t * n + i] = v;
            }
        }
        Self::new(1, s, n, values, frequency_seconds)
    }

    fn refresh_mask(&mut self) {
        for t in 0..self.steps {
            for i in 0..self.series {
                self.mask[t * self.series + i] =
                    (0..self.features).all(|f| !self.get(f, t, i).is_nan());
            }
        }
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn series(&self) -> usize {
        self.series
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.features, self.steps, self.series)
    }

    #[inline]
    pub fn index(&self, f: usize, t: usize, i: usize) -> usize {
        (f * self.steps + t) * self.series + i
    }

    #[inline]
    pub fn get(&self, f: usize, t: usize, i: usize) -> f64 {
        self.values[self.index(f, t, i)]
    }

    pub fn set(&mut self, f: usize, t: usize, i: usize, v: f64) {
        let k = self.index(f, t, i);
        self.values[k] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn observed(&self, t: usize, i: usize) -> bool {
        self.mask[t * self.series + i]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn set_observed(&mut self, t: usize, i: usize, observed: bool) {
        self.mask[t * self.series + i] = observed;
    }

    /// One series' values for one feature across all time.
    pub fn series_values(&self, f: usize, i: usize) -> Vec<f64> {
        (0..self.steps).map(|t| self.get(f, t, i)).collect()
    }

    pub fn has_nan(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }

    /// Copy of steps `start..start + len`.
    pub fn slice_time(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.steps);
        let n = self.series;
        let mut values = Vec::with_capacity(self.features * len * n);
        for f in 0..self.features {
            let base = self.index(f, start, 0);
            values.extend_from_slice(&self.values[base..base + len * n]);
        }
        Self {
            values,
            mask: self.mask[start * n..(start + len) * n].to_vec(),
            features: self.features,
            steps: len,
            series: n,
            frequency_seconds: self.frequency_seconds,
            feature_names: self.feature_names.clone(),
            series_ids: self.series_ids.clone(),
            start: self.start + TimeDelta::seconds((start as u64 * self.frequency_seconds) as i64),
        }
    }

    /// Steps `start..start + len` as a `[F, len, n]` tensor.
    pub fn window_tensor(&self, start: usize, len: usize) -> Tensor {
        let n = self.series;
        let mut data = Vec::with_capacity(self.features * len * n);
        for f in 0..self.features {
            let base = self.index(f, start, 0);
            data.extend_from_slice(&self.values[base..base + len * n]);
        }
        Tensor::new(vec![self.features, len, n], data).expect("window shape")
    }

    /// Reorder series: output series `k` is input series `perm[k]`.
    pub fn permute_series(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.series);
        let mut out = self.clone();
        for f in 0..self.features {
            for t in 0..self.steps {
                for (k, &src) in perm.iter().enumerate() {
                    out.set(f, t, k, self.get(f, t, src));
                }
            }
        }
        for t in 0..self.steps {
            for (k, &src) in perm.iter().enumerate() {
                out.set_observed(t, k, self.observed(t, src));
            }
        }
        out.series_ids = perm.iter().map(|&p| self.series_ids[p].clone()).collect();
        out
    }

    /// Concatenate segments along time. Metadata comes from the first.
    pub fn concat_time(parts: &[&TimeSeriesTensor]) -> Self {
        let first = parts[0];
        let steps = parts.iter().map(|p| p.steps).sum();
        let n = first.series;
        let mut values = Vec::with_capacity(first.features * steps * n);
        for f in 0..first.features {
            for p in parts {
                let base = p.index(f, 0, 0);
                values.extend_from_slice(&p.values[base..base + p.steps * n]);
            }
        }
        let mask = parts.iter().flat_map(|p| p.mask.iter().copied()).collect();
        Self {
            values,
            mask,
            features: first.features,
            steps,
            series: n,
            frequency_seconds: first.frequency_seconds,
            feature_names: first.feature_names.clone(),
            series_ids: first.series_ids.clone(),
            start: first.start,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    frequency_seconds: u64,
    features: Vec<String>,
    series: Vec<String>,
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Load a dataset directory (`meta.json` + one CSV per feature).
pub fn load_dataset(dir: &Path) -> Result<TimeSeriesTensor> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| DataError::Meta {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    if meta.frequency_seconds == 0 || meta.features.is_empty() || meta.series.is_empty() {
        return Err(DataError::Meta {
            path: meta_path,
            reason: "frequency, features and series must be non-empty".into(),
        });
    }

    let n = meta.series.len();
    let mut per_feature: Vec<Vec<f64>> = Vec::new();
    let mut timestamps: Option<Vec<NaiveDateTime>> = None;
    for feature in &meta.features {
        let path = dir.join(format!("{feature}.csv"));
        let (stamps, values) = read_feature_csv(&path, &meta)?;
        match &timestamps {
            None => timestamps = Some(stamps),
            Some(prev) if *prev != stamps => {
                return Err(DataError::FeatureMismatch(format!(
                    "timestamps (`{feature}` differs from `{}`)",
                    meta.features[0]
                )))
            }
            Some(_) => {}
        }
        per_feature.push(values);
    }
    let stamps = timestamps.unwrap_or_default();
    let steps = stamps.len();
    let values = per_feature.concat();
    let mut out = TimeSeriesTensor::new(meta.features.len(), steps, n, values, meta.frequency_seconds);
    out.feature_names = meta.features;
    out.series_ids = meta.series;
    if let Some(&s) = stamps.first() {
        out.start = s;
    }
    Ok(out)
}

fn read_feature_csv(path: &Path, meta: &Meta) -> Result<(Vec<NaiveDateTime>, Vec<f64>)> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let header = rdr.headers().map_err(|e| DataError::Parse {
        path: path.to_path_buf(),
        line: 1,
        reason: e.to_string(),
    })?;
    let ids: Vec<&str> = header.iter().skip(1).map(str::trim).collect();
    if ids.len() != meta.series.len() || ids.iter().zip(&meta.series).any(|(a, b)| a != b) {
        return Err(DataError::SeriesMismatch {
            path: path.to_path_buf(),
            reason: format!("{} columns vs {} series", ids.len(), meta.series.len()),
        });
    }

    let n = meta.series.len();
    let mut stamps = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != n + 1 {
            return Err(DataError::Ragged {
                path: path.to_path_buf(),
                line,
                expected: n + 1,
                found: record.len(),
            });
        }
        let ts = parse_timestamp(&record[0]).ok_or_else(|| DataError::Parse {
            path: path.to_path_buf(),
            line,
            reason: format!("bad timestamp `{}`", &record[0]),
        })?;
        if let Some(&prev) = stamps.last() {
            let step = TimeDelta::seconds(meta.frequency_seconds as i64);
            if ts - prev != step {
                return Err(DataError::Timestamps {
                    path: path.to_path_buf(),
                    line,
                    frequency_seconds: meta.frequency_seconds,
                });
            }
        }
        stamps.push(ts);
        let row = record
            .iter()
            .skip(1)
            .map(|cell| {
                let cell = cell.trim();
                if cell.is_empty() {
                    Ok(f64::NAN)
                } else {
                    cell.parse::<f64>().map_err(|_| DataError::Parse {
                        path: path.to_path_buf(),
                        line,
                        reason: format!("bad number `{cell}`"),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    // row-major time × series is exactly one feature plane
    Ok((stamps, rows.concat()))
}

/// Write a dataset directory readable by [`load_dataset`]. Missing cells
/// (NaN) are written empty.
pub fn write_dataset(dir: &Path, x: &TimeSeriesTensor) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta = Meta {
        frequency_seconds: x.frequency_seconds,
        features: x.feature_names.clone(),
        series: x.series_ids.clone(),
    };
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, json + "\n").map_err(io_err(&meta_path))?;
    for (f, name) in x.feature_names.iter().enumerate() {
        let path = dir.join(format!("{name}.csv"));
        let mut out = String::new();
        out.push_str("timestamp");
        for id in &x.series_ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for t in 0..x.steps {
            let ts = x.start + TimeDelta::seconds((t as u64 * x.frequency_seconds) as i64);
            out.push_str(&ts.format("%Y-%m-%dT%H:%M:%S").to_string());
            for i in 0..x.series {
                out.push(',');
                let v = x.get(f, t, i);
                if !v.is_nan() {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        fs::write(&path, out).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Mark readings outside `[lower, upper]` missing, then impute every missing
/// reading with the mean of that series' remaining observations.
pub fn clean_series(x: &TimeSeriesTensor, lower: f64, upper: f64) -> Result<TimeSeriesTensor> {
    if lower.is_nan() || upper.is_nan() || lower >= upper {
        return Err(DataError::Bounds { lower, upper });
    }
    let mut out = x.clone();
    for f in 0..x.features {
        for i in 0..x.series {
            let mut sum = 0.0;
            let mut count = 0usize;
            for t in 0..x.steps {
                let v = x.get(f, t, i);
                if v.is_nan() || v < lower || v > upper {
                    out.set(f, t, i, f64::NAN);
                    out.set_observed(t, i, false);
                } else {
                    sum += v;
                    count += 1;
                }
            }
            if count == 0 {
                return Err(DataError::EmptySeries {
                    series: x.series_ids[i].clone(),
                    feature: x.feature_names[f].clone(),
                });
            }
            let mean = sum / count as f64;
            for t in 0..x.steps {
                if out.get(f, t, i).is_nan() {
                    out.set(f, t, i, mean);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResampleReport {
    /// Trailing steps that did not fill a whole bucket.
    pub dropped_steps: usize,
}

/// Average every `factor` consecutive steps. Buckets without any observed
/// reading stay missing.
pub fn resample_mean(
    x: &TimeSeriesTensor,
    factor: usize,
) -> Result<(TimeSeriesTensor, ResampleReport)> {
    if factor < 1 {
        return Err(DataError::Factor(factor));
    }
    let steps = x.steps / factor;
    let mut values = vec![f64::NAN; x.features * steps * x.series];
    for f in 0..x.features {
        for b in 0..steps {
            for i in 0..x.series {
                let (mut sum, mut count) = (0.0, 0usize);
                for t in b * factor..(b + 1) * factor {
                    let v = x.get(f, t, i);
                    if !v.is_nan() {
                        sum += v;
                        count += 1;
                    }
                }
                if count > 0 {
                    values[(f * steps + b) * x.series + i] = sum / count as f64;
                }
            }
        }
    }
    let mut out = TimeSeriesTensor::new(
        x.features,
        steps,
        x.series,
        values,
        x.frequency_seconds * factor as u64,
    );
    out.feature_names = x.feature_names.clone();
    out.series_ids = x.series_ids.clone();
    out.start = x.start;
    Ok((
        out,
        ResampleReport {
            dropped_steps: x.steps - steps * factor,
        },
    ))
}

/// Input and forecast lengths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    #[serde(rename = "T")]
    pub input: usize,
    #[serde(rename = "tau")]
    pub horizon: usize,
}

impl WindowSpec {
    pub fn new(input: usize, horizon: usize) -> Result<Self> {
        let spec = Self { input, horizon };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input < 1 || self.horizon < 1 {
            return Err(DataError::Window {
                input: self.input,
                horizon: self.horizon,
            });
        }
        Ok(())
    }

    pub fn span(&self) -> usize {
        self.input + self.horizon
    }
}

/// Split points `floor(f·S)` taken cumulatively; the remainder falls to test.
pub fn split_points(steps: usize, fractions: [f64; 3]) -> Result<(usize, usize)> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (total - 1.0).abs() > 1e-9 {
        return Err(DataError::Fractions(fractions));
    }
    // the epsilon keeps e.g. (0.7 + 0.1)·100 from flooring to 79
    let cut = |frac: f64| ((frac * steps as f64) + 1e-9).floor() as usize;
    let a = cut(fractions[0]).min(steps);
    let b = cut(fractions[0] + fractions[1]).clamp(a, steps);
    Ok((a, b))
}

/// Contiguous train/validation/test segments.
pub fn temporal_split(
    x: &TimeSeriesTensor,
    fractions: [f64; 3],
    window: WindowSpec,
) -> Result<(TimeSeriesTensor, TimeSeriesTensor, TimeSeriesTensor)> {
    window.validate()?;
    let (a, b) = split_points(x.steps, fractions)?;
    let need = window.span();
    for (segment, len) in [("train", a), ("validation", b - a), ("test", x.steps - b)] {
        if len < need {
            return Err(DataError::SegmentTooShort { segment, len, need });
        }
    }
    Ok((
        x.slice_time(0, a),
        x.slice_time(a, b - a),
        x.slice_time(b, x.steps - b),
    ))
}

/// A window position within a segment: inputs are steps
/// `start..start+T`, targets `start+T..start+T+tau`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
}

impl Window {
    pub fn input(&self, segment: &TimeSeriesTensor, spec: WindowSpec) -> Tensor {
        segment.window_tensor(self.start, spec.input)
    }

    pub fn target(&self, segment: &TimeSeriesTensor, spec: WindowSpec) -> Tensor {
        segment.window_tensor(self.start + spec.input, spec.horizon)
    }
}

/// Every stride-1 window of a segment; count is `S − T − tau + 1`.
pub fn make_windows(segment: &TimeSeriesTensor, spec: WindowSpec) -> Result<Vec<Window>> {
    spec.validate()?;
    if segment.steps < spec.span() {
        return Err(DataError::SegmentTooShort {
            segment: "windowed",
            len: segment.steps,
            need: spec.span(),
        });
    }
    Ok((0..=segment.steps - spec.span())
        .map(|start| Window { start })
        .collect())
}

/// Floor applied to channel standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// Per (feature, series) z-scoring fitted on a training segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    features: usize,
    series: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    /// Population statistics of each channel; NaN readings are skipped.
    pub fn fit(train: &TimeSeriesTensor) -> Self {
        let (fc, s, n) = train.shape();
        let mut mean = vec![0.0; fc * n];
        let mut std = vec![STD_FLOOR; fc * n];
        for f in 0..fc {
            for i in 0..n {
                let vals: Vec<f64> = (0..s)
                    .map(|t| train.get(f, t, i))
                    .filter(|v| !v.is_nan())
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
                mean[f * n + i] = m;
                std[f * n + i] = var.sqrt().max(STD_FLOOR);
            }
        }
        Self {
            features: fc,
            series: n,
            mean,
            std,
        }
    }

    pub fn mean(&self, f: usize, i: usize) -> f64 {
        self.mean[f * self.series + i]
    }

    pub fn std(&self, f: usize, i: usize) -> f64 {
        self.std[f * self.series + i]
    }

    pub fn transform_value(&self, f: usize, i: usize, v: f64) -> f64 {
        (v - self.mean(f, i)) / self.std(f, i)
    }

    pub fn inverse_value(&self, f: usize, i: usize, v: f64) -> f64 {
        v * self.std(f, i) + self.mean(f, i)
    }

    fn map(&self, x: &TimeSeriesTensor, op: impl Fn(usize, usize, f64) -> f64) -> TimeSeriesTensor {
        assert_eq!((x.features, x.series), (self.features, self.series));
        let mut out = x.clone();
        for f in 0..x.features {
            for t in 0..x.steps {
                for i in 0..x.series {
                    out.set(f, t, i, op(f, i, x.get(f, t, i)));
                }
            }
        }
        out
    }

    pub fn transform(&self, x: &TimeSeriesTensor) -> TimeSeriesTensor {
        self.map(x, |f, i, v| self.transform_value(f, i, v))
    }

    pub fn inverse(&self, x: &TimeSeriesTensor) -> TimeSeriesTensor {
        self.map(x, |f, i, v| self.inverse_value(f, i, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_series(vals: &[f64]) -> TimeSeriesTensor {
        TimeSeriesTensor::from_series(&[vals.to_vec()], 300)
    }

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn loads_small_dataset() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "meta.json",
            r#"{"frequency_seconds": 300, "features": ["speed"], "series": ["a", "b"]}"#,
        );
        write(
            dir.path(),
            "speed.csv",
            "timestamp,a,b\n2012-03-01T00:00:00,1,2\n2012-03-01T00:05:00,3,4\n2012-03-01T00:10:00,5,6\n",
        );
        let x = load_dataset(dir.path()).unwrap();
        assert_eq!(x.shape(), (1, 3, 2));
        assert!(x.mask().iter().all(|&m| m));
        assert_eq!(x.get(0, 2, 1), 6.0);
    }

    #[test]
    fn empty_cell_is_masked() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "meta.json",
            r#"{"frequency_seconds": 60, "features": ["v"], "series": ["a", "b"]}"#,
        );
        write(
            dir.path(),
            "v.csv",
            "timestamp,a,b\n2020-01-01 00:00:00,1,\n2020-01-01 00:01:00,3,4\n",
        );
        let x = load_dataset(dir.path()).unwrap();
        assert!(!x.observed(0, 1));
        assert!(x.observed(0, 0) && x.observed(1, 1));
    }

    #[test]
    fn wide_file_gives_one_series_per_column() {
        let dir = tempfile::tempdir().unwrap();
        let ids: Vec<String> = (0..207).map(|i| format!("sensor{i}")).collect();
        let meta = serde_json::json!({"frequency_seconds": 300, "features": ["speed"], "series": ids});
        write(dir.path(), "meta.json", &meta.to_string());
        let mut csv = format!("timestamp,{}\n", ids.join(","));
        for t in 0..4 {
            csv.push_str(&format!("2012-03-01T00:{:02}:00", 5 * t));
            for i in 0..207 {
                csv.push_str(&format!(",{}", 60 + (i + t) % 7));
            }
            csv.push('\n');
        }
        write(dir.path(), "speed.csv", &csv);
        assert_eq!(load_dataset(dir.path()).unwrap().series(), 207);
    }

    #[test]
    fn structural_errors() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "meta.json",
            r#"{"frequency_seconds": 60, "features": ["v"], "series": ["a", "b"]}"#,
        );
        write(dir.path(), "v.csv", "timestamp,a,b\n2020-01-01T00:00:00,1\n");
        assert!(matches!(load_dataset(dir.path()), Err(DataError::Ragged { .. })));

        write(
            dir.path(),
            "v.csv",
            "timestamp,a,b\n2020-01-01T00:01:00,1,2\n2020-01-01T00:00:00,1,2\n",
        );
        assert!(matches!(load_dataset(dir.path()), Err(DataError::Timestamps { .. })));

        write(dir.path(), "v.csv", "timestamp,a,c\n2020-01-01T00:00:00,1,2\n");
        assert!(matches!(load_dataset(dir.path()), Err(DataError::SeriesMismatch { .. })));
    }

    #[test]
    fn out_of_bounds_reading_replaced_by_series_mean() {
        let x = one_series(&[1.0, 100.0, 2.0]);
        let c = clean_series(&x, f64::NEG_INFINITY, 10.0).unwrap();
        assert_eq!(c.series_values(0, 0), vec![1.0, 1.5, 2.0]);
        assert!(!c.observed(1, 0));
        assert!(c.observed(0, 0) && c.observed(2, 0));
    }

    #[test]
    fn in_bounds_cleaning_is_identity() {
        let x = one_series(&[1.0, 2.0, 3.0]);
        assert_eq!(clean_series(&x, 0.0, 10.0).unwrap(), x);
    }

    #[test]
    fn unbounded_cleaning_imputes_missing() {
        let x = one_series(&[4.0, f64::NAN, 8.0]);
        let c = clean_series(&x, f64::NEG_INFINITY, f64::INFINITY).unwrap();
        assert_eq!(c.get(0, 1, 0), 6.0);
        assert!(!c.has_nan());
    }

    #[test]
    fn fully_missing_series_is_named() {
        let x = TimeSeriesTensor::from_series(&[vec![1.0, 2.0], vec![f64::NAN, f64::NAN]], 60);
        match clean_series(&x, -10.0, 10.0) {
            Err(DataError::EmptySeries { series, .. }) => assert_eq!(series, "s1"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(clean_series(&x, 1.0, 1.0).is_err());
    }

    #[test]
    fn resample_examples() {
        let x = one_series(&[1.0, 3.0, 5.0, 7.0]);
        let (r, rep) = resample_mean(&x, 2).unwrap();
        assert_eq!(r.series_values(0, 0), vec![2.0, 6.0]);
        assert_eq!(rep.dropped_steps, 0);
        assert_eq!(r.frequency_seconds, 600);

        let (r, _) = resample_mean(&one_series(&[4.0, f64::NAN]), 2).unwrap();
        assert_eq!(r.series_values(0, 0), vec![4.0]);

        let (r, _) = resample_mean(&x, 1).unwrap();
        assert_eq!(r, x);

        let (r, rep) = resample_mean(&one_series(&[1.0, 1.0, 1.0, 1.0, 9.0]), 2).unwrap();
        assert_eq!(r.steps(), 2);
        assert_eq!(rep.dropped_steps, 1);

        let (r, _) = resample_mean(&one_series(&[f64::NAN, f64::NAN]), 2).unwrap();
        assert!(!r.observed(0, 0));

        assert!(matches!(resample_mean(&x, 0), Err(DataError::Factor(0))));
    }

    #[test]
    fn split_lengths() {
        let w = WindowSpec::new(2, 1).unwrap();
        let ramp = |s: usize| one_series(&(0..s).map(|v| v as f64).collect::<Vec<_>>());
        let (a, b, c) = temporal_split(&ramp(100), [0.7, 0.1, 0.2], w).unwrap();
        assert_eq!((a.steps(), b.steps(), c.steps()), (70, 10, 20));
        let (a, b, c) = temporal_split(&ramp(101), [0.7, 0.1, 0.2], w).unwrap();
        assert_eq!((a.steps(), b.steps(), c.steps()), (70, 10, 21));
        let err = temporal_split(&ramp(10), [0.7, 0.1, 0.2], WindowSpec::new(4, 2).unwrap());
        assert!(matches!(
            err,
            Err(DataError::SegmentTooShort { segment: "validation", len: 1, need: 6 })
        ));
        assert!(temporal_split(&ramp(100), [0.7, 0.2, 0.2], w).is_err());
    }

    #[test]
    fn window_counts_and_overlap() {
        let seg = one_series(&(0..10).map(|v| v as f64).collect::<Vec<_>>());
        let spec = WindowSpec::new(4, 2).unwrap();
        let ws = make_windows(&seg, spec).unwrap();
        assert_eq!(ws.len(), 5);
        let exact = one_series(&[0.0; 6]);
        assert_eq!(make_windows(&exact, spec).unwrap().len(), 1);
        // on a ramp the value at step k is k: target j of window t is input 0 of window t+T+j
        for w in &ws {
            let target = w.target(&seg, spec);
            for j in 0..spec.horizon {
                let later = w.start + spec.input + j;
                assert_eq!(target.data()[j], later as f64);
                if later < ws.len() {
                    assert_eq!(ws[later].input(&seg, spec).data()[0], target.data()[j]);
                }
            }
        }
    }

    #[test]
    fn standardizer_examples() {
        let train = one_series(&[2.0, 4.0, 6.0]);
        let st = Standardizer::fit(&train);
        assert_eq!(st.mean(0, 0), 4.0);
        assert!((st.std(0, 0) - (8.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let back = st.inverse(&st.transform(&train));
        for (a, b) in back.values().iter().zip(train.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let val = st.transform(&one_series(&[10.0, 12.0]));
        assert!(val.values().iter().sum::<f64>().abs() > 1.0);

        let flat = one_series(&[3.0, 3.0, 3.0]);
        let st = Standardizer::fit(&flat);
        assert_eq!(st.std(0, 0), STD_FLOOR);
        assert!(st.transform(&flat).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dataset_write_then_load_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let x = TimeSeriesTensor::from_series(&[vec![0.1, f64::NAN, 1e-7], vec![-2.5, 3.0, 4.0]], 300);
        write_dataset(dir.path(), &x).unwrap();
        let y = load_dataset(dir.path()).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(!y.observed(1, 0));
        assert_eq!(y.get(0, 2, 0), 1e-7);
    }

    proptest! {
        #[test]
        fn cleaning_is_idempotent(
            vals in prop::collection::vec(prop_oneof![Just(f64::NAN), -50.0..50.0f64], 4..40)
        ) {
            prop_assume!(vals.iter().any(|v| !v.is_nan() && (-20.0..=20.0).contains(v)));
            let x = one_series(&vals);
            let once = clean_series(&x, -20.0, 20.0).unwrap();
            let twice = clean_series(&once, -20.0, 20.0).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn split_concatenates_back(s in 30usize..400) {
            let x = TimeSeriesTensor::from_series(
                &[(0..s).map(|v| v as f64).collect(), (0..s).map(|v| (v * v) as f64).collect()], 60);
            let (a, b, c) = temporal_split(&x, [0.7, 0.1, 0.2], WindowSpec::new(1, 1).unwrap()).unwrap();
            prop_assert_eq!(TimeSeriesTensor::concat_time(&[&a, &b, &c]), x);
        }

        #[test]
        fn window_count_formula(s in 2usize..200, t in 1usize..20, tau in 1usize..20) {
            prop_assume!(s >= t + tau);
            let seg = one_series(&vec![0.0; s]);
            prop_assert_eq!(make_windows(&seg, WindowSpec::new(t, tau).unwrap()).unwrap().len(), s - t - tau + 1);
        }

        #[test]
        fn standardize_round_trip(vals in prop::collection::vec(-1e3..1e3f64, 3..50)) {
            let x = one_series(&vals);
            let st = Standardizer::fit(&x);
            prop_assume!(st.std(0, 0) > 1e-3);
            let z = st.transform(&x);
            let mean = z.values().iter().sum::<f64>() / z.values().len() as f64;
            let var = z.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.values().len() as f64;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-10);
            for (a, b) in st.inverse(&z).values().iter().zip(x.values()) {
                prop_assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
