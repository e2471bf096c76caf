//! Dataset ingestion, synthetic generation with known dynamics, windowing.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("non-numeric cell at row {row}, column `{column}`: `{value}`")]
    BadCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("{0}")]
    BadFormat(String),
    #[error("coefficients are unstable: spectral radius bound {0:.4} >= 1")]
    Unstable(f64),
    #[error("series too short: length {length} < history {history} + horizon {horizon}")]
    TooShort {
        length: usize,
        history: usize,
        horizon: usize,
    },
}

/// One forecasting instance: history `x` (d x T) and the ground-truth
/// future `y_true` (d x tau) that follows it.
#[derive(Debug, Clone)]
pub struct Window {
    pub x: Tensor,
    pub y_true: Tensor,
    pub item_ids: Arc<Vec<String>>,
    /// Index of the first history column within the source series.
    pub start: usize,
}

impl Window {
    pub fn dims(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn history_len(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.y_true.shape()[1]
    }
}

/// A full multivariate series with item metadata.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// d x L values.
    pub values: Tensor,
    pub item_ids: Arc<Vec<String>>,
    pub freq: String,
    /// Boundary between the training region and the held-out tail;
    /// defaults to the full length (no holdout).
    pub split_index: usize,
    pub timestamps: Option<Vec<String>>,
}

impl Dataset {
    pub fn dims(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Load a wide-format CSV: first column `timestamp` (ISO-8601 strings are
/// passed through untouched), one column per item, header row required.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path_str = path.as_ref().display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path.as_ref())
        .map_err(|source| DataError::Csv {
            path: path_str.clone(),
            source,
        })?;

    let headers = reader
        .headers()
        .map_err(|source| DataError::Csv {
            path: path_str.clone(),
            source,
        })?
        .clone();
    if headers.len() < 2 {
        return Err(DataError::BadFormat(
            "need a timestamp column plus at least one value column".into(),
        ));
    }
    let item_ids: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let d = item_ids.len();

    let mut timestamps = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); d];
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|source| DataError::Csv {
            path: path_str.clone(),
            source,
        })?;
        timestamps.push(record.get(0).unwrap_or("").to_string());
        for (j, cell) in record.iter().skip(1).enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| DataError::BadCell {
                row: row_idx + 2, // 1-based, counting the header line
                column: item_ids[j].clone(),
                value: cell.to_string(),
            })?;
            if !value.is_finite() {
                return Err(DataError::BadCell {
                    row: row_idx + 2,
                    column: item_ids[j].clone(),
                    value: cell.to_string(),
                });
            }
            columns[j].push(value);
        }
    }
    let length = timestamps.len();
    if length == 0 {
        return Err(DataError::BadFormat("no data rows".into()));
    }

    let mut data = Vec::with_capacity(d * length);
    for col in &columns {
        data.extend_from_slice(col);
    }
    let values =
        Tensor::new(vec![d, length], data).map_err(|e| DataError::BadFormat(e.to_string()))?;
    Ok(Dataset {
        values,
        item_ids: Arc::new(item_ids),
        freq: "H".into(),
        split_index: length,
        timestamps: Some(timestamps),
    })
}

/// Write a dataset back to wide CSV. Values use the shortest
/// representation that round-trips, so save/load is bit-exact.
pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path_str = path.as_ref().display().to_string();
    let mut writer = csv::Writer::from_path(path.as_ref()).map_err(|source| DataError::Csv {
        path: path_str.clone(),
        source,
    })?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(dataset.item_ids.iter().cloned());
    writer
        .write_record(&header)
        .map_err(|source| DataError::Csv {
            path: path_str.clone(),
            source,
        })?;
    let l = dataset.len();
    for t in 0..l {
        let stamp = match &dataset.timestamps {
            Some(ts) => ts[t].clone(),
            None => synth_timestamp(t),
        };
        let mut row = vec![stamp];
        for i in 0..dataset.dims() {
            row.push(format!("{}", dataset.values.at2(i, t)));
        }
        writer.write_record(&row).map_err(|source| DataError::Csv {
            path: path_str.clone(),
            source,
        })?;
    }
    writer.flush().map_err(|source| DataError::Io {
        path: path_str,
        source,
    })?;
    Ok(())
}

fn synth_timestamp(index: usize) -> String {
    use chrono::{Duration, NaiveDate};
    let base = NaiveDate::from_ymd_opt(2024, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    (base + Duration::hours(index as i64))
        .format("%Y-%m-%dT%H:%M:%S")
        .to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    Var1,
    VarP,
    SeasonalVar,
}

/// Additive deterministic seasonal component: per-item sinusoid with a
/// shared period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonalSpec {
    pub period: usize,
    pub amplitudes: Vec<f64>,
}

/// A synthetic generator with known dynamics, used as oracle data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: GeneratorKind,
    /// Lag coefficient matrices A_1..A_p, each d x d.
    pub coeffs: Vec<Tensor>,
    /// Per-step intercept; zeros if omitted.
    #[serde(default)]
    pub intercept: Option<Vec<f64>>,
    pub noise_scale: f64,
    pub length: usize,
    pub seed: u64,
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    #[serde(default)]
    pub seasonal: Option<SeasonalSpec>,
}

impl SyntheticSpec {
    pub fn dims(&self) -> usize {
        self.coeffs.first().map_or(0, |a| a.shape()[0])
    }

    pub fn order(&self) -> usize {
        self.coeffs.len()
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.coeffs.is_empty() {
            return Err(DataError::BadFormat("no coefficient matrices".into()));
        }
        let d = self.dims();
        for a in &self.coeffs {
            if a.shape() != [d, d] {
                return Err(DataError::BadFormat(format!(
                    "coefficient matrix shape {:?}, expected [{d}, {d}]",
                    a.shape()
                )));
            }
        }
        if self.kind == GeneratorKind::Var1 && self.coeffs.len() != 1 {
            return Err(DataError::BadFormat(
                "var1 generator takes exactly one coefficient matrix".into(),
            ));
        }
        if self.kind != GeneratorKind::SeasonalVar && self.seasonal.is_some() {
            return Err(DataError::BadFormat(
                "seasonal component requires the seasonal-var kind".into(),
            ));
        }
        if let Some(s) = &self.seasonal {
            if s.amplitudes.len() != d || s.period == 0 {
                return Err(DataError::BadFormat("bad seasonal spec".into()));
            }
        }
        if self.noise_scale < 0.0 {
            return Err(DataError::BadFormat("negative noise scale".into()));
        }
        let rho = companion_spectral_radius_bound(&self.coeffs);
        if rho >= 1.0 {
            return Err(DataError::Unstable(rho));
        }
        Ok(())
    }
}

/// Upper estimate of the spectral radius of the VAR companion matrix via
/// normalized repeated squaring; converges to the true radius from above,
/// so `< 1` certifies stationarity.
pub fn companion_spectral_radius_bound(coeffs: &[Tensor]) -> f64 {
    let d = coeffs[0].shape()[0];
    let p = coeffs.len();
    let n = d * p;
    // companion: top block row = [A_1 .. A_p], subdiagonal identity blocks
    let mut m = vec![0.0f64; n * n];
    for (lag, a) in coeffs.iter().enumerate() {
        for i in 0..d {
            for j in 0..d {
                m[i * n + lag * d + j] = a.at2(i, j);
            }
        }
    }
    for b in 1..p {
        for i in 0..d {
            m[(b * d + i) * n + (b - 1) * d + i] = 1.0;
        }
    }

    let frob = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut log_radius = 0.0f64;
    let mut weight = 1.0f64;
    let mut cur = m;
    for _ in 0..48 {
        let s = frob(&cur);
        if s == 0.0 {
            return 0.0;
        }
        log_radius += weight * s.ln();
        weight *= 0.5;
        let inv = 1.0 / s;
        for v in cur.iter_mut() {
            *v *= inv;
        }
        // square
        let mut next = vec![0.0f64; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = cur[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    next[i * n + j] += a * cur[k * n + j];
                }
            }
        }
        cur = next;
    }
    log_radius.exp()
}

/// Seeded VAR rollout; bit-exact for a fixed seed.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let d = spec.dims();
    let p = spec.order();
    if spec.length == 0 {
        return Err(DataError::BadFormat("zero length".into()));
    }
    let intercept = spec.intercept.clone().unwrap_or_else(|| vec![0.0; d]);
    if intercept.len() != d {
        return Err(DataError::BadFormat("intercept length mismatch".into()));
    }
    let initial = spec.initial.clone().unwrap_or_else(|| vec![0.0; d]);
    if initial.len() != d {
        return Err(DataError::BadFormat("initial state length mismatch".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut series: Vec<Vec<f64>> = Vec::with_capacity(spec.length + p);
    for _ in 0..p {
        series.push(initial.clone());
    }
    for t in 0..spec.length {
        let mut next = intercept.clone();
        for (lag, a) in spec.coeffs.iter().enumerate() {
            let prev = &series[series.len() - 1 - lag];
            for (i, slot) in next.iter_mut().enumerate() {
                let row = a.row(i);
                let mut acc = 0.0;
                for (coef, v) in row.iter().zip(prev) {
                    acc += coef * v;
                }
                *slot += acc;
            }
        }
        if let Some(seasonal) = &spec.seasonal {
            let phase =
                2.0 * std::f64::consts::PI * (t % seasonal.period) as f64 / seasonal.period as f64;
            for (slot, amp) in next.iter_mut().zip(&seasonal.amplitudes) {
                *slot += amp * phase.sin();
            }
        }
        for v in next.iter_mut() {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *v += spec.noise_scale * eps;
        }
        series.push(next);
    }

    // drop the seeded pre-history, keep `length` steps
    let mut data = vec![0.0; d * spec.length];
    for (t, state) in series.iter().skip(p).enumerate() {
        for i in 0..d {
            data[i * spec.length + t] = state[i];
        }
    }
    let values =
        Tensor::new(vec![d, spec.length], data).map_err(|e| DataError::BadFormat(e.to_string()))?;
    Ok(Dataset {
        values,
        item_ids: Arc::new((0..d).map(|i| format!("item_{i}")).collect()),
        freq: "H".into(),
        split_index: spec.length,
        timestamps: None,
    })
}

/// Sliding windows over the full series; the last window is the backtest
/// window. Windows are returned in chronological order.
pub fn make_windows(
    dataset: &Dataset,
    history: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<Window>, DataError> {
    let length = dataset.len();
    let need = history + horizon;
    if length < need {
        return Err(DataError::TooShort {
            length,
            history,
            horizon,
        });
    }
    if stride == 0 {
        return Err(DataError::BadFormat("stride must be positive".into()));
    }
    // enumerate window end positions backwards from the series end
    let mut ends = Vec::new();
    let mut end = length;
    loop {
        ends.push(end);
        if end < need + stride {
            break;
        }
        end -= stride;
    }
    ends.reverse();

    let d = dataset.dims();
    let mut windows = Vec::with_capacity(ends.len());
    for end in ends {
        let start = end - need;
        let mut x = vec![0.0; d * history];
        let mut y = vec![0.0; d * horizon];
        for i in 0..d {
            for t in 0..history {
                x[i * history + t] = dataset.values.at2(i, start + t);
            }
            for t in 0..horizon {
                y[i * horizon + t] = dataset.values.at2(i, start + history + t);
            }
        }
        windows.push(Window {
            x: Tensor::new(vec![d, history], x).expect("shape consistent"),
            y_true: Tensor::new(vec![d, horizon], y).expect("shape consistent"),
            item_ids: Arc::clone(&dataset.item_ids),
            start,
        });
    }
    Ok(windows)
}

/// Split chronologically ordered windows into a training set and the last
/// `n_eval` evaluation windows, dropping any training window whose future
/// overlaps an evaluation horizon.
pub fn split_windows(windows: Vec<Window>, n_eval: usize) -> (Vec<Window>, Vec<Window>) {
    if n_eval == 0 || windows.is_empty() {
        return (windows, Vec::new());
    }
    let n_eval = n_eval.min(windows.len());
    let split = windows.len() - n_eval;
    let eval: Vec<Window> = windows[split..].to_vec();
    let eval_future_start = eval
        .iter()
        .map(|w| w.start + w.history_len())
        .min()
        .unwrap();
    let train: Vec<Window> = windows[..split]
        .iter()
        .filter(|w| w.start + w.history_len() + w.horizon() <= eval_future_start)
        .cloned()
        .collect();
    (train, eval)
}
