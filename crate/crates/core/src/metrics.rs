//! Evaluation metrics for probabilistic forecasts: weighted quantile loss
//! over an alpha grid, plus WAPE / WSE relative errors of the predictive
//! mean.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::Tensor;
use crate::models::PredictiveSamples;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("quantile grid is empty or not strictly increasing in (0,1)")]
    BadGrid,
    #[error("need at least 2 sample paths, got {0}")]
    NotEnoughSamples(usize),
    #[error("alpha {0} is not on the forecast's quantile grid")]
    AlphaNotOnGrid(f64),
    #[error("ground truth is all zero over the evaluation scope")]
    ZeroDenominator,
    #[error("ground truth has a zero entry at item {item}, step {step}")]
    ZeroTruth { item: usize, step: usize },
    #[error("evaluation scope is empty or out of bounds")]
    BadScope,
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// The alpha grid used throughout the experiment tables.
pub const ALPHA_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Empirical quantiles per (item, step) over an alpha grid.
#[derive(Debug, Clone)]
pub struct QuantileForecast {
    pub levels: Vec<f64>,
    /// |levels| x d x tau.
    pub q: Tensor,
    pub n_samples: usize,
}

/// Interpolated order statistics: position `alpha * (n - 1)` with linear
/// interpolation between neighboring ranks. Monotone in alpha by
/// construction.
pub fn empirical_quantiles(
    samples: &PredictiveSamples,
    grid: &[f64],
) -> Result<QuantileForecast, MetricError> {
    if grid.is_empty()
        || grid.windows(2).any(|w| w[0] >= w[1])
        || grid.iter().any(|&a| !(0.0..=1.0).contains(&a))
    {
        return Err(MetricError::BadGrid);
    }
    let n = samples.n_paths();
    if n < 2 {
        return Err(MetricError::NotEnoughSamples(n));
    }
    let (d, tau) = (samples.dims(), samples.horizon());
    let mut q = vec![0.0; grid.len() * d * tau];
    let mut buf = vec![0.0; n];
    for i in 0..d {
        for t in 0..tau {
            for (j, slot) in buf.iter_mut().enumerate() {
                *slot = samples.paths.at3(j, i, t);
            }
            buf.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
            for (a, &alpha) in grid.iter().enumerate() {
                let pos = alpha * (n - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                let frac = pos - lo as f64;
                q[(a * d + i) * tau + t] = buf[lo] + frac * (buf[hi] - buf[lo]);
            }
        }
    }
    Ok(QuantileForecast {
        levels: grid.to_vec(),
        q: Tensor::new(vec![grid.len(), d, tau], q).expect("shape consistent"),
        n_samples: n,
    })
}

impl QuantileForecast {
    fn level_index(&self, alpha: f64) -> Result<usize, MetricError> {
        self.levels
            .iter()
            .position(|&l| (l - alpha).abs() < 1e-12)
            .ok_or(MetricError::AlphaNotOnGrid(alpha))
    }

    pub fn dims(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.q.shape()[2]
    }
}

/// All (item, step) cells of a d x tau grid.
pub fn full_scope(d: usize, tau: usize) -> Vec<(usize, usize)> {
    let mut cells = Vec::with_capacity(d * tau);
    for i in 0..d {
        for t in 0..tau {
            cells.push((i, t));
        }
    }
    cells
}

/// Cells for target items and 1-based horizon offsets.
pub fn target_scope(items: &[usize], horizons: &[usize]) -> Vec<(usize, usize)> {
    let mut cells = Vec::with_capacity(items.len() * horizons.len());
    for &i in items {
        for &h in horizons {
            cells.push((i, h - 1));
        }
    }
    cells
}

/// Weighted quantile loss at one alpha over the given cells:
/// `2 * sum[alpha (x-q)+ + (1-alpha) (q-x)+] / sum |x|`.
pub fn wql_scoped(
    x_true: &Tensor,
    forecast: &QuantileForecast,
    alpha: f64,
    scope: &[(usize, usize)],
) -> Result<f64, MetricError> {
    let (d, tau) = (x_true.shape()[0], x_true.shape()[1]);
    if forecast.dims() != d || forecast.horizon() != tau {
        return Err(MetricError::Shape(format!(
            "truth {d}x{tau} vs forecast {}x{}",
            forecast.dims(),
            forecast.horizon()
        )));
    }
    if scope.is_empty() || scope.iter().any(|&(i, t)| i >= d || t >= tau) {
        return Err(MetricError::BadScope);
    }
    let a_idx = forecast.level_index(alpha)?;
    let mut num = 0.0;
    let mut denom = 0.0;
    for &(i, t) in scope {
        let x = x_true.at2(i, t);
        let q = forecast.q.at3(a_idx, i, t);
        num += alpha * (x - q).max(0.0) + (1.0 - alpha) * (q - x).max(0.0);
        denom += x.abs();
    }
    if denom == 0.0 {
        return Err(MetricError::ZeroDenominator);
    }
    Ok(2.0 * num / denom)
}

/// Full-grid weighted quantile loss at one alpha.
pub fn wql(x_true: &Tensor, forecast: &QuantileForecast, alpha: f64) -> Result<f64, MetricError> {
    let scope = full_scope(x_true.shape()[0], x_true.shape()[1]);
    wql_scoped(x_true, forecast, alpha, &scope)
}

/// Mean of wql over the standard nine-point alpha grid; rejects forecasts
/// built on any other grid.
pub fn avg_wql_scoped(
    x_true: &Tensor,
    forecast: &QuantileForecast,
    scope: &[(usize, usize)],
) -> Result<f64, MetricError> {
    if forecast.levels.len() != ALPHA_GRID.len()
        || forecast
            .levels
            .iter()
            .zip(ALPHA_GRID.iter())
            .any(|(a, b)| (a - b).abs() > 1e-12)
    {
        return Err(MetricError::BadGrid);
    }
    let mut total = 0.0;
    for &alpha in &ALPHA_GRID {
        total += wql_scoped(x_true, forecast, alpha, scope)?;
    }
    Ok(total / ALPHA_GRID.len() as f64)
}

pub fn avg_wql(x_true: &Tensor, forecast: &QuantileForecast) -> Result<f64, MetricError> {
    let scope = full_scope(x_true.shape()[0], x_true.shape()[1]);
    avg_wql_scoped(x_true, forecast, &scope)
}

/// WAPE and WSE of the Monte-Carlo predictive mean over target items and
/// 1-based horizon offsets: mean |ratio - 1| and mean (ratio - 1)^2.
pub fn wape_wse(
    x_true: &Tensor,
    samples: &PredictiveSamples,
    items: &[usize],
    horizons: &[usize],
) -> Result<(f64, f64), MetricError> {
    let (d, tau) = (x_true.shape()[0], x_true.shape()[1]);
    if items.is_empty()
        || horizons.is_empty()
        || items.iter().any(|&i| i >= d)
        || horizons.iter().any(|&h| h == 0 || h > tau)
    {
        return Err(MetricError::BadScope);
    }
    let n = samples.n_paths();
    let mut wape = 0.0;
    let mut wse = 0.0;
    for &i in items {
        for &h in horizons {
            let t = h - 1;
            let truth = x_true.at2(i, t);
            if truth == 0.0 {
                return Err(MetricError::ZeroTruth { item: i, step: h });
            }
            let mut mean = 0.0;
            for j in 0..n {
                mean += samples.paths.at3(j, i, t);
            }
            mean /= n as f64;
            let dev = mean / truth - 1.0;
            wape += dev.abs();
            wse += dev * dev;
        }
    }
    let count = (items.len() * horizons.len()) as f64;
    Ok((wape / count, wse / count))
}

/// Mean and standard deviation over evaluation windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }

    /// "mean ± std" cell text; parses back to full precision.
    pub fn display_cell(&self) -> String {
        format!("{} ± {}", self.mean, self.std)
    }

    pub fn parse_cell(text: &str) -> Option<Self> {
        let (m, s) = text.split_once('±')?;
        Some(Self {
            mean: m.trim().parse().ok()?,
            std: s.trim().parse().ok()?,
        })
    }
}

/// Evaluation scope descriptor carried in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scope", rename_all = "kebab-case")]
pub enum ScopeSpec {
    FullGrid,
    Targets {
        items: Vec<usize>,
        horizons: Vec<usize>,
    },
}

/// Aggregated metrics across evaluation windows for one scope.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scope: ScopeSpec,
    pub n_windows: usize,
    pub avg_wql: Stat,
    pub per_alpha: Vec<(f64, Stat)>,
    pub wape: Stat,
    pub wse: Stat,
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "scope,n_windows,avg_wql,wape,wse"
    }

    pub fn csv_row(&self) -> String {
        let scope = match &self.scope {
            ScopeSpec::FullGrid => "full-grid".to_string(),
            ScopeSpec::Targets { items, horizons } => {
                format!("targets I={items:?} H={horizons:?}").replace(',', ";")
            }
        };
        format!(
            "{scope},{},{},{},{}",
            self.n_windows,
            self.avg_wql.display_cell(),
            self.wape.display_cell(),
            self.wse.display_cell()
        )
    }
}
