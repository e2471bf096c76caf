//! Linear VAR(p) with intercept and diagonal Gaussian noise.

use std::collections::BTreeMap;

use crate::data::Window;
use crate::diff::graph::invert;
use crate::diff::{Graph, NodeId, Tensor};

use super::likelihood::lowrank_logpdf_node;
use super::rollout::NoiseBundle;
use super::{softplus_inv, ModelError, Scaling};

/// Coefficients live in scaled space (inputs divided by the per-item
/// scaling factors).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearVarParams {
    pub dims: usize,
    pub order: usize,
    /// A_1..A_p, each d x d.
    pub coeffs: Vec<Tensor>,
    pub intercept: Tensor,
    /// Pre-softplus noise standard deviations.
    pub noise_raw: Tensor,
}

impl LinearVarParams {
    pub fn noise_std(&self) -> Vec<f64> {
        self.noise_raw.data().iter().map(|&v| softplus(v)).collect()
    }

    /// One-step conditional mean in scaled space given the lag states
    /// (most recent first).
    fn step_mean(&self, lags: &[&[f64]]) -> Vec<f64> {
        let mut mean = self.intercept.data().to_vec();
        for (a, lag) in self.coeffs.iter().zip(lags) {
            for (i, slot) in mean.iter_mut().enumerate() {
                let row = a.row(i);
                let mut acc = 0.0;
                for (c, v) in row.iter().zip(*lag) {
                    acc += c * v;
                }
                *slot += acc;
            }
        }
        mean
    }

    /// Reparameterized rollout, paths batched; returns n x d x tau.
    pub(super) fn sample_direct(
        &self,
        x: &Tensor,
        scaling: &Scaling,
        noise: &NoiseBundle,
    ) -> Result<Tensor, ModelError> {
        let d = self.dims;
        let t_len = x.shape()[1];
        if t_len < self.order {
            return Err(ModelError::BadConfig(format!(
                "history length {t_len} below VAR order {}",
                self.order
            )));
        }
        let n = noise.n_paths();
        let tau = noise.horizon();
        let xs = scaling.scale_history(x);

        // per-path lag states, most recent last
        let init: Vec<Vec<f64>> = (0..self.order)
            .map(|back| xs.col(t_len - 1 - back))
            .collect();
        let mut lags: Vec<Vec<Vec<f64>>> = (0..n).map(|_| init.clone()).collect();

        let mut out = vec![0.0; n * d * tau];
        for h in 0..tau {
            let eps = &noise.state[h];
            for j in 0..n {
                let lag_refs: Vec<&[f64]> = lags[j].iter().map(|v| v.as_slice()).collect();
                let mut y = self.step_mean(&lag_refs);
                for (i, v) in y.iter_mut().enumerate() {
                    *v += softplus(self.noise_raw.data()[i]) * eps.at2(j, i);
                }
                for i in 0..d {
                    out[(j * d + i) * tau + h] = y[i] * scaling.factors[i];
                }
                lags[j].insert(0, y);
                lags[j].truncate(self.order);
            }
        }
        Ok(Tensor::new(vec![n, d, tau], out).expect("shape consistent"))
    }

    /// Exact h-step-ahead predictive mean (zero-noise recursion), unscaled.
    pub(super) fn mean_closed_form(&self, x: &Tensor, scaling: &Scaling, horizon: usize) -> Tensor {
        let t_len = x.shape()[1];
        let xs = scaling.scale_history(x);
        let mut lags: Vec<Vec<f64>> = (0..self.order)
            .map(|back| xs.col(t_len - 1 - back))
            .collect();
        let mut last = lags[0].clone();
        for _ in 0..horizon {
            let lag_refs: Vec<&[f64]> = lags.iter().map(|v| v.as_slice()).collect();
            last = self.step_mean(&lag_refs);
            lags.insert(0, last.clone());
            lags.truncate(self.order);
        }
        Tensor::from_vec(
            last.iter()
                .enumerate()
                .map(|(i, v)| v * scaling.factors[i])
                .collect(),
        )
    }

    /// Teacher-forced negative log-likelihood graph over one scaled series.
    /// With `as_leaves` the coefficients enter as named variables
    /// (`a0..a{p-1}`, `intercept`, `noise_raw`).
    pub(crate) fn nll_node(
        &self,
        g: &mut Graph,
        series: &[Vec<f64>],
        as_leaves: bool,
    ) -> Result<NodeId, ModelError> {
        let d = self.dims;
        let p = self.order;
        let len = series[0].len();
        if len <= p {
            return Err(ModelError::BadConfig(
                "series shorter than VAR order".into(),
            ));
        }
        let mut coeff_nodes = Vec::with_capacity(p);
        for (lag, a) in self.coeffs.iter().enumerate() {
            let id = if as_leaves {
                g.var(format!("a{lag}"), a.clone())?
            } else {
                g.constant(a.clone())
            };
            coeff_nodes.push(id);
        }
        let intercept = if as_leaves {
            g.var("intercept", self.intercept.clone())?
        } else {
            g.constant(self.intercept.clone())
        };
        let noise_raw = if as_leaves {
            g.var("noise_raw", self.noise_raw.clone())?
        } else {
            g.constant(self.noise_raw.clone())
        };
        let sd = g.softplus(noise_raw)?;
        let var = g.square(sd)?;

        let col =
            |t: usize| -> Tensor { Tensor::from_vec(series.iter().map(|row| row[t]).collect()) };
        let mut lls = Vec::with_capacity(len - p);
        for t in p..len {
            let mut mean = intercept;
            for (lag, a) in coeff_nodes.iter().enumerate() {
                let prev = g.constant(col(t - 1 - lag));
                let contrib = g.matmul(*a, prev)?;
                mean = g.add(mean, contrib)?;
            }
            let target = g.constant(col(t));
            let ll = lowrank_logpdf_node(g, target, mean, var, None)?;
            lls.push(g.reshape(ll, &[1])?);
        }
        let all = g.concat(&lls, 0)?;
        let mean_ll = g.mean(all)?;
        Ok(g.scale(mean_ll, -1.0 / d as f64)?)
    }

    pub(crate) fn param_map(&self) -> BTreeMap<String, Tensor> {
        let mut map = BTreeMap::new();
        for (lag, a) in self.coeffs.iter().enumerate() {
            map.insert(format!("a{lag}"), a.clone());
        }
        map.insert("intercept".into(), self.intercept.clone());
        map.insert("noise_raw".into(), self.noise_raw.clone());
        map
    }

    pub(crate) fn set_from_map(&mut self, map: &BTreeMap<String, Tensor>) {
        for (lag, a) in self.coeffs.iter_mut().enumerate() {
            *a = map[&format!("a{lag}")].clone();
        }
        self.intercept = map["intercept"].clone();
        self.noise_raw = map["noise_raw"].clone();
    }

    /// Mean negative log-likelihood per observation (scaled space), for
    /// descent checks.
    pub fn mean_nll(&self, windows: &[Window], scaling: &Scaling) -> f64 {
        let d = self.dims;
        let p = self.order;
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let std: Vec<f64> = self.noise_std();
        let mut total = 0.0;
        let mut count = 0usize;
        for w in windows {
            let series = stack_window(w, scaling);
            let len = series[0].len();
            for t in p..len {
                let lag_cols: Vec<Vec<f64>> =
                    (1..=p).map(|back| column_ref(&series, t - back)).collect();
                let lag_refs: Vec<&[f64]> = lag_cols.iter().map(|v| v.as_slice()).collect();
                let mean = self.step_mean(&lag_refs);
                for i in 0..d {
                    let z = (series[i][t] - mean[i]) / std[i];
                    total += 0.5 * (z * z + ln2pi) + std[i].ln();
                }
                count += d;
            }
        }
        total / count.max(1) as f64
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Concatenate history and future of a window in scaled space, per-item rows.
fn stack_window(w: &Window, scaling: &Scaling) -> Vec<Vec<f64>> {
    let d = w.dims();
    let t = w.history_len();
    let tau = w.horizon();
    (0..d)
        .map(|i| {
            let nu = scaling.factors[i];
            let mut row = Vec::with_capacity(t + tau);
            row.extend(w.x.row(i).iter().map(|v| v / nu));
            row.extend(w.y_true.row(i).iter().map(|v| v / nu));
            row
        })
        .collect()
}

fn column_ref(series: &[Vec<f64>], t: usize) -> Vec<f64> {
    series.iter().map(|row| row[t]).collect()
}

/// Exact conditional MLE: per-equation least squares over lagged regressors
/// plus intercept, noise from residuals.
pub(super) fn fit_ols(
    windows: &[Window],
    order: usize,
    scaling: &Scaling,
) -> Result<LinearVarParams, ModelError> {
    if order == 0 {
        return Err(ModelError::BadConfig("VAR order must be >= 1".into()));
    }
    let d = windows[0].dims();
    let k = d * order + 1;

    // normal equations accumulated across windows
    let mut ztz = vec![0.0f64; k * k];
    let mut zty = vec![0.0f64; k * d];
    let mut rows = 0usize;

    let mut observations: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for w in windows {
        let series = stack_window(w, scaling);
        let len = series[0].len();
        if len <= order {
            continue;
        }
        for t in order..len {
            let mut z = Vec::with_capacity(k);
            for back in 1..=order {
                z.extend(column_ref(&series, t - back));
            }
            z.push(1.0);
            let y = column_ref(&series, t);
            for a in 0..k {
                for b in 0..k {
                    ztz[a * k + b] += z[a] * z[b];
                }
                for i in 0..d {
                    zty[a * d + i] += z[a] * y[i];
                }
            }
            rows += 1;
            observations.push((z, y));
        }
    }
    if rows < k {
        return Err(ModelError::BadConfig(format!(
            "not enough observations ({rows}) for {k} regressors"
        )));
    }
    // tiny ridge for numerical safety on collinear inputs
    for a in 0..k {
        ztz[a * k + a] += 1e-9;
    }

    let ztz_t = Tensor::new(vec![k, k], ztz).expect("shape consistent");
    let inv = invert(&ztz_t, "ols")?;
    // W[a][i] = sum_b inv[a][b] * zty[b][i]
    let mut w_mat = vec![0.0f64; k * d];
    for a in 0..k {
        for b in 0..k {
            let f = inv.at2(a, b);
            if f == 0.0 {
                continue;
            }
            for i in 0..d {
                w_mat[a * d + i] += f * zty[b * d + i];
            }
        }
    }

    let mut coeffs = Vec::with_capacity(order);
    for lag in 0..order {
        let mut a = Tensor::zeros(&[d, d]);
        for i in 0..d {
            for j in 0..d {
                a.set2(i, j, w_mat[(lag * d + j) * d + i]);
            }
        }
        coeffs.push(a);
    }
    let intercept = Tensor::from_vec((0..d).map(|i| w_mat[(k - 1) * d + i]).collect());

    // residual standard deviations (MLE)
    let mut ss = vec![0.0f64; d];
    for (z, y) in &observations {
        for i in 0..d {
            let mut pred = 0.0;
            for a in 0..k {
                pred += z[a] * w_mat[a * d + i];
            }
            let r = y[i] - pred;
            ss[i] += r * r;
        }
    }
    let noise_raw = Tensor::from_vec(
        ss.iter()
            .map(|s| softplus_inv((s / rows as f64).sqrt().max(1e-6)))
            .collect(),
    );

    let params = LinearVarParams {
        dims: d,
        order,
        coeffs,
        intercept,
        noise_raw,
    };
    if !params.mean_nll(windows, scaling).is_finite() {
        return Err(ModelError::Divergence(
            "least-squares fit produced a non-finite likelihood".into(),
        ));
    }
    Ok(params)
}
