//! Sparse indirect attacks on probabilistic forecasters.
//!
//! Both attack flavors produce perturbations `delta` (d x T, relative
//! units, applied as `x * (1 + delta)`) that leave the target rows
//! untouched, respect the max-norm budget, and keep at most `k` nonzero
//! rows: exactly for the deterministic projected-gradient attack, in
//! expectation for the probabilistic sparse-layer attack.

pub(crate) mod sparse_layer;

pub use sparse_layer::{
    expected_sparsity, gate_open_probabilities, probabilistic_attack_train,
    sample_attack_perturbation, sparse_layer_sample, sparse_objective_mc, SparseLayerParams,
    SparseTrainConfig,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Window;
use crate::derive_seed;
use crate::diff::{DiffError, Graph, NodeId, Tensor};
use crate::models::{rollout, Forecaster, ModelError, NoiseBundle, PredictiveSamples};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid attack spec: {0}")]
    BadSpec(String),
    #[error("attack loss became non-finite")]
    NonFiniteLoss,
    #[error("gate weights must be strictly positive")]
    NonPositiveGate,
    #[error("attack training diverged: {0}")]
    Divergence(String),
}

/// Row-ranking key used when projecting onto the row-sparse set. Squared
/// row norms give the exact Frobenius-distance minimizer; absolute row sums
/// reproduce the cumulative-perturbation ranking and are kept behind this
/// flag.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowRanking {
    #[default]
    L2Squared,
    L1,
}

/// Statistic of the future paths the attack drives toward its target.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Statistic {
    /// One component per (target item, horizon) pair.
    #[default]
    PointValues,
    /// One component per target item: mean over the attacked horizons.
    HorizonMean,
    /// One component per horizon: sum over the target items.
    TargetSum,
}

/// Attack configuration: targets `I`, 1-based horizon offsets `H`,
/// row-sparsity bound, max-norm budget, adversarial target scale, and the
/// gradient-loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub targets: Vec<usize>,
    pub horizons: Vec<usize>,
    pub sparsity: usize,
    pub budget: f64,
    pub target_scale: f64,
    pub iterations: usize,
    /// Defaults to budget / 8 when unset.
    #[serde(default)]
    pub step_size: Option<f64>,
    pub n_grad: usize,
    #[serde(default)]
    pub row_ranking: RowRanking,
    #[serde(default)]
    pub statistic: Statistic,
}

impl AttackSpec {
    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.budget / 8.0)
    }

    pub fn max_horizon(&self) -> usize {
        self.horizons.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self, d: usize, tau: usize) -> Result<(), AttackError> {
        let bad = |msg: String| Err(AttackError::BadSpec(msg));
        if self.targets.is_empty() {
            return bad("target set is empty".into());
        }
        if self.targets.iter().any(|&i| i >= d) {
            return bad(format!("target index out of range (d = {d})"));
        }
        let mut sorted = self.targets.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.targets.len() {
            return bad("duplicate target indices".into());
        }
        if self.horizons.is_empty() || self.horizons.iter().any(|&h| h == 0 || h > tau) {
            return bad(format!("horizons must lie in 1..={tau}"));
        }
        if self.sparsity == 0 || self.sparsity > d - self.targets.len() {
            return bad(format!(
                "sparsity must lie in 1..={} (d - |targets|)",
                d - self.targets.len()
            ));
        }
        if self.budget.is_nan() || self.budget <= 0.0 {
            return bad("budget must be positive".into());
        }
        if self.target_scale.is_nan() || self.target_scale <= 0.0 || self.target_scale == 1.0 {
            return bad("target scale must be positive and different from 1".into());
        }
        if self.n_grad == 0 {
            return bad("need at least one path per gradient estimate".into());
        }
        Ok(())
    }
}

/// Adversarial target values, one per statistic component, in the
/// component order defined by the attack's statistic setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialTarget {
    pub values: Vec<f64>,
}

/// Scale a single drawn path by the target scale and read the statistic
/// off it: `t = chi(c * y_hat)`, with `y_hat` the first path of `samples`.
pub fn adversarial_target(samples: &PredictiveSamples, spec: &AttackSpec) -> AdversarialTarget {
    let path = 0;
    let value = |i: usize, h: usize| spec.target_scale * samples.paths.at3(path, i, h - 1);
    let values = match spec.statistic {
        Statistic::PointValues => {
            let mut v = Vec::with_capacity(spec.targets.len() * spec.horizons.len());
            for &i in &spec.targets {
                for &h in &spec.horizons {
                    v.push(value(i, h));
                }
            }
            v
        }
        Statistic::HorizonMean => spec
            .targets
            .iter()
            .map(|&i| {
                spec.horizons.iter().map(|&h| value(i, h)).sum::<f64>() / spec.horizons.len() as f64
            })
            .collect(),
        Statistic::TargetSum => spec
            .horizons
            .iter()
            .map(|&h| spec.targets.iter().map(|&i| value(i, h)).sum())
            .collect(),
    };
    AdversarialTarget { values }
}

/// Per-path statistic components as graph nodes, each `[n]`, in the same
/// order as [`adversarial_target`].
pub(crate) fn statistic_nodes(
    g: &mut Graph,
    steps: &[NodeId],
    spec: &AttackSpec,
) -> Result<Vec<NodeId>, DiffError> {
    let n = g.shape(steps[0])[0];
    let path_values = |g: &mut Graph, i: usize, h: usize| -> Result<NodeId, DiffError> {
        let col = g.slice(steps[h - 1], 1, i, i + 1)?;
        g.reshape(col, &[n])
    };
    match spec.statistic {
        Statistic::PointValues => {
            let mut out = Vec::new();
            for &i in &spec.targets {
                for &h in &spec.horizons {
                    out.push(path_values(g, i, h)?);
                }
            }
            Ok(out)
        }
        Statistic::HorizonMean => {
            let mut out = Vec::new();
            for &i in &spec.targets {
                let mut acc: Option<NodeId> = None;
                for &h in &spec.horizons {
                    let v = path_values(g, i, h)?;
                    acc = Some(match acc {
                        None => v,
                        Some(a) => g.add(a, v)?,
                    });
                }
                out.push(g.scale(acc.unwrap(), 1.0 / spec.horizons.len() as f64)?);
            }
            Ok(out)
        }
        Statistic::TargetSum => {
            let mut out = Vec::new();
            for &h in &spec.horizons {
                let mut acc: Option<NodeId> = None;
                for &i in &spec.targets {
                    let v = path_values(g, i, h)?;
                    acc = Some(match acc {
                        None => v,
                        Some(a) => g.add(a, v)?,
                    });
                }
                out.push(acc.unwrap());
            }
            Ok(out)
        }
    }
}

/// Monte-Carlo statistic component means from plain samples (no graph).
pub(crate) fn statistic_means(samples: &PredictiveSamples, spec: &AttackSpec) -> Vec<f64> {
    let n = samples.n_paths();
    let mean_point = |i: usize, h: usize| -> f64 {
        (0..n).map(|j| samples.paths.at3(j, i, h - 1)).sum::<f64>() / n as f64
    };
    match spec.statistic {
        Statistic::PointValues => {
            let mut v = Vec::new();
            for &i in &spec.targets {
                for &h in &spec.horizons {
                    v.push(mean_point(i, h));
                }
            }
            v
        }
        Statistic::HorizonMean => spec
            .targets
            .iter()
            .map(|&i| {
                spec.horizons.iter().map(|&h| mean_point(i, h)).sum::<f64>()
                    / spec.horizons.len() as f64
            })
            .collect(),
        Statistic::TargetSum => spec
            .horizons
            .iter()
            .map(|&h| spec.targets.iter().map(|&i| mean_point(i, h)).sum())
            .collect(),
    }
}

/// A found perturbation with the stats the contract promises. Serializes
/// with the delta spelled out as a d x T nested array.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Perturbation {
    pub window: usize,
    pub spec: AttackSpec,
    #[serde(with = "delta_rows")]
    pub delta: Tensor,
    pub row_sparsity: usize,
    pub max_norm: f64,
    pub seed: u64,
}

impl Perturbation {
    pub fn from_delta(delta: Tensor, spec: AttackSpec, window: usize, seed: u64) -> Self {
        let row_sparsity = delta.row_sq_sums().iter().filter(|&&s| s > 0.0).count();
        let max_norm = delta.linf_norm();
        Self {
            window,
            spec,
            delta,
            row_sparsity,
            max_norm,
            seed,
        }
    }

    /// Budget and untouched-target checks (shared by both attack flavors).
    pub fn validate_budget_and_targets(&self) -> Result<(), AttackError> {
        if self.delta.linf_norm() > self.spec.budget + 1e-12 {
            return Err(AttackError::BadSpec(format!(
                "max-norm {} exceeds budget {}",
                self.delta.linf_norm(),
                self.spec.budget
            )));
        }
        for &i in &self.spec.targets {
            if self.delta.row(i).iter().any(|&v| v != 0.0) {
                return Err(AttackError::BadSpec(format!("target row {i} was modified")));
            }
        }
        Ok(())
    }

    /// Full deterministic-attack invariants: budget, untouched targets, and
    /// the hard row-sparsity bound.
    pub fn validate_hard(&self) -> Result<(), AttackError> {
        self.validate_budget_and_targets()?;
        let nonzero = self
            .delta
            .row_sq_sums()
            .iter()
            .filter(|&&s| s > 0.0)
            .count();
        if nonzero > self.spec.sparsity {
            return Err(AttackError::BadSpec(format!(
                "row sparsity {nonzero} exceeds bound {}",
                self.spec.sparsity
            )));
        }
        Ok(())
    }
}

mod delta_rows {
    use super::Tensor;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(t: &Tensor, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = (0..t.shape()[0]).map(|i| t.row(i)).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Tensor, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        Tensor::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Elementwise clip onto the max-norm ball: `delta * min(1, budget/|delta|)`.
pub fn clip(delta: &Tensor, budget: f64) -> Tensor {
    delta.map(|v| v.clamp(-budget, budget))
}

/// One projected-gradient update: descend and clip back onto the ball.
pub fn pgd_step(
    delta: &Tensor,
    grad: &Tensor,
    step_size: f64,
    budget: f64,
) -> Result<Tensor, AttackError> {
    if delta.shape() != grad.shape() {
        return Err(AttackError::BadSpec(format!(
            "delta shape {:?} vs grad shape {:?}",
            delta.shape(),
            grad.shape()
        )));
    }
    let moved = delta.zip_map(grad, |d, g| d - step_size * g)?;
    Ok(clip(&moved, budget))
}

/// Keep the `k` rows (outside the target set) with the largest ranking key,
/// zero everything else. With the squared-row-norm key this is the exact
/// Frobenius-distance projection onto the feasible set; ties break toward
/// the lowest row index.
pub fn sparsify_topk(
    delta: &Tensor,
    k: usize,
    targets: &[usize],
    ranking: RowRanking,
) -> Result<Tensor, AttackError> {
    let d = delta.shape()[0];
    if k > d - targets.len() {
        return Err(AttackError::BadSpec(format!(
            "sparsity {k} out of range for d = {d}, |targets| = {}",
            targets.len()
        )));
    }
    let keys = match ranking {
        RowRanking::L2Squared => delta.row_sq_sums(),
        RowRanking::L1 => delta.row_abs_sums(),
    };
    let mut candidates: Vec<usize> = (0..d).filter(|i| !targets.contains(i)).collect();
    candidates.sort_by(|&a, &b| {
        keys[b]
            .partial_cmp(&keys[a])
            .expect("finite ranking keys")
            .then(a.cmp(&b))
    });
    let kept: Vec<usize> = candidates.into_iter().take(k).collect();

    let t_len = delta.shape()[1];
    let mut out = Tensor::zeros(delta.shape());
    for &i in &kept {
        for t in 0..t_len {
            out.data_mut()[i * t_len + t] = delta.at2(i, t);
        }
    }
    Ok(out)
}

/// Graph for the expected targeted loss
/// `sum_c E[(chi_c(y) - t_c)^2]` under `p(y | x(1 + delta))`; delta enters
/// as the named leaf `"delta"`.
fn attack_loss_graph(
    forecaster: &Forecaster,
    x: &Tensor,
    delta: &Tensor,
    target: &AdversarialTarget,
    spec: &AttackSpec,
    noise: &NoiseBundle,
) -> Result<(Graph, NodeId), AttackError> {
    let mut g = Graph::new();
    let delta_node = g.var("delta", delta.clone())?;
    let x_node = g.constant(x.clone());
    let bumped = g.add_scalar(delta_node, 1.0)?;
    let perturbed = g.mul(x_node, bumped)?;
    let steps = rollout(&mut g, forecaster, perturbed, noise)?;
    let components = statistic_nodes(&mut g, &steps, spec)?;
    debug_assert_eq!(components.len(), target.values.len());

    let mut parts = Vec::with_capacity(components.len());
    for (comp, &t_val) in components.iter().zip(&target.values) {
        let c = g.add_scalar(*comp, -t_val)?;
        let sq = g.square(c)?;
        let m = g.mean(sq)?;
        parts.push(g.reshape(m, &[1])?);
    }
    let all = g.concat(&parts, 0)?;
    let loss = g.sum(all)?;
    Ok((g, loss))
}

/// Monte-Carlo estimate of the targeted attack loss at a given delta.
pub fn attack_loss(
    forecaster: &Forecaster,
    x: &Tensor,
    delta: &Tensor,
    target: &AdversarialTarget,
    spec: &AttackSpec,
    noise: &NoiseBundle,
) -> Result<f64, AttackError> {
    let (g, loss) = attack_loss_graph(forecaster, x, delta, target, spec, noise)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(AttackError::NonFiniteLoss);
    }
    Ok(value)
}

/// Attack loss together with its gradient with respect to delta.
pub fn attack_loss_and_grad(
    forecaster: &Forecaster,
    x: &Tensor,
    delta: &Tensor,
    target: &AdversarialTarget,
    spec: &AttackSpec,
    noise: &NoiseBundle,
) -> Result<(f64, Tensor), AttackError> {
    let (g, loss) = attack_loss_graph(forecaster, x, delta, target, spec, noise)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(AttackError::NonFiniteLoss);
    }
    let mut grads = g.backward(loss)?;
    Ok((value, grads.remove("delta").expect("delta leaf exists")))
}

/// The deterministic sparse attack: projected gradient descent on the
/// expected targeted loss inside the max-norm ball (target rows pinned to
/// zero), then the analytic top-k row projection.
pub fn deterministic_attack(
    forecaster: &Forecaster,
    window: &Window,
    spec: &AttackSpec,
    seed: u64,
) -> Result<Perturbation, AttackError> {
    let d = window.dims();
    let t_len = window.history_len();
    spec.validate(d, window.horizon())?;
    let h_max = spec.max_horizon();
    let rank = forecaster.params.factor_rank();

    let clean_path = forecaster.sample_paths(&window.x, h_max, 1, derive_seed(seed, &[0]))?;
    let target = adversarial_target(&clean_path, spec);

    let mut delta = Tensor::zeros(&[d, t_len]);
    let step = spec.step();
    for iter in 0..spec.iterations {
        let mut rng = crate::seeded_rng(derive_seed(seed, &[1, iter as u64]));
        let noise = NoiseBundle::draw(&mut rng, spec.n_grad, d, rank, h_max);
        let (_, mut grad) =
            attack_loss_and_grad(forecaster, &window.x, &delta, &target, spec, &noise)?;
        // keep target rows pinned at zero throughout the descent
        for &i in &spec.targets {
            for t in 0..t_len {
                grad.data_mut()[i * t_len + t] = 0.0;
            }
        }
        delta = pgd_step(&delta, &grad, step, spec.budget)?;
    }
    let sparse = sparsify_topk(&delta, spec.sparsity, &spec.targets, spec.row_ranking)?;
    let perturbation = Perturbation::from_delta(sparse, spec.clone(), window.start, seed);
    perturbation.validate_hard()?;
    Ok(perturbation)
}

#[cfg(test)]
mod tests;
