//! The probabilistic sparse-layer attack.
//!
//! Each perturbation row is a mixture of a Dirac mass at zero and a
//! conditional Gaussian `N(mu_i(x), sigma_i(x)^2 I)`: a gate `u_i <=
//! Phi^-1(r_i)` with `u_i ~ N(0,1)` opens row `i` with probability
//! `r_i = k sqrt(g_i) / (sqrt(d) sqrt(sum g))`, which keeps the expected
//! row sparsity at or below `k` for any positive gate weights `g`.
//! Training relaxes the hard gate to a tempered sigmoid so gradients reach
//! the gate weights; evaluation always samples hard gates.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Window;
use crate::derive_seed;
use crate::diff::special::normal_inv_cdf;
use crate::diff::{Graph, NodeId, Tensor};
use crate::models::{rollout, Forecaster, NoiseBundle};
use crate::optim::Adam;

use super::{
    adversarial_target, clip, statistic_means, statistic_nodes, AdversarialTarget, AttackError,
    AttackSpec, Perturbation,
};

const GATE_FLOOR: f64 = 1e-6;
const RATE_CLAMP: f64 = 1e-6;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Learnable sparse-layer parameters: Gaussian heads conditioned on the
/// window history plus per-row gate weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseLayerParams {
    pub dims: usize,
    pub history_len: usize,
    /// `w_mu` (d*T x F), `b_mu` (d*T), `w_sd` (d x F), `b_sd` (d).
    pub heads: BTreeMap<String, Tensor>,
    /// Strictly positive gate weights, one per row.
    pub gate_weights: Tensor,
}

impl SparseLayerParams {
    pub fn init(dims: usize, history_len: usize, seed: u64) -> Self {
        let f = 2 * dims;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 0.05;
        let mut heads = BTreeMap::new();
        heads.insert(
            "w_mu".into(),
            Tensor::from_fn(&[dims * history_len, f], |_| rng.gen_range(-bound..bound)),
        );
        heads.insert("b_mu".into(), Tensor::zeros(&[dims * history_len]));
        heads.insert(
            "w_sd".into(),
            Tensor::from_fn(&[dims, f], |_| rng.gen_range(-bound..bound)),
        );
        heads.insert(
            "b_sd".into(),
            Tensor::filled(&[dims], crate::models::softplus_inv(0.05)),
        );
        Self {
            dims,
            history_len,
            heads,
            gate_weights: Tensor::ones(&[dims]),
        }
    }

    fn check_gates(&self) -> Result<(), AttackError> {
        // rejects NaN as well as nonpositive weights
        if self
            .gate_weights
            .data()
            .iter()
            .any(|&g| g.is_nan() || g <= 0.0)
        {
            return Err(AttackError::NonPositiveGate);
        }
        Ok(())
    }

    /// Gaussian head values for a given history (plain evaluation).
    pub(crate) fn head_values(&self, x: &Tensor) -> (Tensor, Vec<f64>) {
        let phi = features(x);
        let w_mu = &self.heads["w_mu"];
        let b_mu = &self.heads["b_mu"];
        let w_sd = &self.heads["w_sd"];
        let b_sd = &self.heads["b_sd"];
        let dt = self.dims * self.history_len;
        let mut mu = vec![0.0; dt];
        for (i, slot) in mu.iter_mut().enumerate() {
            let mut s = b_mu.data()[i];
            for (c, v) in w_mu.row(i).iter().zip(phi.data()) {
                s += c * v;
            }
            *slot = s;
        }
        let sd: Vec<f64> = (0..self.dims)
            .map(|i| {
                let mut s = b_sd.data()[i];
                for (c, v) in w_sd.row(i).iter().zip(phi.data()) {
                    s += c * v;
                }
                softplus(s)
            })
            .collect();
        (
            Tensor::new(vec![self.dims, self.history_len], mu).expect("shape consistent"),
            sd,
        )
    }
}

/// Scale-free summary of the history the Gaussian heads condition on: per
/// row, its normalized mean and normalized final value.
pub(crate) fn features(x: &Tensor) -> Tensor {
    let d = x.shape()[0];
    let t = x.shape()[1];
    let mut out = Vec::with_capacity(2 * d);
    for i in 0..d {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / t as f64;
        let norm = 1.0 + row.iter().map(|v| v.abs()).sum::<f64>() / t as f64;
        out.push(mean / norm);
        out.push(row[t - 1] / norm);
    }
    Tensor::from_vec(out)
}

/// Gate-open probabilities `r_i`, clamped into [0, 1].
pub fn gate_open_probabilities(gate_weights: &[f64], k: usize) -> Vec<f64> {
    let d = gate_weights.len() as f64;
    let total: f64 = gate_weights.iter().sum();
    let denom = d.sqrt() * total.sqrt();
    gate_weights
        .iter()
        .map(|g| (k as f64 * g.sqrt() / denom).clamp(0.0, 1.0))
        .collect()
}

/// Expected row sparsity `sum_i min(1, r_i)`; at most `k` for any positive
/// gate weights, with equality at uniform weights.
pub fn expected_sparsity(gate_weights: &Tensor, k: usize) -> Result<f64, AttackError> {
    if gate_weights.data().iter().any(|&g| g.is_nan() || g <= 0.0) {
        return Err(AttackError::NonPositiveGate);
    }
    Ok(gate_open_probabilities(gate_weights.data(), k).iter().sum())
}

/// Draw one perturbation from the sparse layer: Gaussian rows, hard gates,
/// and (when a target set is supplied) zeroed target rows. No budget clip
/// here, so the raw mixture distribution is exactly the Gaussian/Dirac one.
pub fn sparse_layer_sample(
    params: &SparseLayerParams,
    x: &Tensor,
    k: usize,
    seed: u64,
    targets: Option<&[usize]>,
) -> Result<(Tensor, Vec<bool>), AttackError> {
    params.check_gates()?;
    let d = params.dims;
    let t_len = params.history_len;
    let (mu, sd) = params.head_values(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Tensor::from_fn(&[d, t_len], |_| StandardNormal.sample(&mut rng));
    let u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();

    let rates = gate_open_probabilities(params.gate_weights.data(), k);
    let mask: Vec<bool> = (0..d)
        .map(|i| {
            let thr = normal_inv_cdf(rates[i]);
            u[i] <= thr
        })
        .collect();

    let mut delta = Tensor::zeros(&[d, t_len]);
    for i in 0..d {
        if !mask[i] || targets.is_some_and(|ts| ts.contains(&i)) {
            continue;
        }
        for t in 0..t_len {
            delta.data_mut()[i * t_len + t] = mu.at2(i, t) + sd[i] * eps.at2(i, t);
        }
    }
    Ok((delta, mask))
}

/// Hard-gated sample for evaluation: target rows zeroed and the budget
/// enforced by clipping, packaged with achieved stats.
pub fn sample_attack_perturbation(
    params: &SparseLayerParams,
    spec: &AttackSpec,
    x: &Tensor,
    window_id: usize,
    seed: u64,
) -> Result<Perturbation, AttackError> {
    let (delta, _) = sparse_layer_sample(params, x, spec.sparsity, seed, Some(&spec.targets))?;
    let clipped = clip(&delta, spec.budget);
    let p = Perturbation::from_delta(clipped, spec.clone(), window_id, seed);
    p.validate_budget_and_targets()?;
    Ok(p)
}

/// Training settings for the sparse-layer attacker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseTrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Perturbation draws per objective estimate.
    pub n_delta: usize,
    /// Sample paths per inner expectation.
    pub n_inner: usize,
    /// Temperature of the relaxed gate used during training.
    pub temperature: f64,
}

impl Default for SparseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.05,
            n_delta: 8,
            n_inner: 16,
            temperature: 0.1,
        }
    }
}

/// Relaxed-gate perturbation node for one draw; used by attack training and
/// by the mini-max defender. Gradients flow to the head leaves and to the
/// gate weights through the tempered sigmoid.
pub(crate) struct SparseLayerGraph {
    pub mu: NodeId,
    pub sd: NodeId,
    pub gate_z: NodeId,
}

impl SparseLayerGraph {
    /// Install the layer's parameters as named leaves and build the shared
    /// head/gate nodes.
    pub(crate) fn install(
        g: &mut Graph,
        params: &SparseLayerParams,
        x: &Tensor,
        k: usize,
    ) -> Result<Self, AttackError> {
        params.check_gates()?;
        let d = params.dims;
        let t_len = params.history_len;
        let phi = g.constant(features(x));
        let w_mu = g.var("sl_w_mu", params.heads["w_mu"].clone())?;
        let b_mu = g.var("sl_b_mu", params.heads["b_mu"].clone())?;
        let w_sd = g.var("sl_w_sd", params.heads["w_sd"].clone())?;
        let b_sd = g.var("sl_b_sd", params.heads["b_sd"].clone())?;
        let gamma = g.var("sl_gamma", params.gate_weights.clone())?;

        let mu_flat = {
            let m = g.matmul(w_mu, phi)?;
            g.add(m, b_mu)?
        };
        let mu = g.reshape(mu_flat, &[d, t_len])?;
        let sd = {
            let s = g.matmul(w_sd, phi)?;
            let s = g.add(s, b_sd)?;
            g.softplus(s)?
        };
        // r_i = k sqrt(g_i) / (sqrt(d) sqrt(sum g)), clamped into the open
        // unit interval before the probit
        let sqrt_g = g.sqrt(gamma)?;
        let total = g.sum(gamma)?;
        let denom = g.sqrt(total)?;
        let ratio = g.div(sqrt_g, denom)?;
        let rate = g.scale(ratio, k as f64 / (d as f64).sqrt())?;
        let rate = g.clamp(rate, RATE_CLAMP, 1.0 - RATE_CLAMP)?;
        let gate_z = g.probit(rate)?;
        Ok(Self { mu, sd, gate_z })
    }

    /// One relaxed draw: `(mu + sd * eps) * sigmoid((z - u)/temp)`, target
    /// rows zeroed, clipped to the budget.
    pub(crate) fn delta_node(
        &self,
        g: &mut Graph,
        draw: &DrawNoise,
        temperature: f64,
        budget: f64,
        targets: Option<&[usize]>,
    ) -> Result<NodeId, AttackError> {
        let d = g.shape(self.mu)[0];
        let t_len = g.shape(self.mu)[1];
        let eps = g.constant(draw.eps.clone());
        let sd_cols = g.tile_cols(self.sd, t_len)?;
        let noise = g.mul(sd_cols, eps)?;
        let raw = g.add(self.mu, noise)?;

        let u = g.constant(Tensor::from_vec(draw.u.clone()));
        let zu = g.sub(self.gate_z, u)?;
        let sharp = g.scale(zu, 1.0 / temperature)?;
        let gate = g.sigmoid(sharp)?;
        let mask = g.tile_cols(gate, t_len)?;
        let mut delta = g.mul(raw, mask)?;
        if let Some(ts) = targets {
            let keep = Tensor::from_fn(&[d, t_len], |idx| {
                if ts.contains(&(idx / t_len)) {
                    0.0
                } else {
                    1.0
                }
            });
            let keep = g.constant(keep);
            delta = g.mul(delta, keep)?;
        }
        Ok(g.clamp(delta, -budget, budget)?)
    }
}

/// Per-draw gate and row noise.
pub(crate) struct DrawNoise {
    pub eps: Tensor,
    pub u: Vec<f64>,
}

impl DrawNoise {
    pub(crate) fn draw(rng: &mut ChaCha8Rng, d: usize, t_len: usize) -> Self {
        let eps = Tensor::from_fn(&[d, t_len], |_| StandardNormal.sample(rng));
        let u = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        Self { eps, u }
    }
}

pub(crate) fn sparse_param_map(params: &SparseLayerParams) -> BTreeMap<String, Tensor> {
    let mut map = BTreeMap::new();
    for (name, t) in &params.heads {
        map.insert(format!("sl_{name}"), t.clone());
    }
    map.insert("sl_gamma".into(), params.gate_weights.clone());
    map
}

pub(crate) fn sparse_params_from_map(
    params: &mut SparseLayerParams,
    map: &BTreeMap<String, Tensor>,
) {
    for (name, t) in &mut params.heads {
        *t = map[&format!("sl_{name}")].clone();
    }
    // projected update keeps the gates strictly positive
    params.gate_weights = map["sl_gamma"].map(|g| g.max(GATE_FLOOR));
}

/// Train the sparse-layer attacker on one window by stochastic gradient on
/// the expected squared distance between the attacked statistic and the
/// adversarial target.
pub fn probabilistic_attack_train(
    forecaster: &Forecaster,
    window: &Window,
    spec: &AttackSpec,
    config: &SparseTrainConfig,
    seed: u64,
) -> Result<SparseLayerParams, AttackError> {
    let d = window.dims();
    spec.validate(d, window.horizon())?;
    let t_len = window.history_len();
    let h_max = spec.max_horizon();
    let rank = forecaster.params.factor_rank();

    let clean = forecaster.sample_paths(&window.x, h_max, 1, derive_seed(seed, &[0]))?;
    let target = adversarial_target(&clean, spec);

    let mut params = SparseLayerParams::init(d, t_len, derive_seed(seed, &[1]));
    let mut adam = Adam::new(config.lr);

    for step in 0..config.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2, step as u64]));
        let mut g = Graph::new();
        let layer = SparseLayerGraph::install(&mut g, &params, &window.x, spec.sparsity)?;
        let x_node = g.constant(window.x.clone());

        let mut objs = Vec::with_capacity(config.n_delta);
        for _ in 0..config.n_delta {
            let draw = DrawNoise::draw(&mut rng, d, t_len);
            let delta = layer.delta_node(
                &mut g,
                &draw,
                config.temperature,
                spec.budget,
                Some(&spec.targets),
            )?;
            let bumped = g.add_scalar(delta, 1.0)?;
            let perturbed = g.mul(x_node, bumped)?;
            let noise = NoiseBundle::draw(&mut rng, config.n_inner, d, rank, h_max);
            let steps = rollout(&mut g, forecaster, perturbed, &noise)?;
            let comps = statistic_nodes(&mut g, &steps, spec)?;
            let mut obj: Option<NodeId> = None;
            for (comp, &t_val) in comps.iter().zip(&target.values) {
                let mean = g.mean(*comp)?;
                let centered = g.add_scalar(mean, -t_val)?;
                let sq = g.square(centered)?;
                obj = Some(match obj {
                    None => sq,
                    Some(acc) => g.add(acc, sq)?,
                });
            }
            objs.push(g.reshape(obj.expect("at least one component"), &[1])?);
        }
        let all = g.concat(&objs, 0)?;
        let loss = g.mean(all)?;
        if !g.value(loss).item().is_finite() {
            return Err(AttackError::Divergence(format!(
                "non-finite objective at step {step}"
            )));
        }
        let grads = g.backward(loss)?;
        let mut map = sparse_param_map(&params);
        adam.step(&mut map, &grads);
        sparse_params_from_map(&mut params, &map);
    }
    debug_assert!(
        expected_sparsity(&params.gate_weights, spec.sparsity)? <= spec.sparsity as f64 + 1e-9
    );
    Ok(params)
}

/// Monte-Carlo estimate of the sparse-layer objective with hard gates:
/// `E_delta || E_y[chi(y)] - t ||^2`.
#[allow(clippy::too_many_arguments)]
pub fn sparse_objective_mc(
    params: &SparseLayerParams,
    forecaster: &Forecaster,
    window: &Window,
    spec: &AttackSpec,
    target: &AdversarialTarget,
    n_draws: usize,
    n_inner: usize,
    seed: u64,
) -> Result<f64, AttackError> {
    let h_max = spec.max_horizon();
    let mut total = 0.0;
    for m in 0..n_draws {
        let p = sample_attack_perturbation(
            params,
            spec,
            &window.x,
            window.start,
            derive_seed(seed, &[3, m as u64]),
        )?;
        let perturbed = window.x.zip_map(&p.delta, |x, dl| x * (1.0 + dl))?;
        let samples = forecaster.sample_paths(
            &perturbed,
            h_max,
            n_inner,
            derive_seed(seed, &[4, m as u64]),
        )?;
        let means = statistic_means(&samples, spec);
        total += means
            .iter()
            .zip(&target.values)
            .map(|(m, t)| (m - t).powi(2))
            .sum::<f64>();
    }
    Ok(total / n_draws as f64)
}
