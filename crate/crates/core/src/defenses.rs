//! Defenses: Gaussian data augmentation, randomized smoothing inference,
//! and mini-max adversarial training with an internal sparse layer.
//!
//! All jitter is multiplicative (`x * (1 + noise)`); there is no additive
//! noise path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::AttackError;
use crate::attacks::{
    sparse_layer::{sparse_param_map, sparse_params_from_map, DrawNoise, SparseLayerGraph},
    sparse_layer_sample, SparseLayerParams,
};
use crate::data::Window;
use crate::derive_seed;
use crate::diff::{DiffError, Graph, Tensor};
use crate::models::{
    fit, rollout, Forecaster, ModelConfig, ModelError, ModelParams, NoiseBundle, PredictiveSamples,
    Scaling,
};
use crate::optim::Adam;

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid defense config: {0}")]
    BadConfig(String),
}

/// Randomized-smoothing inference settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub sigma: f64,
    pub n_paths: usize,
    pub seed: u64,
}

/// Multiplicative Gaussian jitter of the history; the future stays
/// untouched.
pub fn augment(window: &Window, sigma: f64, seed: u64) -> Window {
    if sigma == 0.0 {
        return window.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = window.x.map(|v| {
        let xi: f64 = StandardNormal.sample(&mut rng);
        v * (1.0 + sigma * xi)
    });
    Window {
        x,
        y_true: window.y_true.clone(),
        item_ids: window.item_ids.clone(),
        start: window.start,
    }
}

/// Sample paths from the smoothed forecaster: each path sees its own
/// multiplicatively jittered history. With `sigma = 0` this reproduces the
/// base sampler bit for bit (the path noise layout is shared).
pub fn smoothed_sample_paths(
    forecaster: &Forecaster,
    x: &Tensor,
    horizon: usize,
    config: &SmoothingConfig,
) -> Result<PredictiveSamples, DefenseError> {
    if config.n_paths == 0 {
        return Err(DefenseError::BadConfig("need at least one path".into()));
    }
    if config.sigma < 0.0 {
        return Err(DefenseError::BadConfig("noise level must be >= 0".into()));
    }
    let d = forecaster.dims();
    let n = config.n_paths;
    let rank = forecaster.params.factor_rank();
    let mut path_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bundle = NoiseBundle::draw(&mut path_rng, n, d, rank, horizon);
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0xA06]));

    let (_, t_len) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; n * d * horizon];
    for j in 0..n {
        let jittered = if config.sigma == 0.0 {
            x.clone()
        } else {
            x.map(|v| {
                let eps: f64 = StandardNormal.sample(&mut jitter_rng);
                v * (1.0 + config.sigma * eps)
            })
        };
        debug_assert_eq!(jittered.shape(), [d, t_len]);
        let single = slice_path(&bundle, j);
        let path = forecaster.sample_paths_with_noise(&jittered, &single, config.seed)?;
        for i in 0..d {
            for h in 0..horizon {
                out[(j * d + i) * horizon + h] = path.paths.at3(0, i, h);
            }
        }
    }
    Ok(PredictiveSamples {
        paths: Tensor::new(vec![n, d, horizon], out).expect("shape consistent"),
        seed: config.seed,
    })
}

/// Extract path `j`'s noise rows as a single-path bundle.
fn slice_path(bundle: &NoiseBundle, j: usize) -> NoiseBundle {
    let take_row = |t: &Tensor| {
        let cols = t.shape()[1];
        Tensor::new(vec![1, cols], t.row(j).to_vec()).expect("shape consistent")
    };
    NoiseBundle {
        state: bundle.state.iter().map(take_row).collect(),
        factor: bundle.factor.iter().map(take_row).collect(),
    }
}

/// Mini-max training settings. The defender's sparse layer has no access to
/// the attacker's target set, so no rows are force-zeroed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimaxConfig {
    /// Defender sparse-layer sparsity (hyper-parameter).
    pub sparsity: usize,
    pub epochs: usize,
    pub attacker_steps: usize,
    pub model_steps: usize,
    pub attacker_lr: f64,
    pub model_lr: f64,
    /// Perturbation draws per window per step.
    #[serde(default = "default_draws")]
    pub draws: usize,
    /// Sample paths per inner expectation in the attacker loss.
    #[serde(default = "default_draws")]
    pub n_inner: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Stability bound on the defender's perturbations (relative units).
    #[serde(default = "default_perturb_clip")]
    pub perturb_clip: f64,
    pub seed: u64,
    /// Test hook: freeze the sparse layer at delta = 0, which reduces
    /// training to ordinary maximum likelihood.
    #[serde(default)]
    pub disable_perturbation: bool,
}

fn default_draws() -> usize {
    8
}

fn default_temperature() -> f64 {
    0.1
}

fn default_perturb_clip() -> f64 {
    1.0
}

#[derive(Debug, Clone)]
pub struct MinimaxReport {
    /// Mean training NLL per epoch, measured on the corrupted inputs.
    pub nll_per_epoch: Vec<f64>,
    /// Attacker objective per epoch (negated deviation), after its updates.
    pub attacker_loss_per_epoch: Vec<f64>,
    /// Epoch at which training stopped early with the last stable
    /// checkpoint, if any phase diverged.
    pub aborted_at: Option<usize>,
}

pub fn minimax_train(
    dataset: &[Window],
    model: &ModelConfig,
    config: &MinimaxConfig,
) -> Result<Forecaster, DefenseError> {
    minimax_train_with_report(dataset, model, config).map(|(f, _)| f)
}

/// Alternating optimization: each epoch the sparse layer is updated to
/// maximize the model's deviation from the ground truth, then the model is
/// updated to maximize likelihood on inputs corrupted by the current layer.
pub fn minimax_train_with_report(
    dataset: &[Window],
    model: &ModelConfig,
    config: &MinimaxConfig,
) -> Result<(Forecaster, MinimaxReport), DefenseError> {
    if dataset.is_empty() {
        return Err(DefenseError::Model(ModelError::EmptyDataset));
    }
    let d = dataset[0].dims();
    if config.sparsity == 0 || config.sparsity > d {
        return Err(DefenseError::BadConfig(format!(
            "defender sparsity must lie in 1..={d}"
        )));
    }
    if config.epochs == 0 {
        return Err(DefenseError::BadConfig("need at least one epoch".into()));
    }
    let t_len = dataset[0].history_len();
    let scaling = Scaling::from_windows(dataset);

    let mut params = init_params(d, model, config.seed)?;
    let mut layer = SparseLayerParams::init(d, t_len, derive_seed(config.seed, &[0]));
    let mut attacker_adam = Adam::new(config.attacker_lr);
    let mut model_adam = Adam::new(config.model_lr);

    let mut report = MinimaxReport {
        nll_per_epoch: Vec::with_capacity(config.epochs),
        attacker_loss_per_epoch: Vec::with_capacity(config.epochs),
        aborted_at: None,
    };
    let mut last_stable = params.clone();

    'epochs: for epoch in 0..config.epochs {
        // -- attacker phase: minimize l_g = -sum_i E || E[y_i] - y_i_true ||
        let mut attacker_loss = f64::NAN;
        if !config.disable_perturbation {
            for step in 0..config.attacker_steps {
                match attacker_pass(
                    dataset,
                    &params,
                    &scaling,
                    &mut layer,
                    &mut attacker_adam,
                    config,
                    derive_seed(config.seed, &[1, epoch as u64, step as u64]),
                ) {
                    Ok(loss) => attacker_loss = loss,
                    Err(err) => {
                        tracing::warn!(
                            "attacker phase diverged at epoch {epoch}: {err}; \
                             returning last stable checkpoint"
                        );
                        report.aborted_at = Some(epoch);
                        params = last_stable;
                        break 'epochs;
                    }
                }
            }
        }
        report.attacker_loss_per_epoch.push(attacker_loss);

        // -- model phase: maximize likelihood on corrupted inputs
        let mut epoch_nll = f64::NAN;
        for step in 0..config.model_steps {
            match model_pass(
                dataset,
                &mut params,
                &scaling,
                &layer,
                &mut model_adam,
                config,
                derive_seed(config.seed, &[2, epoch as u64, step as u64]),
            ) {
                Ok(nll) => epoch_nll = nll,
                Err(err) => {
                    tracing::warn!(
                        "model phase diverged at epoch {epoch}: {err}; \
                         returning last stable checkpoint"
                    );
                    report.aborted_at = Some(epoch);
                    params = last_stable;
                    break 'epochs;
                }
            }
        }
        report.nll_per_epoch.push(epoch_nll);
        last_stable = params.clone();
    }

    Ok((Forecaster { params, scaling }, report))
}

fn init_params(d: usize, model: &ModelConfig, seed: u64) -> Result<ModelParams, DefenseError> {
    Ok(match model {
        ModelConfig::LinearVar { order } => {
            if *order == 0 {
                return Err(DefenseError::BadConfig("VAR order must be >= 1".into()));
            }
            ModelParams::LinearVar(crate::models::LinearVarParams {
                dims: d,
                order: *order,
                coeffs: (0..*order).map(|_| Tensor::zeros(&[d, d])).collect(),
                intercept: Tensor::zeros(&[d]),
                noise_raw: Tensor::filled(&[d], crate::models::softplus_inv(1.0)),
            })
        }
        ModelConfig::RecurrentLowrank { hidden, rank, .. } => ModelParams::Recurrent(
            crate::models::RecurrentParams::init(d, *hidden, *rank, derive_seed(seed, &[7])),
        ),
    })
}

/// One attacker update across all windows; returns the attacker loss.
#[allow(clippy::too_many_arguments)]
fn attacker_pass(
    dataset: &[Window],
    params: &ModelParams,
    scaling: &Scaling,
    layer: &mut SparseLayerParams,
    adam: &mut Adam,
    config: &MinimaxConfig,
    seed: u64,
) -> Result<f64, DefenseError> {
    use std::collections::BTreeMap;
    let forecaster = Forecaster {
        params: params.clone(),
        scaling: scaling.clone(),
    };
    let d = dataset[0].dims();
    let rank = params.factor_rank();
    let mut grads_total: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut loss_total = 0.0;
    for (w_idx, window) in dataset.iter().enumerate() {
        let tau = window.horizon();
        let t_len = window.history_len();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[w_idx as u64]));
        let mut g = Graph::new();
        let gate = SparseLayerGraph::install(&mut g, layer, &window.x, config.sparsity)?;
        let x_node = g.constant(window.x.clone());

        let mut norms = Vec::with_capacity(config.draws);
        for _ in 0..config.draws {
            let draw = DrawNoise::draw(&mut rng, d, t_len);
            let delta =
                gate.delta_node(&mut g, &draw, config.temperature, config.perturb_clip, None)?;
            let bumped = g.add_scalar(delta, 1.0)?;
            let perturbed = g.mul(x_node, bumped)?;
            let noise = NoiseBundle::draw(&mut rng, config.n_inner, d, rank, tau);
            let steps = rollout(&mut g, &forecaster, perturbed, &noise)?;
            // || E[y] - y_true ||_2 over the flattened d x tau deviation
            let mut sq_sum = None;
            for (h, step) in steps.iter().enumerate() {
                let mean = g.mean_axis0(*step)?;
                let truth = g.constant(Tensor::from_vec(window.y_true.col(h)));
                let diff = g.sub(mean, truth)?;
                let sq = g.square(diff)?;
                let s = g.sum(sq)?;
                sq_sum = Some(match sq_sum {
                    None => s,
                    Some(acc) => g.add(acc, s)?,
                });
            }
            let total = g.add_scalar(sq_sum.expect("horizon >= 1"), 1e-12)?;
            let norm = g.sqrt(total)?;
            norms.push(g.reshape(norm, &[1])?);
        }
        let all = g.concat(&norms, 0)?;
        let mean_norm = g.mean(all)?;
        let loss = g.scale(mean_norm, -1.0)?; // minimize the negated deviation
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(DefenseError::Attack(AttackError::Divergence(
                "non-finite attacker loss".into(),
            )));
        }
        loss_total += value;
        for (name, grad) in g.backward(loss)? {
            match grads_total.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                        *a += b;
                    }
                }
                None => {
                    grads_total.insert(name, grad);
                }
            }
        }
    }
    let mut map = sparse_param_map(layer);
    adam.step(&mut map, &grads_total);
    sparse_params_from_map(layer, &map);
    Ok(loss_total)
}

/// One model update across all windows; returns the mean NLL on corrupted
/// inputs.
#[allow(clippy::too_many_arguments)]
fn model_pass(
    dataset: &[Window],
    params: &mut ModelParams,
    scaling: &Scaling,
    layer: &SparseLayerParams,
    adam: &mut Adam,
    config: &MinimaxConfig,
    seed: u64,
) -> Result<f64, DefenseError> {
    use std::collections::BTreeMap;
    let mut grads_total: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut nll_total = 0.0;
    let mut terms = 0usize;
    for (w_idx, window) in dataset.iter().enumerate() {
        for m in 0..config.draws {
            let corrupted_x = if config.disable_perturbation {
                window.x.clone()
            } else {
                let (delta, _) = sparse_layer_sample(
                    layer,
                    &window.x,
                    config.sparsity,
                    derive_seed(seed, &[w_idx as u64, m as u64]),
                    None,
                )?;
                let clipped = crate::attacks::clip(&delta, config.perturb_clip);
                window.x.zip_map(&clipped, |x, dl| x * (1.0 + dl))?
            };
            let corrupted = Window {
                x: corrupted_x,
                y_true: window.y_true.clone(),
                item_ids: window.item_ids.clone(),
                start: window.start,
            };
            let series = crate::models::scaled_series(&corrupted, scaling);
            let mut g = Graph::new();
            let nll = match params {
                ModelParams::LinearVar(p) => p.nll_node(&mut g, &series, true)?,
                ModelParams::Recurrent(p) => p.nll_node(&mut g, &series, true)?,
            };
            let value = g.value(nll).item();
            if !value.is_finite() {
                return Err(DefenseError::Model(ModelError::Divergence(
                    "non-finite NLL on corrupted inputs".into(),
                )));
            }
            nll_total += value;
            terms += 1;
            for (name, grad) in g.backward(nll)? {
                match grads_total.get_mut(&name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        grads_total.insert(name, grad);
                    }
                }
            }
        }
    }
    match params {
        ModelParams::LinearVar(p) => {
            let mut map = p.param_map();
            adam.step(&mut map, &grads_total);
            p.set_from_map(&map);
        }
        ModelParams::Recurrent(p) => {
            adam.step(&mut p.tensors, &grads_total);
        }
    }
    Ok(nll_total / terms.max(1) as f64)
}

/// Ordinary fit on augmented windows: the data-augmentation defense, and
/// the base model randomized smoothing runs on.
pub fn augmented_fit(
    dataset: &[Window],
    model: &ModelConfig,
    sigma: f64,
    seed: u64,
) -> Result<Forecaster, DefenseError> {
    let augmented: Vec<Window> = dataset
        .iter()
        .enumerate()
        .map(|(i, w)| augment(w, sigma, derive_seed(seed, &[i as u64])))
        .collect();
    Ok(fit(&augmented, model)?)
}
