//! Probabilistic multivariate forecasters with reparameterizable sampling.
//!
//! Two model families share one emission convention (Gaussian with diagonal
//! plus optional low-rank covariance):
//!
//! - [`LinearVarParams`]: a linear VAR(p) with intercept and diagonal noise.
//!   Closed-form predictive means make it the oracle model for gradient and
//!   attack checks.
//! - [`RecurrentParams`]: a single-layer gated recurrent cell with a mean
//!   head, a diagonal-scale head and an unconditional low-rank factor.
//!
//! Sampling is reparameterized: every path is a deterministic transform of
//! standard-normal draws, so gradients of path statistics flow back to the
//! inputs through [`rollout`].

mod likelihood;
mod linear_var;
mod recurrent;
mod rollout;

pub use likelihood::{lowrank_gaussian_logpdf, lowrank_logpdf_node};
pub use linear_var::LinearVarParams;
pub(crate) use recurrent::scaled_series;
pub use recurrent::RecurrentParams;
pub use rollout::{rollout, NoiseBundle};

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Window;
use crate::diff::{DiffError, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("windows disagree on dimension: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("variance entries must be strictly positive")]
    NonPositiveVariance,
    #[error("operation requires a linear VAR model")]
    NotLinearVar,
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("{0}")]
    BadConfig(String),
    #[error("checkpoint io error: {0}")]
    CheckpointIo(String),
}

/// Per-item mean scaling: inputs are divided by `1 + mean |x_i|` before the
/// model sees them, outputs multiplied back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub factors: Vec<f64>,
}

impl Scaling {
    pub fn identity(d: usize) -> Self {
        Self {
            factors: vec![1.0; d],
        }
    }

    pub fn from_windows(windows: &[Window]) -> Self {
        let d = windows[0].dims();
        let mut sums = vec![0.0f64; d];
        let mut count = 0usize;
        for w in windows {
            let t = w.history_len();
            for (i, sum) in sums.iter_mut().enumerate() {
                *sum += w.x.row(i).iter().map(|v| v.abs()).sum::<f64>();
            }
            count += t;
        }
        Self {
            factors: sums.iter().map(|s| 1.0 + s / count.max(1) as f64).collect(),
        }
    }

    /// Scale a d x T history into model space.
    pub fn scale_history(&self, x: &Tensor) -> Tensor {
        let (d, t) = (x.shape()[0], x.shape()[1]);
        Tensor::from_fn(&[d, t], |idx| {
            let i = idx / t;
            x.data()[idx] / self.factors[i]
        })
    }
}

/// Model parameters, tagged by family.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    LinearVar(LinearVarParams),
    Recurrent(RecurrentParams),
}

impl ModelParams {
    pub fn dims(&self) -> usize {
        match self {
            ModelParams::LinearVar(p) => p.dims,
            ModelParams::Recurrent(p) => p.dims,
        }
    }

    /// Rank of the low-rank emission factor (0 for diagonal-only models).
    pub fn factor_rank(&self) -> usize {
        match self {
            ModelParams::LinearVar(_) => 0,
            ModelParams::Recurrent(p) => p.rank,
        }
    }
}

/// A trained forecaster: parameters plus the input scaling fitted with them.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecaster {
    pub params: ModelParams,
    pub scaling: Scaling,
}

/// Reparameterized sample paths from the predictive distribution.
#[derive(Debug, Clone)]
pub struct PredictiveSamples {
    /// n x d x tau.
    pub paths: Tensor,
    pub seed: u64,
}

impl PredictiveSamples {
    pub fn n_paths(&self) -> usize {
        self.paths.shape()[0]
    }

    pub fn dims(&self) -> usize {
        self.paths.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.paths.shape()[2]
    }

    /// Monte-Carlo mean over paths, d x tau.
    pub fn mean(&self) -> Tensor {
        let (n, d, tau) = (self.n_paths(), self.dims(), self.horizon());
        let mut out = vec![0.0; d * tau];
        for j in 0..n {
            for i in 0..d {
                for h in 0..tau {
                    out[i * tau + h] += self.paths.at3(j, i, h);
                }
            }
        }
        for v in out.iter_mut() {
            *v /= n as f64;
        }
        Tensor::new(vec![d, tau], out).expect("shape consistent")
    }
}

/// Training configuration; which family to fit and its hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelConfig {
    LinearVar {
        order: usize,
    },
    RecurrentLowrank {
        hidden: usize,
        rank: usize,
        epochs: usize,
        lr: f64,
        seed: u64,
    },
}

impl ModelConfig {
    pub fn linear_var() -> Self {
        ModelConfig::LinearVar { order: 1 }
    }
}

/// Maximum-likelihood fit. Linear VAR solves the least-squares problem
/// exactly; the recurrent model runs Adam on the teacher-forced negative
/// log-likelihood.
pub fn fit(dataset: &[Window], config: &ModelConfig) -> Result<Forecaster, ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let d = dataset[0].dims();
    for w in dataset {
        if w.dims() != d {
            return Err(ModelError::DimensionMismatch(d, w.dims()));
        }
    }
    let scaling = Scaling::from_windows(dataset);
    match config {
        ModelConfig::LinearVar { order } => {
            let params = linear_var::fit_ols(dataset, *order, &scaling)?;
            Ok(Forecaster {
                params: ModelParams::LinearVar(params),
                scaling,
            })
        }
        ModelConfig::RecurrentLowrank {
            hidden,
            rank,
            epochs,
            lr,
            seed,
        } => {
            if *rank > d {
                return Err(ModelError::BadConfig(format!(
                    "rank {rank} exceeds dimension {d}"
                )));
            }
            let params = recurrent::fit(dataset, *hidden, *rank, *epochs, *lr, *seed, &scaling)?;
            Ok(Forecaster {
                params: ModelParams::Recurrent(params),
                scaling,
            })
        }
    }
}

impl Forecaster {
    pub fn dims(&self) -> usize {
        self.params.dims()
    }

    /// Draw `n` reparameterized sample paths over `horizon` future steps.
    pub fn sample_paths(
        &self,
        x: &Tensor,
        horizon: usize,
        n: usize,
        seed: u64,
    ) -> Result<PredictiveSamples, ModelError> {
        if n == 0 {
            return Err(ModelError::BadConfig("need at least one path".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = NoiseBundle::draw(&mut rng, n, self.dims(), self.params.factor_rank(), horizon);
        self.sample_paths_with_noise(x, &noise, seed)
    }

    /// Sampling with externally supplied noise; `NoiseBundle::zeros` turns
    /// this into the iterated predictive mean.
    pub fn sample_paths_with_noise(
        &self,
        x: &Tensor,
        noise: &NoiseBundle,
        seed: u64,
    ) -> Result<PredictiveSamples, ModelError> {
        let paths = match &self.params {
            ModelParams::LinearVar(p) => p.sample_direct(x, &self.scaling, noise),
            ModelParams::Recurrent(p) => p.sample_direct(x, &self.scaling, noise),
        }?;
        Ok(PredictiveSamples { paths, seed })
    }

    /// Exact multi-step predictive mean of the linear VAR; errors on other
    /// model kinds.
    pub fn predictive_mean_closed_form(
        &self,
        x: &Tensor,
        horizon: usize,
    ) -> Result<Tensor, ModelError> {
        if horizon == 0 {
            return Err(ModelError::BadConfig("horizon must be >= 1".into()));
        }
        match &self.params {
            ModelParams::LinearVar(p) => Ok(p.mean_closed_form(x, &self.scaling, horizon)),
            ModelParams::Recurrent(_) => Err(ModelError::NotLinearVar),
        }
    }
}

// ---- checkpoint io ----------------------------------------------------

/// Defense metadata carried alongside a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DefenseMeta {
    Augmentation {
        sigma: f64,
    },
    Smoothing {
        sigma: f64,
        n_paths: usize,
    },
    Minimax {
        config: crate::defenses::MinimaxConfig,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum CheckpointModel {
    LinearVar {
        dims: usize,
        order: usize,
        coeffs: Vec<Tensor>,
        intercept: Vec<f64>,
        noise_raw: Vec<f64>,
    },
    RecurrentLowrank {
        dims: usize,
        hidden: usize,
        rank: usize,
        tensors: BTreeMap<String, Tensor>,
    },
}

/// Single-file JSON checkpoint; round-trips bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    schema: u32,
    model: CheckpointModel,
    scaling: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    defense: Option<DefenseMeta>,
}

impl Checkpoint {
    pub fn new(forecaster: &Forecaster, defense: Option<DefenseMeta>) -> Self {
        let model = match &forecaster.params {
            ModelParams::LinearVar(p) => CheckpointModel::LinearVar {
                dims: p.dims,
                order: p.order,
                coeffs: p.coeffs.clone(),
                intercept: p.intercept.data().to_vec(),
                noise_raw: p.noise_raw.data().to_vec(),
            },
            ModelParams::Recurrent(p) => CheckpointModel::RecurrentLowrank {
                dims: p.dims,
                hidden: p.hidden,
                rank: p.rank,
                tensors: p.tensors.clone(),
            },
        };
        Self {
            schema: 1,
            model,
            scaling: forecaster.scaling.factors.clone(),
            defense,
        }
    }

    pub fn defense(&self) -> Option<&DefenseMeta> {
        self.defense.as_ref()
    }

    pub fn into_forecaster(self) -> Result<(Forecaster, Option<DefenseMeta>), ModelError> {
        if self.schema != 1 {
            return Err(ModelError::BadConfig(format!(
                "unsupported checkpoint schema {}",
                self.schema
            )));
        }
        let params = match self.model {
            CheckpointModel::LinearVar {
                dims,
                order,
                coeffs,
                intercept,
                noise_raw,
            } => ModelParams::LinearVar(LinearVarParams {
                dims,
                order,
                coeffs,
                intercept: Tensor::from_vec(intercept),
                noise_raw: Tensor::from_vec(noise_raw),
            }),
            CheckpointModel::RecurrentLowrank {
                dims,
                hidden,
                rank,
                tensors,
            } => ModelParams::Recurrent(RecurrentParams {
                dims,
                hidden,
                rank,
                tensors,
            }),
        };
        Ok((
            Forecaster {
                params,
                scaling: Scaling {
                    factors: self.scaling,
                },
            },
            self.defense,
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| ModelError::CheckpointIo(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| ModelError::CheckpointIo(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let json =
            std::fs::read_to_string(path).map_err(|e| ModelError::CheckpointIo(e.to_string()))?;
        serde_json::from_str(&json).map_err(|e| ModelError::CheckpointIo(e.to_string()))
    }
}

/// Inverse of `softplus` for strictly positive inputs.
pub(crate) fn softplus_inv(y: f64) -> f64 {
    let y = y.max(1e-12);
    if y > 20.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, make_windows, GeneratorKind, SyntheticSpec};

    fn toy_windows() -> Vec<Window> {
        let a = Tensor::from_rows(&[vec![0.5, 0.2], vec![0.0, 0.5]]).unwrap();
        let spec = SyntheticSpec {
            kind: GeneratorKind::Var1,
            coeffs: vec![a],
            intercept: Some(vec![1.0, 1.0]),
            noise_scale: 0.5,
            length: 400,
            seed: 9,
            initial: None,
            seasonal: None,
        };
        make_windows(&generate(&spec).unwrap(), 48, 12, 12).unwrap()
    }

    #[test]
    fn fit_rejects_empty_dataset() {
        assert!(matches!(
            fit(&[], &ModelConfig::linear_var()),
            Err(ModelError::EmptyDataset)
        ));
    }

    #[test]
    fn var_refit_recovers_coefficients() {
        let a = Tensor::from_rows(&[vec![0.5, 0.2], vec![0.0, 0.5]]).unwrap();
        let spec = SyntheticSpec {
            kind: GeneratorKind::Var1,
            coeffs: vec![a.clone()],
            intercept: None,
            noise_scale: 1.0,
            length: 5_000,
            seed: 21,
            initial: None,
            seasonal: None,
        };
        let ds = generate(&spec).unwrap();
        let windows = make_windows(&ds, 4_900, 50, 50).unwrap();
        let fc = fit(&windows, &ModelConfig::linear_var()).unwrap();
        let ModelParams::LinearVar(p) = &fc.params else {
            panic!("expected linear VAR");
        };
        // Coefficients live in scaled space; map back to data space:
        // A_data[i][k] = A_scaled[i][k] * nu_i / nu_k.
        let nu = &fc.scaling.factors;
        for i in 0..2 {
            for k in 0..2 {
                let a_data = p.coeffs[0].at2(i, k) * nu[i] / nu[k];
                assert!(
                    (a_data - a.at2(i, k)).abs() <= 0.1,
                    "A[{i}][{k}] = {a_data}, truth {}",
                    a.at2(i, k)
                );
            }
        }
    }

    #[test]
    fn sample_paths_deterministic_and_zero_noise_mean() {
        let windows = toy_windows();
        let fc = fit(&windows, &ModelConfig::linear_var()).unwrap();
        let w = windows.last().unwrap();
        let s1 = fc.sample_paths(&w.x, 12, 16, 42).unwrap();
        let s2 = fc.sample_paths(&w.x, 12, 16, 42).unwrap();
        assert_eq!(s1.paths, s2.paths);

        let noise = NoiseBundle::zeros(3, fc.dims(), 0, 12);
        let s0 = fc.sample_paths_with_noise(&w.x, &noise, 0).unwrap();
        for h in 0..12 {
            let m = fc.predictive_mean_closed_form(&w.x, h + 1).unwrap();
            for i in 0..2 {
                for j in 0..3 {
                    assert!(
                        (s0.paths.at3(j, i, h) - m.data()[i]).abs() < 1e-10,
                        "path {j} step {h} dim {i}"
                    );
                }
            }
        }
    }

    #[test]
    fn closed_form_mean_examples() {
        let p = LinearVarParams {
            dims: 2,
            order: 1,
            coeffs: vec![Tensor::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap()],
            intercept: Tensor::from_vec(vec![0.0, 0.0]),
            noise_raw: Tensor::from_vec(vec![softplus_inv(1.0); 2]),
        };
        let fc = Forecaster {
            params: ModelParams::LinearVar(p),
            scaling: Scaling::identity(2),
        };
        let x = Tensor::from_rows(&[vec![0.3, 1.0], vec![0.9, 1.0]]).unwrap();
        let m = fc.predictive_mean_closed_form(&x, 2).unwrap();
        assert!((m.data()[0] - 0.25).abs() < 1e-14);
        assert!((m.data()[1] - 0.25).abs() < 1e-14);

        let ident = Forecaster {
            params: ModelParams::LinearVar(LinearVarParams {
                dims: 2,
                order: 1,
                coeffs: vec![Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()],
                intercept: Tensor::from_vec(vec![0.0, 0.0]),
                noise_raw: Tensor::from_vec(vec![softplus_inv(1.0); 2]),
            }),
            scaling: Scaling::identity(2),
        };
        for h in 1..5 {
            let m = ident.predictive_mean_closed_form(&x, h).unwrap();
            assert_eq!(m.data(), &[1.0, 1.0]);
        }
        assert!(matches!(
            ident.predictive_mean_closed_form(&x, 0),
            Err(ModelError::BadConfig(_))
        ));
    }

    #[test]
    fn multi_step_sampling_mean_matches_closed_form() {
        let windows = toy_windows();
        let fc = fit(&windows, &ModelConfig::linear_var()).unwrap();
        let w = windows.last().unwrap();
        let n = 100_000;
        for horizon in [2usize, 3] {
            let samples = fc.sample_paths(&w.x, horizon, n, 77).unwrap();
            let mean = samples.mean();
            let expect = fc.predictive_mean_closed_form(&w.x, horizon).unwrap();
            let h = horizon - 1;
            for i in 0..2 {
                let mut var = 0.0;
                for j in 0..n {
                    let d = samples.paths.at3(j, i, h) - mean.at2(i, h);
                    var += d * d;
                }
                var /= (n - 1) as f64;
                let se = (var / n as f64).sqrt();
                assert!(
                    (mean.at2(i, h) - expect.data()[i]).abs() <= 3.0 * se,
                    "h={horizon} dim {i}: {} vs {} (se {se})",
                    mean.at2(i, h),
                    expect.data()[i]
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let windows = toy_windows();
        let fc = fit(&windows, &ModelConfig::linear_var()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        Checkpoint::new(&fc, Some(DefenseMeta::Augmentation { sigma: 0.1 }))
            .save(&path)
            .unwrap();
        let (back, defense) = Checkpoint::load(&path).unwrap().into_forecaster().unwrap();
        assert_eq!(fc, back);
        assert_eq!(defense, Some(DefenseMeta::Augmentation { sigma: 0.1 }));
    }
}
