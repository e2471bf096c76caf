//! Experiment runner: trains models, runs attack sweeps over sparsity
//! levels under each defense, and aggregates metrics into result tables.

pub mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{
    deterministic_attack, expected_sparsity, probabilistic_attack_train,
    sample_attack_perturbation, AttackError, AttackSpec, Perturbation, RowRanking,
    SparseTrainConfig, Statistic,
};
use crate::data::{
    generate, load_csv, make_windows, split_windows, DataError, Dataset, SyntheticSpec, Window,
};
use crate::defenses::{
    augmented_fit, minimax_train, smoothed_sample_paths, DefenseError, MinimaxConfig,
    SmoothingConfig,
};
use crate::derive_seed;
use crate::diff::Tensor;
use crate::metrics::{
    avg_wql, avg_wql_scoped, empirical_quantiles, target_scope, wape_wse, MetricError, Stat,
    ALPHA_GRID,
};
use crate::models::{fit, Forecaster, ModelConfig, ModelError, PredictiveSamples};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Defense(#[from] DefenseError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Diff(#[from] crate::diff::DiffError),
    #[error("invalid experiment config: {0}")]
    BadConfig(String),
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetSource {
    Csv { path: String },
    Synthetic { spec: SyntheticSpec },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefenseKind {
    None,
    Augmentation,
    Smoothing,
    Minimax,
}

impl DefenseKind {
    pub fn label(&self) -> &'static str {
        match self {
            DefenseKind::None => "no defense",
            DefenseKind::Augmentation => "data augmentation",
            DefenseKind::Smoothing => "randomized smoothing",
            DefenseKind::Minimax => "mini-max defense",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Deterministic,
    Probabilistic,
}

/// Attack settings shared by every sweep cell; the sparsity `k` is filled
/// in per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTemplate {
    pub kind: AttackKind,
    pub targets: Vec<usize>,
    /// 1-based horizon offsets.
    pub horizons: Vec<usize>,
    pub budget: f64,
    /// Adversarial target scales; the per-window worst case over these is
    /// reported.
    pub target_scales: Vec<f64>,
    pub iterations: usize,
    #[serde(default)]
    pub step_size: Option<f64>,
    pub n_grad: usize,
    #[serde(default)]
    pub row_ranking: RowRanking,
    #[serde(default)]
    pub statistic: Statistic,
    /// Sparse-layer training settings for the probabilistic attack.
    #[serde(default)]
    pub sparse_train: Option<SparseTrainConfig>,
}

impl AttackTemplate {
    pub fn spec_for(&self, sparsity: usize, target_scale: f64) -> AttackSpec {
        AttackSpec {
            targets: self.targets.clone(),
            horizons: self.horizons.clone(),
            sparsity,
            budget: self.budget,
            target_scale,
            iterations: self.iterations,
            step_size: self.step_size,
            n_grad: self.n_grad,
            row_ranking: self.row_ranking,
            statistic: self.statistic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseParams {
    /// Relative noise level shared by augmentation and smoothing.
    pub sigma: f64,
    /// Paths drawn by the smoothed forecaster.
    pub smoothing_paths: usize,
    pub minimax: MinimaxConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    /// History length T.
    pub history: usize,
    /// Forecast horizon tau.
    pub horizon: usize,
    /// Window stride; defaults to the horizon.
    #[serde(default)]
    pub stride: Option<usize>,
    pub eval_windows: usize,
    pub attack: AttackTemplate,
    /// Sparsity sweep values.
    pub sweep: Vec<usize>,
    /// Add the k = d - |targets| row.
    #[serde(default)]
    pub include_full_attack: bool,
    pub defenses: Vec<DefenseKind>,
    pub defense_params: DefenseParams,
    /// Paths per evaluation (quantile estimation).
    pub eval_paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.schema != 1 {
            return Err(HarnessError::BadConfig(format!(
                "unsupported config schema {}",
                self.schema
            )));
        }
        if self.sweep.is_empty() && !self.include_full_attack {
            return Err(HarnessError::BadConfig("empty sparsity sweep".into()));
        }
        if self.eval_windows == 0 {
            return Err(HarnessError::BadConfig(
                "need at least one evaluation window".into(),
            ));
        }
        if self.defenses.is_empty() {
            return Err(HarnessError::BadConfig("no defenses selected".into()));
        }
        if self.eval_paths < 2 {
            return Err(HarnessError::BadConfig(
                "need at least two evaluation paths".into(),
            ));
        }
        if self.attack.target_scales.is_empty() {
            return Err(HarnessError::BadConfig("no target scales".into()));
        }
        Ok(())
    }

    fn validate_dims(&self, d: usize) -> Result<(), HarnessError> {
        let max_k = d - self.attack.targets.len();
        for &k in &self.sweep {
            if k == 0 || k > max_k {
                return Err(HarnessError::BadConfig(format!(
                    "sweep sparsity {k} outside 1..={max_k}"
                )));
            }
        }
        Ok(())
    }

    /// Effective output directory: the environment override wins over the
    /// config value.
    pub fn effective_out_dir(&self) -> Option<String> {
        std::env::var("TSADV_OUT_DIR")
            .ok()
            .or_else(|| self.out_dir.clone())
    }
}

/// Table rows: the clean baseline, each sweep sparsity, and optionally the
/// maximal-sparsity "full attack".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    NoAttack,
    Sparsity(usize),
    FullAttack(usize),
}

impl RowKind {
    pub fn label(&self) -> String {
        match self {
            RowKind::NoAttack => "no attack".into(),
            RowKind::Sparsity(k) => k.to_string(),
            RowKind::FullAttack(_) => "full attack".into(),
        }
    }

    fn sparsity(&self) -> Option<usize> {
        match self {
            RowKind::NoAttack => None,
            RowKind::Sparsity(k) | RowKind::FullAttack(k) => Some(*k),
        }
    }
}

/// Aggregated cell: mean +- std of the metrics across evaluation windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    /// Average wQL over the full prediction grid.
    pub avg_wql: Stat,
    /// Average wQL restricted to the attacked (item, horizon) cells.
    pub avg_wql_target: Stat,
    pub wape: Stat,
    pub wse: Stat,
    pub n_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub key: String,
    /// One entry per defense column; `None` when the cell failed.
    pub cells: Vec<Option<CellStats>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDiagnostic {
    pub row: String,
    pub column: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub schema: u32,
    pub seed: u64,
    pub dims: usize,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
    pub diagnostics: Vec<CellDiagnostic>,
}

impl ResultTable {
    pub fn cell(&self, row_key: &str, column: &str) -> Option<&CellStats> {
        let ci = self.columns.iter().position(|c| c == column)?;
        self.rows
            .iter()
            .find(|r| r.key == row_key)
            .and_then(|r| r.cells[ci].as_ref())
    }

    pub fn completed(&self) -> bool {
        self.diagnostics.is_empty()
            && self
                .rows
                .iter()
                .all(|r| r.cells.iter().all(Option::is_some))
    }
}

/// One defense arm: its trained model and how to sample from it at
/// inference time.
struct Arm {
    kind: DefenseKind,
    forecaster: Forecaster,
}

impl Arm {
    fn infer(
        &self,
        x: &Tensor,
        horizon: usize,
        n_paths: usize,
        sigma: f64,
        seed: u64,
    ) -> Result<PredictiveSamples, HarnessError> {
        match self.kind {
            DefenseKind::Smoothing => Ok(smoothed_sample_paths(
                &self.forecaster,
                x,
                horizon,
                &SmoothingConfig {
                    sigma,
                    n_paths,
                    seed,
                },
            )?),
            _ => Ok(self.forecaster.sample_paths(x, horizon, n_paths, seed)?),
        }
    }
}

pub fn load_dataset(source: &DatasetSource) -> Result<Dataset, HarnessError> {
    match source {
        DatasetSource::Csv { path } => Ok(load_csv(path)?),
        DatasetSource::Synthetic { spec } => Ok(generate(spec)?),
    }
}

/// Train the model an arm evaluates: plain fit, augmented fit (also the
/// smoothing base model, per the shared-noise-level protocol), or mini-max
/// adversarial training.
fn train_arm(
    kind: DefenseKind,
    train: &[Window],
    config: &ExperimentConfig,
    augmented_cache: &mut Option<Forecaster>,
) -> Result<Forecaster, HarnessError> {
    let seed = config.seed;
    match kind {
        DefenseKind::None => Ok(fit(train, &config.model)?),
        DefenseKind::Augmentation | DefenseKind::Smoothing => {
            if augmented_cache.is_none() {
                *augmented_cache = Some(augmented_fit(
                    train,
                    &config.model,
                    config.defense_params.sigma,
                    derive_seed(seed, &[100]),
                )?);
            }
            Ok(augmented_cache.clone().expect("just cached"))
        }
        DefenseKind::Minimax => {
            let mut mcfg = config.defense_params.minimax.clone();
            mcfg.seed = derive_seed(seed, &[101]);
            Ok(minimax_train(train, &config.model, &mcfg)?)
        }
    }
}

/// Run the full sweep: every defense column against every table row, one
/// independent attack per evaluation window and target scale, worst case
/// over target scales. Fully seeded; reruns are byte-identical.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultTable, HarnessError> {
    config.validate()?;
    let dataset = load_dataset(&config.dataset)?;
    let d = dataset.dims();
    config.validate_dims(d)?;
    let stride = config.stride.unwrap_or(config.horizon);
    let windows = make_windows(&dataset, config.history, config.horizon, stride)?;
    let (train, eval) = split_windows(windows, config.eval_windows);
    if train.is_empty() {
        return Err(HarnessError::BadConfig(
            "no training windows left after the evaluation split".into(),
        ));
    }
    if eval.len() < config.eval_windows {
        return Err(HarnessError::BadConfig(format!(
            "only {} evaluation windows available, config asks for {}",
            eval.len(),
            config.eval_windows
        )));
    }

    let mut rows: Vec<RowKind> = vec![RowKind::NoAttack];
    rows.extend(config.sweep.iter().map(|&k| RowKind::Sparsity(k)));
    if config.include_full_attack {
        rows.push(RowKind::FullAttack(d - config.attack.targets.len()));
    }

    let mut augmented_cache = None;
    let mut arms = Vec::with_capacity(config.defenses.len());
    for &kind in &config.defenses {
        let forecaster = train_arm(kind, &train, config, &mut augmented_cache)?;
        arms.push(Arm { kind, forecaster });
    }

    let mut table = ResultTable {
        schema: 1,
        seed: config.seed,
        dims: d,
        columns: arms.iter().map(|a| a.kind.label().to_string()).collect(),
        rows: rows
            .iter()
            .map(|r| TableRow {
                key: r.label(),
                cells: vec![None; arms.len()],
            })
            .collect(),
        diagnostics: Vec::new(),
    };

    for (ci, arm) in arms.iter().enumerate() {
        // the seed chains below omit the column index: attacks and
        // evaluation noise pair up across defense arms
        for (ri, row) in rows.iter().enumerate() {
            match compute_cell(arm, *row, &eval, config) {
                Ok(stats) => table.rows[ri].cells[ci] = Some(stats),
                Err(err) => table.diagnostics.push(CellDiagnostic {
                    row: row.label(),
                    column: arm.kind.label().to_string(),
                    error: err.to_string(),
                }),
            }
        }
    }
    Ok(table)
}

struct WindowMetrics {
    avg_full: f64,
    avg_target: f64,
    wape: f64,
    wse: f64,
}

fn evaluate_samples(
    window: &Window,
    samples: &PredictiveSamples,
    template: &AttackTemplate,
) -> Result<WindowMetrics, HarnessError> {
    let qf = empirical_quantiles(samples, &ALPHA_GRID)?;
    let avg_full = avg_wql(&window.y_true, &qf)?;
    let scope = target_scope(&template.targets, &template.horizons);
    let avg_target = avg_wql_scoped(&window.y_true, &qf, &scope)?;
    let (wape, wse) = wape_wse(
        &window.y_true,
        samples,
        &template.targets,
        &template.horizons,
    )?;
    Ok(WindowMetrics {
        avg_full,
        avg_target,
        wape,
        wse,
    })
}

/// Build the perturbation for one (window, spec) pair under the configured
/// attack kind, and assert its invariants at evaluation time.
fn attack_window(
    arm: &Arm,
    window: &Window,
    spec: &AttackSpec,
    template: &AttackTemplate,
    seed: u64,
) -> Result<Perturbation, HarnessError> {
    let perturbation = match template.kind {
        AttackKind::Deterministic => {
            let p = deterministic_attack(&arm.forecaster, window, spec, seed)?;
            p.validate_hard()?;
            p
        }
        AttackKind::Probabilistic => {
            let train_cfg = template.sparse_train.clone().unwrap_or_default();
            let layer = probabilistic_attack_train(
                &arm.forecaster,
                window,
                spec,
                &train_cfg,
                derive_seed(seed, &[0]),
            )?;
            let bound = expected_sparsity(&layer.gate_weights, spec.sparsity)?;
            if bound > spec.sparsity as f64 + 1e-9 {
                return Err(HarnessError::BadConfig(format!(
                    "expected sparsity {bound} exceeds k = {}",
                    spec.sparsity
                )));
            }
            let p = sample_attack_perturbation(
                &layer,
                spec,
                &window.x,
                window.start,
                derive_seed(seed, &[1]),
            )?;
            p.validate_budget_and_targets()?;
            p
        }
    };
    Ok(perturbation)
}

fn compute_cell(
    arm: &Arm,
    row: RowKind,
    eval: &[Window],
    config: &ExperimentConfig,
) -> Result<CellStats, HarnessError> {
    let template = &config.attack;
    let sigma = config.defense_params.sigma;
    let tau = config.horizon;
    let row_tag = row.sparsity().map_or(u64::MAX, |k| k as u64);

    let mut avg_full = Vec::with_capacity(eval.len());
    let mut avg_target = Vec::with_capacity(eval.len());
    let mut wape = Vec::with_capacity(eval.len());
    let mut wse = Vec::with_capacity(eval.len());

    for (widx, window) in eval.iter().enumerate() {
        let metrics = match row {
            RowKind::NoAttack => {
                let seed = derive_seed(config.seed, &[row_tag, widx as u64, 0, 1]);
                let samples = arm.infer(&window.x, tau, config.eval_paths, sigma, seed)?;
                evaluate_samples(window, &samples, template)?
            }
            RowKind::Sparsity(k) | RowKind::FullAttack(k) => {
                // worst case over the adversarial target scales
                let mut worst: Option<WindowMetrics> = None;
                for (si, &scale) in template.target_scales.iter().enumerate() {
                    let spec = template.spec_for(k, scale);
                    spec.validate(window.dims(), window.horizon())
                        .map_err(HarnessError::Attack)?;
                    let attack_seed =
                        derive_seed(config.seed, &[row_tag, widx as u64, si as u64, 0]);
                    let perturbation = attack_window(arm, window, &spec, template, attack_seed)?;
                    let perturbed = window
                        .x
                        .zip_map(&perturbation.delta, |x, dl| x * (1.0 + dl))?;
                    let eval_seed = derive_seed(config.seed, &[row_tag, widx as u64, si as u64, 1]);
                    let samples =
                        arm.infer(&perturbed, tau, config.eval_paths, sigma, eval_seed)?;
                    let m = evaluate_samples(window, &samples, template)?;
                    worst = Some(match worst {
                        None => m,
                        Some(w) => WindowMetrics {
                            avg_full: w.avg_full.max(m.avg_full),
                            avg_target: w.avg_target.max(m.avg_target),
                            wape: w.wape.max(m.wape),
                            wse: w.wse.max(m.wse),
                        },
                    });
                }
                worst.expect("at least one target scale")
            }
        };
        avg_full.push(metrics.avg_full);
        avg_target.push(metrics.avg_target);
        wape.push(metrics.wape);
        wse.push(metrics.wse);
    }

    Ok(CellStats {
        avg_wql: Stat::from_values(&avg_full),
        avg_wql_target: Stat::from_values(&avg_target),
        wape: Stat::from_values(&wape),
        wse: Stat::from_values(&wse),
        n_windows: eval.len(),
    })
}

/// The seeded synthetic coupled-VAR benchmark: ten items around level 10
/// with slow mean reversion. The target item belongs to a strongly mixed
/// four-series core, with six peripheral items that read the core and feed
/// weakly back, so each core neighbor carries real influence over the
/// target's long-horizon forecast and indirect attacks have signal to
/// exploit at every sparsity level.
pub fn synthetic_benchmark_config(seed: u64) -> ExperimentConfig {
    let d = 10;
    let core = 4;
    let history = 96;
    let horizon = 24;
    let n_windows = 50;
    let length = history + horizon + horizon * (n_windows - 1);

    // row-stochastic mixing scaled to spectral radius 0.98
    let mut a = Tensor::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..d {
            let s = match (i < core, j < core) {
                (true, true) => {
                    if i == j {
                        0.55
                    } else {
                        0.39 / (core - 1) as f64
                    }
                }
                (true, false) => 0.06 / (d - core) as f64,
                (false, true) => 0.40 / core as f64,
                (false, false) => {
                    if i == j {
                        0.60
                    } else {
                        0.0
                    }
                }
            };
            a.set2(i, j, 0.98 * s);
        }
    }
    // stationary mean 10 per item: intercept = (I - A) * mean
    let intercept = vec![10.0 * (1.0 - 0.98); d];

    ExperimentConfig {
        schema: 1,
        dataset: DatasetSource::Synthetic {
            spec: SyntheticSpec {
                kind: crate::data::GeneratorKind::Var1,
                coeffs: vec![a],
                intercept: Some(intercept),
                noise_scale: 0.3,
                length,
                seed: derive_seed(seed, &[42]),
                initial: Some(vec![10.0; d]),
                seasonal: None,
            },
        },
        model: ModelConfig::LinearVar { order: 1 },
        history,
        horizon,
        stride: None,
        eval_windows: 20,
        attack: AttackTemplate {
            kind: AttackKind::Deterministic,
            targets: vec![0],
            horizons: vec![horizon],
            budget: 0.5,
            target_scales: vec![0.5, 2.0],
            iterations: 200,
            step_size: None,
            n_grad: 32,
            row_ranking: RowRanking::L2Squared,
            statistic: Statistic::PointValues,
            sparse_train: Some(SparseTrainConfig::default()),
        },
        sweep: vec![1, 3, 5, 7, 9],
        include_full_attack: false,
        defenses: vec![
            DefenseKind::None,
            DefenseKind::Augmentation,
            DefenseKind::Smoothing,
            DefenseKind::Minimax,
        ],
        defense_params: DefenseParams {
            sigma: 0.1,
            smoothing_paths: 100,
            minimax: MinimaxConfig {
                sparsity: 5,
                epochs: 30,
                attacker_steps: 2,
                model_steps: 8,
                attacker_lr: 0.05,
                model_lr: 0.05,
                draws: 8,
                n_inner: 8,
                temperature: 0.1,
                perturb_clip: 1.0,
                seed: 0,
                disable_perturbation: false,
            },
        },
        eval_paths: 100,
        seed,
        out_dir: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GeneratorKind;

    pub(super) fn tiny_config(seed: u64) -> ExperimentConfig {
        let d = 3;
        let a = Tensor::from_fn(&[d, d], |idx| {
            let (i, j) = (idx / d, idx % d);
            if i == j {
                0.9 * 0.6
            } else {
                0.9 * 0.4 / 2.0
            }
        });
        ExperimentConfig {
            schema: 1,
            dataset: DatasetSource::Synthetic {
                spec: SyntheticSpec {
                    kind: GeneratorKind::Var1,
                    coeffs: vec![a],
                    intercept: Some(vec![1.0; d]),
                    noise_scale: 0.2,
                    length: 24 + 6 * 12,
                    seed: derive_seed(seed, &[42]),
                    initial: Some(vec![10.0; d]),
                    seasonal: None,
                },
            },
            model: ModelConfig::LinearVar { order: 1 },
            history: 24,
            horizon: 6,
            stride: None,
            eval_windows: 3,
            attack: AttackTemplate {
                kind: AttackKind::Deterministic,
                targets: vec![0],
                horizons: vec![6],
                budget: 0.5,
                target_scales: vec![0.5, 2.0],
                iterations: 10,
                step_size: None,
                n_grad: 8,
                row_ranking: RowRanking::L2Squared,
                statistic: Statistic::PointValues,
                sparse_train: None,
            },
            sweep: vec![1, 2],
            include_full_attack: false,
            defenses: vec![DefenseKind::None],
            defense_params: DefenseParams {
                sigma: 0.1,
                smoothing_paths: 20,
                minimax: MinimaxConfig {
                    sparsity: 1,
                    epochs: 2,
                    attacker_steps: 1,
                    model_steps: 2,
                    attacker_lr: 0.05,
                    model_lr: 0.05,
                    draws: 2,
                    n_inner: 2,
                    temperature: 0.1,
                    perturb_clip: 1.0,
                    seed: 0,
                    disable_perturbation: false,
                },
            },
            eval_paths: 50,
            seed,
            out_dir: None,
        }
    }

    #[test]
    fn shipped_benchmark_config_matches_constructor() {
        let path = concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../configs/synthetic_benchmark.json"
        );
        let text = std::fs::read_to_string(path).expect("shipped config present");
        let parsed: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, synthetic_benchmark_config(2024));
    }

    #[test]
    fn sweep_enumerates_rows_and_is_deterministic() {
        let cfg = tiny_config(5);
        let t1 = run_experiment(&cfg).unwrap();
        assert!(t1.completed());
        assert_eq!(t1.columns, vec!["no defense".to_string()]);
        let keys: Vec<&str> = t1.rows.iter().map(|r| r.key.as_str()).collect();
        assert_eq!(keys, vec!["no attack", "1", "2"]);

        let t2 = run_experiment(&cfg).unwrap();
        assert_eq!(report::table_to_json(&t1), report::table_to_json(&t2));

        // full-attack row appears when asked for
        let mut cfg = tiny_config(5);
        cfg.include_full_attack = true;
        let t3 = run_experiment(&cfg).unwrap();
        assert_eq!(t3.rows.last().unwrap().key, "full attack");
    }

    /// The "no attack" row is exactly the direct evaluation of the clean
    /// model under the same derived seeds.
    #[test]
    fn no_attack_row_cross_check() {
        let cfg = tiny_config(9);
        let table = run_experiment(&cfg).unwrap();
        let cell = table.cell("no attack", "no defense").unwrap();

        let dataset = load_dataset(&cfg.dataset).unwrap();
        let windows = make_windows(&dataset, cfg.history, cfg.horizon, cfg.horizon).unwrap();
        let (train, eval) = split_windows(windows, cfg.eval_windows);
        let fc = fit(&train, &cfg.model).unwrap();
        let mut values = Vec::new();
        for (widx, w) in eval.iter().enumerate() {
            let seed = derive_seed(cfg.seed, &[u64::MAX, widx as u64, 0, 1]);
            let samples = fc
                .sample_paths(&w.x, cfg.horizon, cfg.eval_paths, seed)
                .unwrap();
            let qf = empirical_quantiles(&samples, &ALPHA_GRID).unwrap();
            values.push(avg_wql(&w.y_true, &qf).unwrap());
        }
        let direct = Stat::from_values(&values);
        assert_eq!(cell.avg_wql, direct);
    }

    /// A dataset whose target item is identically zero breaks the scoped
    /// metrics; the cell is recorded as a diagnostic, the run continues.
    #[test]
    fn failed_cells_become_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zeros.csv");
        let mut rows = String::from("timestamp,a,b,c\n");
        for t in 0..96 {
            rows.push_str(&format!("t{t},0.0,{},{}\n", 5.0 + (t % 3) as f64, 6.0));
        }
        std::fs::write(&path, rows).unwrap();

        let mut cfg = tiny_config(3);
        cfg.dataset = DatasetSource::Csv {
            path: path.display().to_string(),
        };
        cfg.history = 24;
        cfg.horizon = 6;
        cfg.eval_windows = 2;
        cfg.sweep = vec![1];
        let table = run_experiment(&cfg).unwrap();
        assert!(!table.completed());
        assert_eq!(table.diagnostics.len(), 2); // both rows fail on item 0
        assert!(table.diagnostics[0].error.contains("zero"));
    }
}
