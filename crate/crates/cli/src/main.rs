//! `tsadv`: train forecasters, attack them, defend them, and reproduce the
//! sparsity-sweep tables. Every subcommand takes `--config <json>` and
//! `--seed <u64>`; the seed overrides the config's seed so reruns are
//! reproducible from the command line alone.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use tsadv::attacks::{
    deterministic_attack, expected_sparsity, probabilistic_attack_train,
    sample_attack_perturbation, Perturbation,
};
use tsadv::data::{make_windows, split_windows, Window};
use tsadv::defenses::{
    augmented_fit, minimax_train, smoothed_sample_paths, MinimaxConfig, SmoothingConfig,
};
use tsadv::derive_seed;
use tsadv::harness::report::{table_from_json, write_reports};
use tsadv::harness::{
    load_dataset, run_experiment, AttackKind, AttackTemplate, DatasetSource, ExperimentConfig,
};
use tsadv::metrics::{
    avg_wql_scoped, empirical_quantiles, full_scope, target_scope, wape_wse, MetricsReport,
    ScopeSpec, Stat, ALPHA_GRID,
};
use tsadv::models::{fit, Checkpoint, DefenseMeta, ModelConfig, PredictiveSamples};

#[derive(Parser)]
#[command(
    name = "tsadv",
    about = "sparse indirect attacks on probabilistic forecasters",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a forecaster and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Train a defended forecaster (augmentation, smoothing base, or
    /// mini-max) and write a checkpoint with defense metadata.
    Defend {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Attack each evaluation window of a dataset against a checkpoint and
    /// write the perturbations as JSON.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Evaluate a checkpoint (optionally under stored perturbations) and
    /// write a metrics report.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Run the full sparsity sweep across defenses and write the result
    /// table plus report files.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Re-emit report files (CSV/TSV/JSON) from a stored result table.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, seed } => train(&config, seed),
        Command::Defend { config, seed } => defend(&config, seed),
        Command::Attack { config, seed } => attack(&config, seed),
        Command::Evaluate { config, seed } => evaluate(&config, seed),
        Command::Sweep { config, seed } => sweep(&config, seed),
        Command::Report { config, seed } => report(&config, seed),
    }
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn check_schema(schema: u32) -> Result<()> {
    if schema != 1 {
        bail!("unsupported config schema {schema}, expected 1");
    }
    Ok(())
}

/// Windows for a dataset: training windows exclude the held-out tail.
fn windows_for(
    dataset: &DatasetSource,
    history: usize,
    horizon: usize,
    stride: Option<usize>,
    holdout: usize,
) -> Result<(Vec<Window>, Vec<Window>)> {
    let ds = load_dataset(dataset)?;
    let windows = make_windows(&ds, history, horizon, stride.unwrap_or(horizon))?;
    Ok(split_windows(windows, holdout))
}

#[derive(Deserialize)]
struct TrainConfig {
    schema: u32,
    dataset: DatasetSource,
    model: ModelConfig,
    history: usize,
    horizon: usize,
    #[serde(default)]
    stride: Option<usize>,
    /// Windows held out from training (the backtest tail).
    #[serde(default)]
    holdout_windows: usize,
    out: PathBuf,
}

fn train(path: &Path, _seed: u64) -> Result<()> {
    let cfg: TrainConfig = read_config(path)?;
    check_schema(cfg.schema)?;
    let (train, _) = windows_for(
        &cfg.dataset,
        cfg.history,
        cfg.horizon,
        cfg.stride,
        cfg.holdout_windows,
    )?;
    let forecaster = fit(&train, &cfg.model)?;
    Checkpoint::new(&forecaster, None).save(&cfg.out)?;
    println!("wrote checkpoint {}", cfg.out.display());
    Ok(())
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum DefendKind {
    Augmentation { sigma: f64 },
    Smoothing { sigma: f64, n_paths: usize },
    Minimax { config: MinimaxConfig },
}

#[derive(Deserialize)]
struct DefendConfig {
    schema: u32,
    dataset: DatasetSource,
    model: ModelConfig,
    history: usize,
    horizon: usize,
    #[serde(default)]
    stride: Option<usize>,
    #[serde(default)]
    holdout_windows: usize,
    defense: DefendKind,
    out: PathBuf,
}

fn defend(path: &Path, seed: u64) -> Result<()> {
    let cfg: DefendConfig = read_config(path)?;
    check_schema(cfg.schema)?;
    let (train, _) = windows_for(
        &cfg.dataset,
        cfg.history,
        cfg.horizon,
        cfg.stride,
        cfg.holdout_windows,
    )?;
    let (forecaster, meta) = match cfg.defense {
        DefendKind::Augmentation { sigma } => (
            augmented_fit(&train, &cfg.model, sigma, derive_seed(seed, &[100]))?,
            DefenseMeta::Augmentation { sigma },
        ),
        DefendKind::Smoothing { sigma, n_paths } => (
            // smoothing runs on a base model trained with the same noise
            augmented_fit(&train, &cfg.model, sigma, derive_seed(seed, &[100]))?,
            DefenseMeta::Smoothing { sigma, n_paths },
        ),
        DefendKind::Minimax { mut config } => {
            config.seed = derive_seed(seed, &[101]);
            let fc = minimax_train(&train, &cfg.model, &config)?;
            (fc, DefenseMeta::Minimax { config })
        }
    };
    Checkpoint::new(&forecaster, Some(meta)).save(&cfg.out)?;
    println!("wrote defended checkpoint {}", cfg.out.display());
    Ok(())
}

#[derive(Deserialize)]
struct AttackConfig {
    schema: u32,
    dataset: DatasetSource,
    checkpoint: PathBuf,
    history: usize,
    horizon: usize,
    #[serde(default)]
    stride: Option<usize>,
    eval_windows: usize,
    attack: AttackTemplate,
    sparsity: usize,
    /// Index into the template's target scales; attacks every scale when
    /// omitted and keeps them all in the output.
    #[serde(default)]
    target_scale_index: Option<usize>,
    out: PathBuf,
}

fn attack(path: &Path, seed: u64) -> Result<()> {
    let cfg: AttackConfig = read_config(path)?;
    check_schema(cfg.schema)?;
    let (forecaster, _) = Checkpoint::load(&cfg.checkpoint)?.into_forecaster()?;
    let (_, eval) = windows_for(
        &cfg.dataset,
        cfg.history,
        cfg.horizon,
        cfg.stride,
        cfg.eval_windows,
    )?;
    let scales: Vec<(usize, f64)> = match cfg.target_scale_index {
        Some(i) => vec![(i, cfg.attack.target_scales[i])],
        None => cfg
            .attack
            .target_scales
            .iter()
            .copied()
            .enumerate()
            .collect(),
    };
    let mut perturbations: Vec<Perturbation> = Vec::new();
    for (widx, window) in eval.iter().enumerate() {
        for &(si, scale) in &scales {
            let spec = cfg.attack.spec_for(cfg.sparsity, scale);
            let attack_seed = derive_seed(seed, &[widx as u64, si as u64]);
            let p = match cfg.attack.kind {
                AttackKind::Deterministic => {
                    let p = deterministic_attack(&forecaster, window, &spec, attack_seed)?;
                    p.validate_hard()?;
                    p
                }
                AttackKind::Probabilistic => {
                    let layer = probabilistic_attack_train(
                        &forecaster,
                        window,
                        &spec,
                        &cfg.attack.sparse_train.clone().unwrap_or_default(),
                        derive_seed(attack_seed, &[0]),
                    )?;
                    let bound = expected_sparsity(&layer.gate_weights, spec.sparsity)?;
                    if bound > spec.sparsity as f64 + 1e-9 {
                        bail!("expected sparsity {bound} exceeds k = {}", spec.sparsity);
                    }
                    sample_attack_perturbation(
                        &layer,
                        &spec,
                        &window.x,
                        window.start,
                        derive_seed(attack_seed, &[1]),
                    )?
                }
            };
            perturbations.push(p);
        }
    }
    let json = serde_json::to_string_pretty(&perturbations)?;
    std::fs::write(&cfg.out, json)?;
    println!(
        "wrote {} perturbations to {}",
        perturbations.len(),
        cfg.out.display()
    );
    Ok(())
}

#[derive(Deserialize)]
#[serde(tag = "scope", rename_all = "kebab-case")]
enum EvalScope {
    FullGrid,
    Targets {
        items: Vec<usize>,
        horizons: Vec<usize>,
    },
}

#[derive(Deserialize)]
struct EvaluateConfig {
    schema: u32,
    dataset: DatasetSource,
    checkpoint: PathBuf,
    history: usize,
    horizon: usize,
    #[serde(default)]
    stride: Option<usize>,
    eval_windows: usize,
    /// Stored perturbations to apply, keyed by window start index.
    #[serde(default)]
    perturbations: Option<PathBuf>,
    scope: EvalScope,
    eval_paths: usize,
    #[serde(default)]
    out: Option<PathBuf>,
}

fn evaluate(path: &Path, seed: u64) -> Result<()> {
    let cfg: EvaluateConfig = read_config(path)?;
    check_schema(cfg.schema)?;
    let (forecaster, defense) = Checkpoint::load(&cfg.checkpoint)?.into_forecaster()?;
    let (_, eval) = windows_for(
        &cfg.dataset,
        cfg.history,
        cfg.horizon,
        cfg.stride,
        cfg.eval_windows,
    )?;
    let stored: Vec<Perturbation> = match &cfg.perturbations {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => Vec::new(),
    };

    let infer = |x: &tsadv::Tensor, seed: u64| -> Result<PredictiveSamples> {
        match &defense {
            Some(DefenseMeta::Smoothing { sigma, n_paths }) => Ok(smoothed_sample_paths(
                &forecaster,
                x,
                cfg.horizon,
                &SmoothingConfig {
                    sigma: *sigma,
                    n_paths: (*n_paths).max(cfg.eval_paths),
                    seed,
                },
            )?),
            _ => Ok(forecaster.sample_paths(x, cfg.horizon, cfg.eval_paths, seed)?),
        }
    };

    let mut avg = Vec::new();
    let mut per_alpha: Vec<Vec<f64>> = vec![Vec::new(); ALPHA_GRID.len()];
    let mut wapes = Vec::new();
    let mut wses = Vec::new();
    for (widx, window) in eval.iter().enumerate() {
        let x = match stored.iter().find(|p| p.window == window.start) {
            Some(p) => {
                p.validate_budget_and_targets()?;
                window.x.zip_map(&p.delta, |xv, dl| xv * (1.0 + dl))?
            }
            None => window.x.clone(),
        };
        let samples = infer(&x, derive_seed(seed, &[widx as u64]))?;
        let qf = empirical_quantiles(&samples, &ALPHA_GRID)?;
        let (scope_cells, items, horizons) = match &cfg.scope {
            EvalScope::FullGrid => {
                let d = window.dims();
                let all: Vec<usize> = (0..d).collect();
                let hs: Vec<usize> = (1..=cfg.horizon).collect();
                (full_scope(d, cfg.horizon), all, hs)
            }
            EvalScope::Targets { items, horizons } => (
                target_scope(items, horizons),
                items.clone(),
                horizons.clone(),
            ),
        };
        avg.push(avg_wql_scoped(&window.y_true, &qf, &scope_cells)?);
        for (ai, &alpha) in ALPHA_GRID.iter().enumerate() {
            per_alpha[ai].push(tsadv::metrics::wql_scoped(
                &window.y_true,
                &qf,
                alpha,
                &scope_cells,
            )?);
        }
        let (wape, wse) = wape_wse(&window.y_true, &samples, &items, &horizons)?;
        wapes.push(wape);
        wses.push(wse);
    }

    let report = MetricsReport {
        scope: match &cfg.scope {
            EvalScope::FullGrid => ScopeSpec::FullGrid,
            EvalScope::Targets { items, horizons } => ScopeSpec::Targets {
                items: items.clone(),
                horizons: horizons.clone(),
            },
        },
        n_windows: eval.len(),
        avg_wql: Stat::from_values(&avg),
        per_alpha: ALPHA_GRID
            .iter()
            .zip(&per_alpha)
            .map(|(&a, vals)| (a, Stat::from_values(vals)))
            .collect(),
        wape: Stat::from_values(&wapes),
        wse: Stat::from_values(&wses),
    };
    let json = serde_json::to_string_pretty(&report)?;
    match &cfg.out {
        Some(out) => {
            std::fs::write(out, &json)?;
            println!("wrote metrics report {}", out.display());
        }
        None => println!("{json}"),
    }
    println!("{}", MetricsReport::csv_header());
    println!("{}", report.csv_row());
    Ok(())
}

fn sweep(path: &Path, seed: u64) -> Result<()> {
    let mut cfg: ExperimentConfig = read_config(path)?;
    cfg.seed = seed;
    let table = run_experiment(&cfg)?;
    let out_dir = cfg
        .effective_out_dir()
        .unwrap_or_else(|| "tsadv-out".to_string());
    let files = write_reports(&table, &out_dir, cfg.attack.targets.len())?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    for diag in &table.diagnostics {
        eprintln!(
            "cell failed: row `{}`, column `{}`: {}",
            diag.row, diag.column, diag.error
        );
    }
    if !table.completed() {
        bail!("{} table cell(s) failed", table.diagnostics.len());
    }
    Ok(())
}

#[derive(Deserialize)]
struct ReportConfig {
    schema: u32,
    table: PathBuf,
    out_dir: PathBuf,
    /// Number of attacked items (for the full-attack row's k in the TSV).
    #[serde(default = "one")]
    n_targets: usize,
}

fn one() -> usize {
    1
}

fn report(path: &Path, _seed: u64) -> Result<()> {
    let cfg: ReportConfig = read_config(path)?;
    check_schema(cfg.schema)?;
    let table = table_from_json(&std::fs::read_to_string(&cfg.table)?)?;
    let files = write_reports(&table, &cfg.out_dir, cfg.n_targets)?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
