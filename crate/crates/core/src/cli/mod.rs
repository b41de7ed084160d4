//! `koopql` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 insufficient
//! data, 4 policy failure, 5 numerical failure.

pub mod config;
pub mod pipeline;
pub mod report;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::datastore::{check_pe, Dataset};
use crate::embedding::GammaMethod;
use crate::error::{Error, ErrorClass, Result};
use crate::numerics::{spectral_radius, Matrix};
use crate::oracle::{observability_lag, optimal_gain};
use crate::qlearn::Policy;

use config::{Resolved, RunConfig};
use report::{EvaluationReport, OracleReport, ResultFile, SweepEntry, SweepReport, TimingMeta};

#[derive(Debug, Parser)]
#[command(name = "koopql", version, about = "Data-driven output-feedback Q-learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect a dataset and check persistence of excitation.
    Collect(Common),
    /// Build Gamma and run policy iteration on a dataset.
    Learn(Common),
    /// Compare a learned controller against the Riccati-optimal one.
    Evaluate(Common),
    /// Repeat collect/learn/evaluate over output-noise levels.
    NoiseSweep(Common),
    /// Print the model-based optimal gain, cost matrix and lag.
    Oracle(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Dataset file (read by learn, written by collect).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Result file (read by evaluate, written by learn).
    #[arg(long)]
    pub result: Option<PathBuf>,
}

pub fn exit_code(class: ErrorClass) -> i32 {
    match class {
        ErrorClass::Input => 2,
        ErrorClass::Data => 3,
        ErrorClass::Policy => 4,
        ErrorClass::Numerical => 5,
    }
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main_entry() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("KQL_LOG", "warn")).try_init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(e.class())
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Collect(c) => cmd_collect(c),
        Command::Learn(c) => cmd_learn(c),
        Command::Evaluate(c) => cmd_evaluate(c),
        Command::NoiseSweep(c) => cmd_noise_sweep(c),
        Command::Oracle(c) => cmd_oracle(c),
    }
}

fn prepare(args: &Common) -> Result<Resolved> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let resolved = cfg.resolve()?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("effective_config.toml"), resolved.effective_toml()?)?;
    log::info!("effective config:\n{}", resolved.effective_toml()?);
    Ok(resolved)
}

fn dataset_path(args: &Common) -> PathBuf {
    args.dataset.clone().unwrap_or_else(|| args.out.join("dataset.json"))
}

fn result_path(args: &Common) -> PathBuf {
    args.result.clone().unwrap_or_else(|| args.out.join("result.json"))
}

fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn cmd_collect(args: &Common) -> Result<()> {
    let cfg = prepare(args)?;
    let (dataset, pe) = pipeline::collect_checked(&cfg.plant, &cfg.collection, cfg.eta_bound, cfg.rank_tol)?;
    println!(
        "PE check: rank {} (required {}), nu {} (necessary {}), tolerance {:.3e}: {}",
        pe.rank,
        pe.required,
        dataset.len(),
        pe.required,
        pe.tolerance_used,
        if pe.is_pe { "persistently exciting" } else { "not persistently exciting" }
    );
    if pe.rank < pe.required {
        return Err(Error::RankDeficient {
            required: pe.required,
            achieved: pe.rank,
        });
    }
    if !pe.is_pe {
        log::warn!("Hankel rank exceeds m(l+1)+eta_bound; data are noisy or the embedding is inexact");
    }
    let path = dataset_path(args);
    dataset.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_or_collect(args: &Common, cfg: &Resolved) -> Result<Dataset> {
    match &args.dataset {
        Some(path) => Dataset::load(path),
        None => Ok(pipeline::collect_checked(&cfg.plant, &cfg.collection, cfg.eta_bound, cfg.rank_tol)?.0),
    }
}

fn cmd_learn(args: &Common) -> Result<()> {
    let cfg = prepare(args)?;
    let dataset = load_or_collect(args, &cfg)?;
    if dataset.input_dim() != cfg.plant.input_dim() || dataset.output_dim() != cfg.plant.output_dim() {
        return Err(Error::input("dataset dimensions do not match the configured plant"));
    }
    let pe = check_pe(&dataset, cfg.eta_bound, cfg.rank_tol)?;
    if pe.rank < pe.required {
        return Err(Error::RankDeficient {
            required: pe.required,
            achieved: pe.rank,
        });
    }
    let outcome = pipeline::learn(
        &dataset,
        cfg.eta_bound,
        cfg.gamma_method,
        &cfg.cost,
        cfg.k0.as_ref(),
        &cfg.learn,
        cfg.rank_tol,
    )?;
    for d in &outcome.result.diagnostics {
        println!(
            "iteration {:>3}  |dK|_F = {:.6e}  bellman residual = {:.3e}",
            d.iteration, d.gain_delta, d.bellman_residual
        );
    }
    println!(
        "{} after {} iterations, learn time {:.4e} s",
        if outcome.result.converged { "converged" } else { "not converged" },
        outcome.result.iterations(),
        outcome.learn_seconds
    );
    if !outcome.result.converged {
        log::warn!("gain tolerance not reached within max_iters");
    }
    let file = ResultFile {
        plant: cfg.plant.name().to_string(),
        embedding: outcome.emap,
        learn: outcome.result,
    };
    let path = result_path(args);
    report::write_json(&path, &file)?;
    report::write_json(
        &meta_path(&path),
        &TimingMeta {
            learn_seconds: outcome.learn_seconds,
        },
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_evaluate(args: &Common) -> Result<()> {
    let cfg = prepare(args)?;
    let path = result_path(args);
    let file: ResultFile = report::read_json(&path)?;
    if file.plant != cfg.plant.name() {
        return Err(Error::input(format!(
            "result was learned on {} but the config names {}",
            file.plant,
            cfg.plant.name()
        )));
    }
    file.embedding.validate()?;
    let timing: Option<TimingMeta> = report::read_json(&meta_path(&path)).ok();
    let solution = optimal_gain(&cfg.model, &cfg.cost)?;
    let policy = file.learn.final_policy();
    let eval = pipeline::evaluate_policy(&cfg.plant, &cfg.model, &solution, &file.embedding, policy, &cfg.cost, &cfg.eval)?;
    let zero = Policy {
        k: Matrix::zeros(policy.k.nrows(), policy.k.ncols()),
        iteration: 0,
    };
    let open_loop = pipeline::evaluate_policy(&cfg.plant, &cfg.model, &solution, &file.embedding, &zero, &cfg.cost, &cfg.eval)?;
    let report = EvaluationReport::new(&file.plant, &file.learn, eval, &open_loop);
    let table = report.table(timing.as_ref().map(|t| t.learn_seconds));
    print!("{table}");
    report::write_json(&args.out.join("report.json"), &report)?;
    if let Some(t) = &timing {
        report::write_json(&args.out.join("report.meta.json"), t)?;
    }
    std::fs::write(args.out.join("report.txt"), &table)?;
    std::fs::write(args.out.join("costs.csv"), report.costs_csv())?;
    Ok(())
}

/// One noise level of the sweep; failures are returned, never raised.
pub fn sweep_level(cfg: &Resolved, sigma: f64) -> Result<(usize, bool, f64)> {
    let mut spec = cfg.collection.clone();
    spec.noise.output_sigma = sigma;
    let dataset = crate::datastore::collect_dataset(&cfg.plant, &spec)?;
    let outcome = pipeline::learn(&dataset, cfg.eta_bound, GammaMethod::Svd, &cfg.cost, cfg.k0.as_ref(), &cfg.learn, cfg.rank_tol)?;
    let solution = optimal_gain(&cfg.model, &cfg.cost)?;
    let eval = pipeline::evaluate_policy(
        &cfg.plant,
        &cfg.model,
        &solution,
        &outcome.emap,
        outcome.result.final_policy(),
        &cfg.cost,
        &cfg.eval,
    )?;
    Ok((outcome.result.iterations(), outcome.result.converged, eval.average_relative_error))
}

fn cmd_noise_sweep(args: &Common) -> Result<()> {
    let cfg = prepare(args)?;
    if cfg.sweep_sigmas.is_empty() {
        return Err(Error::input("noise.sweep_sigmas is empty"));
    }
    let entries = cfg
        .sweep_sigmas
        .iter()
        .map(|&sigma| match sweep_level(&cfg, sigma) {
            Ok((iterations, converged, err)) => SweepEntry {
                output_sigma: sigma,
                ok: true,
                iterations: Some(iterations),
                converged: Some(converged),
                average_relative_error: Some(err),
                error_code: None,
                error: None,
            },
            Err(e) => SweepEntry {
                output_sigma: sigma,
                ok: false,
                iterations: None,
                converged: None,
                average_relative_error: None,
                error_code: Some(exit_code(e.class())),
                error: Some(e.to_string()),
            },
        })
        .collect();
    let report = SweepReport {
        plant: cfg.plant.name().to_string(),
        gamma_method: GammaMethod::Svd,
        entries,
    };
    print!("{}", report.table());
    report::write_json(&args.out.join("noise_sweep.json"), &report)?;
    Ok(())
}

fn cmd_oracle(args: &Common) -> Result<()> {
    let cfg = prepare(args)?;
    let solution = optimal_gain(&cfg.model, &cfg.cost)?;
    let closed = &cfg.model.a - &cfg.model.b * &solution.kstar;
    let report = OracleReport {
        plant: cfg.plant.name().to_string(),
        eta: cfg.model.eta(),
        observability_lag: observability_lag(&cfg.model)?,
        kstar: solution.kstar.clone(),
        p: solution.p.clone(),
        closed_loop_spectral_radius: spectral_radius(&closed)?,
    };
    let text = crate::json::to_string(&report)?;
    print!("{text}");
    std::fs::write(args.out.join("oracle.json"), text)?;
    Ok(())
}
