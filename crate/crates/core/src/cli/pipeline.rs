//! End-to-end stages shared by the subcommands and the test suites.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{check_pe, collect_dataset, CollectionSpec, Dataset, PeReport};
use crate::embedding::{build_gamma, build_gamma_svd, EmbeddingMap, GammaMethod};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};
use crate::oracle::{LiftedModel, OptimalSolution, StateFeedback};
use crate::qlearn::{assemble_problem, run_qlearning, LearnOptions, LearnResult, OnlineController, Policy};
use crate::systems::{rollout_cost, simulate, CostSpec, Plant};

/// Stream offset for evaluation initial states, disjoint from the
/// collection streams.
const EVAL_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone)]
pub struct LearnOutcome {
    pub emap: EmbeddingMap,
    pub result: LearnResult,
    /// Wall-clock seconds for Gamma construction plus policy iteration.
    pub learn_seconds: f64,
}

pub fn collect_checked(plant: &Plant, spec: &CollectionSpec, eta_bound: usize, rank_tol: Option<f64>) -> Result<(Dataset, PeReport)> {
    let dataset = collect_dataset(plant, spec)?;
    let report = check_pe(&dataset, eta_bound, rank_tol)?;
    Ok((dataset, report))
}

pub fn learn(
    dataset: &Dataset,
    eta_bound: usize,
    method: GammaMethod,
    cost: &CostSpec,
    k0: Option<&Matrix>,
    opts: &LearnOptions,
    rank_tol: Option<f64>,
) -> Result<LearnOutcome> {
    let start = Instant::now();
    let emap = match method {
        GammaMethod::Exact => build_gamma(dataset, eta_bound, rank_tol),
        GammaMethod::Svd => build_gamma_svd(dataset, eta_bound),
    }
    .map_err(|e| match e {
        Error::RankDeficient { required, achieved } => Error::DataNotRich { required, achieved },
        other => other,
    })?;
    let k0 = k0.cloned().unwrap_or_else(|| Matrix::zeros(emap.m, emap.state_dim()));
    let problem = assemble_problem(dataset, &emap, cost, &k0, rank_tol)?;
    let result = run_qlearning(&problem, opts)?;
    let learn_seconds = start.elapsed().as_secs_f64();
    Ok(LearnOutcome {
        emap,
        result,
        learn_seconds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub num_initial_conditions: usize,
    pub x0_low: f64,
    pub x0_high: f64,
    pub horizon: usize,
    pub tail_tol: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialConditionCost {
    pub index: usize,
    #[serde(with = "crate::json::vector")]
    pub x0: Vector,
    pub learned_cost: f64,
    pub optimal_cost: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub average_relative_error: f64,
    pub max_relative_error: f64,
    pub runs: Vec<InitialConditionCost>,
}

/// Seeded initial state number `index` of an evaluation.
pub fn evaluation_state(settings: &EvalSettings, dim: usize, index: usize) -> Vector {
    let mut rng = ChaCha20Rng::seed_from_u64(settings.seed);
    rng.set_stream(EVAL_STREAM + index as u64);
    Vector::from_fn(dim, |_, _| rng.random_range(settings.x0_low..settings.x0_high))
}

/// Rolls out the learned output-feedback law and the oracle state feedback
/// from seeded initial states. Each run first drives the plant with `ell`
/// zero inputs so the learned controller's window is filled; both costs are
/// then accumulated from the same state `x_ell`.
pub fn evaluate_policy(
    plant: &Plant,
    model: &LiftedModel,
    solution: &OptimalSolution,
    emap: &EmbeddingMap,
    policy: &Policy,
    cost: &CostSpec,
    settings: &EvalSettings,
) -> Result<Evaluation> {
    if settings.num_initial_conditions == 0 {
        return Err(Error::input("num_initial_conditions must be at least 1"));
    }
    if !(settings.x0_low < settings.x0_high) {
        return Err(Error::input("x0_range needs low < high"));
    }
    let oracle = StateFeedback::new(solution, model)?;
    let count = settings.num_initial_conditions;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(count);
    let chunk = count.div_ceil(workers);

    let run_one = |index: usize| -> Result<InitialConditionCost> {
        let x0 = evaluation_state(settings, plant.state_dim(), index);
        let mut learned = OnlineController::with_zero_warmup(policy, emap)?;
        let warm = simulate(plant, &x0, &vec![Vector::zeros(plant.input_dim()); emap.ell], true)?;
        for y in &warm.outputs {
            learned.observe(y)?;
            learned.act()?;
        }
        let states = warm.states.as_ref().expect("recorded");
        let x_ell = plant.step(&states[emap.ell - 1], &Vector::zeros(plant.input_dim()))?;
        let learned_cost = rollout_cost(plant, &x_ell, &mut learned, cost, settings.horizon, settings.tail_tol)?.cost;
        let mut oracle = oracle.clone();
        let optimal_cost = rollout_cost(plant, &x_ell, &mut oracle, cost, settings.horizon, settings.tail_tol)?.cost;
        let relative_error = if optimal_cost > 0.0 {
            (learned_cost - optimal_cost).abs() / optimal_cost
        } else {
            (learned_cost - optimal_cost).abs()
        };
        Ok(InitialConditionCost {
            index,
            x0,
            learned_cost,
            optimal_cost,
            relative_error,
        })
    };

    let runs: Vec<InitialConditionCost> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let run_one = &run_one;
                scope.spawn(move || {
                    (w * chunk..((w + 1) * chunk).min(count))
                        .map(run_one)
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect::<Result<Vec<Vec<_>>>>()
    })?
    .into_iter()
    .flatten()
    .collect();

    let average_relative_error = runs.iter().map(|r| r.relative_error).sum::<f64>() / count as f64;
    let max_relative_error = runs.iter().map(|r| r.relative_error).fold(0.0, f64::max);
    Ok(Evaluation {
        average_relative_error,
        max_relative_error,
        runs,
    })
}
