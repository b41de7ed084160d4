//! File formats written by the subcommands.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMap;
use crate::error::{Error, Result};
use crate::json;
use crate::numerics::Matrix;
use crate::qlearn::LearnResult;

use super::pipeline::Evaluation;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, json::to_string(value)?)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Output of `learn`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub plant: String,
    pub embedding: EmbeddingMap,
    pub learn: LearnResult,
}

/// Wall-clock figures kept out of the deterministic payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingMeta {
    pub learn_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub plant: String,
    pub iterations: usize,
    pub converged: bool,
    pub average_relative_error: f64,
    pub max_relative_error: f64,
    /// Same protocol with `K = 0`, as a suboptimality baseline.
    pub open_loop_average_relative_error: f64,
    pub runs: Vec<super::pipeline::InitialConditionCost>,
}

impl EvaluationReport {
    pub fn new(plant: &str, learn: &LearnResult, eval: Evaluation, open_loop: &Evaluation) -> Self {
        EvaluationReport {
            plant: plant.to_string(),
            iterations: learn.iterations(),
            converged: learn.converged,
            average_relative_error: eval.average_relative_error,
            max_relative_error: eval.max_relative_error,
            open_loop_average_relative_error: open_loop.average_relative_error,
            runs: eval.runs,
        }
    }

    /// One row per initial condition, floats with 17 significant digits.
    pub fn costs_csv(&self) -> String {
        let dim = self.runs.first().map_or(0, |r| r.x0.len());
        let mut out = String::from("index");
        for i in 0..dim {
            let _ = write!(out, ",x0_{}", i + 1);
        }
        out.push_str(",learned_cost,optimal_cost,relative_error\n");
        for r in &self.runs {
            let _ = write!(out, "{}", r.index);
            for v in r.x0.iter() {
                let _ = write!(out, ",{v:.16e}");
            }
            let _ = writeln!(out, ",{:.16e},{:.16e},{:.16e}", r.learned_cost, r.optimal_cost, r.relative_error);
        }
        out
    }

    pub fn table(&self, learn_seconds: Option<f64>) -> String {
        let time = learn_seconds.map_or_else(|| "n/a".to_string(), |t| format!("{t:.4e}"));
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>6} {:>16} {:>14}", "method", "#iter", "avg cost error", "avg time [s]");
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:>16.4e} {:>14}",
            "QL", self.iterations, self.average_relative_error, time
        );
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:>16.4e} {:>14}",
            "K=0", "-", self.open_loop_average_relative_error, "-"
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub output_sigma: f64,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average_relative_error: Option<f64>,
    /// Exit code and message when this level failed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_code: Option<i32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub plant: String,
    pub gamma_method: crate::embedding::GammaMethod,
    pub entries: Vec<SweepEntry>,
}

impl SweepReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>10} {:>6} {:>16}  status", "sigma", "#iter", "avg cost error");
        for e in &self.entries {
            let iters = e.iterations.map_or("-".to_string(), |i| i.to_string());
            let err = e.average_relative_error.map_or("-".to_string(), |v| format!("{v:.4e}"));
            let status = e.error.as_deref().unwrap_or("ok");
            let _ = writeln!(out, "{:>10.1e} {:>6} {:>16}  {}", e.output_sigma, iters, err, status);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub plant: String,
    pub eta: usize,
    pub observability_lag: usize,
    #[serde(with = "json::matrix_rows")]
    pub kstar: Matrix,
    #[serde(with = "json::matrix_rows")]
    pub p: Matrix,
    pub closed_loop_spectral_radius: f64,
}
