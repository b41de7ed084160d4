//! Run configuration: one TOML file, every field defaulted.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datastore::{CollectionSpec, NoiseSpec, SampleLaw};
use crate::embedding::GammaMethod;
use crate::error::{Error, Result};
use crate::json::matrix_from_rows;
use crate::numerics::Matrix;
use crate::oracle::{lifted_model, LiftedModel};
use crate::qlearn::LearnOptions;
use crate::systems::{CostSpec, Plant, PlantKey};

use super::pipeline::EvalSettings;

/// Either diagonal entries or a full row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightSpec {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl WeightSpec {
    fn to_matrix(&self, path: &str) -> Result<Matrix> {
        match self {
            WeightSpec::Diagonal(d) => Ok(Matrix::from_diagonal(&crate::numerics::Vector::from_column_slice(d))),
            WeightSpec::Full(rows) => matrix_from_rows(rows, path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LtiSection {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub output_sigma: f64,
    pub state_sigma: f64,
    pub gamma_method: GammaMethod,
    /// Output-noise levels visited by `noise-sweep`.
    pub sweep_sigmas: Vec<f64>,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            output_sigma: 0.0,
            state_sigma: 0.0,
            gamma_method: GammaMethod::Exact,
            sweep_sigmas: vec![1e-2, 1e-3, 1e-4, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub num_initial_conditions: usize,
    pub x0_range: [f64; 2],
    pub horizon: usize,
    pub tail_tol: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            num_initial_conditions: 100,
            x0_range: [-1.0, 1.0],
            horizon: 5000,
            tail_tol: crate::systems::DEFAULT_TAIL_TOL,
        }
    }
}

/// Configuration as written by the user; missing fields take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub plant: String,
    pub eta_bound: Option<usize>,
    pub ell: Option<usize>,
    pub nu: Option<usize>,
    pub seed: u64,
    pub q: Option<WeightSpec>,
    pub r: Option<WeightSpec>,
    pub k0: Option<Vec<Vec<f64>>>,
    pub max_iters: usize,
    pub gain_tol: f64,
    pub rank_tol: Option<f64>,
    pub input_range: [f64; 2],
    pub x0_range: [f64; 2],
    pub lti: Option<LtiSection>,
    pub noise: NoiseSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            plant: "paper_sec4".into(),
            eta_bound: None,
            ell: None,
            nu: None,
            seed: 42,
            q: None,
            r: None,
            k0: None,
            max_iters: 10,
            gain_tol: 1e-12,
            rank_tol: None,
            input_range: [-1.0, 1.0],
            x0_range: [-1.0, 1.0],
            lti: None,
            noise: NoiseSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Schema {
            path: "config".into(),
            message: e.message().to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::input(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Resolves defaults and validates everything the pipeline needs.
    pub fn resolve(&self) -> Result<Resolved> {
        let key = match self.plant.as_str() {
            "paper_sec4" => PlantKey::PaperSec4,
            "scalar_stable" => PlantKey::ScalarStable,
            "lti_generic" => {
                let lti = self
                    .lti
                    .as_ref()
                    .ok_or_else(|| Error::input("plant lti_generic needs an [lti] section"))?;
                PlantKey::LtiGeneric {
                    a: matrix_from_rows(&lti.a, "lti.a")?,
                    b: matrix_from_rows(&lti.b, "lti.b")?,
                    c: matrix_from_rows(&lti.c, "lti.c")?,
                }
            }
            other => return Err(Error::input(format!("unknown plant {other:?}"))),
        };
        let plant = Plant::from_key(&key)?;
        let model = lifted_model(&key)?;
        let (m, p) = (plant.input_dim(), plant.output_dim());

        let eta_bound = self.eta_bound.unwrap_or(model.eta());
        let ell = self.ell.unwrap_or(eta_bound);
        if eta_bound == 0 || ell == 0 {
            return Err(Error::input("eta_bound and ell must be positive"));
        }
        let nu = self.nu.unwrap_or(2 * (m * (ell + 1) + eta_bound));
        if nu == 0 || self.max_iters == 0 || self.eval.num_initial_conditions == 0 || self.eval.horizon == 0 {
            return Err(Error::input("nu, max_iters, num_initial_conditions and horizon must be positive"));
        }
        if !(self.gain_tol >= 0.0) || !(self.eval.tail_tol >= 0.0) {
            return Err(Error::input("gain_tol and tail_tol must be nonnegative"));
        }
        let sigmas_ok = [self.noise.output_sigma, self.noise.state_sigma]
            .iter()
            .chain(&self.noise.sweep_sigmas)
            .all(|s| s.is_finite() && *s >= 0.0);
        if !sigmas_ok {
            return Err(Error::input("noise sigmas must be finite and nonnegative"));
        }
        for (name, [lo, hi]) in [("input_range", self.input_range), ("x0_range", self.x0_range), ("eval.x0_range", self.eval.x0_range)] {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::input(format!("{name} needs finite low < high")));
            }
        }

        let q = match &self.q {
            Some(w) => w.to_matrix("q")?,
            None => Matrix::identity(p, p),
        };
        let r = match &self.r {
            Some(w) => w.to_matrix("r")?,
            None => Matrix::identity(m, m),
        };
        if q.shape() != (p, p) || r.shape() != (m, m) {
            return Err(Error::input(format!("q must be {p}x{p} and r {m}x{m}")));
        }
        let cost = CostSpec::new(q, r)?;
        let k0 = self.k0.as_ref().map(|rows| matrix_from_rows(rows, "k0")).transpose()?;
        let nz = m * ell + eta_bound;
        if let Some(k) = &k0 {
            if k.shape() != (m, nz) {
                return Err(Error::input(format!("k0 must be {m}x{nz}")));
            }
        }

        let collection = CollectionSpec {
            nu,
            ell,
            input_law: SampleLaw::uniform(self.input_range[0], self.input_range[1]),
            x0_law: SampleLaw::uniform(self.x0_range[0], self.x0_range[1]),
            noise: NoiseSpec {
                output_sigma: self.noise.output_sigma,
                state_sigma: self.noise.state_sigma,
            },
            seed: self.seed,
        };
        let eval = EvalSettings {
            num_initial_conditions: self.eval.num_initial_conditions,
            x0_low: self.eval.x0_range[0],
            x0_high: self.eval.x0_range[1],
            horizon: self.eval.horizon,
            tail_tol: self.eval.tail_tol,
            seed: self.seed,
        };
        let mut effective = self.clone();
        effective.eta_bound = Some(eta_bound);
        effective.ell = Some(ell);
        effective.nu = Some(nu);
        effective.q = Some(WeightSpec::Full(crate::json::matrix_to_rows(cost.q())));
        effective.r = Some(WeightSpec::Full(crate::json::matrix_to_rows(cost.r())));

        Ok(Resolved {
            effective,
            plant,
            model,
            eta_bound,
            cost,
            k0,
            collection,
            gamma_method: self.noise.gamma_method,
            learn: LearnOptions {
                max_iters: self.max_iters,
                gain_tol: self.gain_tol,
            },
            rank_tol: self.rank_tol,
            eval,
            sweep_sigmas: self.noise.sweep_sigmas.clone(),
        })
    }
}

/// A validated configuration with every default filled in.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub effective: RunConfig,
    pub plant: Plant,
    pub model: LiftedModel,
    pub eta_bound: usize,
    pub cost: CostSpec,
    pub k0: Option<Matrix>,
    pub collection: CollectionSpec,
    pub gamma_method: GammaMethod,
    pub learn: LearnOptions,
    pub rank_tol: Option<f64>,
    pub eval: EvalSettings,
    pub sweep_sigmas: Vec<f64>,
}

impl Resolved {
    pub fn effective_toml(&self) -> Result<String> {
        toml::to_string(&self.effective).map_err(|e| Error::input(format!("cannot render config: {e}")))
    }
}
