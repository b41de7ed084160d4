//! Output-feedback Q-learning by policy iteration on stored input-output data.
//!
//! The learning path only touches the dataset, `Gamma` and the cost weights.
//! Each iteration solves the data-based Bellman equation
//! `Z' Theta Z = W' Qbar W + Sigma' Theta Sigma` through the equivalent
//! Lyapunov equation in `Z^-1` coordinates, then improves the policy with
//! `K = Theta_uu^-1 Theta_uz`.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datastore::Dataset;
use crate::embedding::{make_state, EmbeddingMap};
use crate::error::{Error, Result};
use crate::json;
use crate::numerics::{
    condition_number, default_rank_tolerance, min_symmetric_eigenvalue, pivoted_independent_columns, solve_discrete_lyapunov,
    solve_square, symmetrize, Matrix, Vector,
};
use crate::systems::{Controller, CostSpec};

pub const DEFAULT_MAX_ITERS: usize = 50;
pub const DEFAULT_GAIN_TOL: f64 = 1e-12;

/// Data matrices of the Bellman equation, fixed for the whole run.
#[derive(Debug, Clone)]
pub struct QLearnProblem {
    pub emap: EmbeddingMap,
    pub cost: CostSpec,
    pub k0: Matrix,
    /// Trajectory indices `k_1 < ... < k_mu` defining the columns of `Z`.
    pub selected_indices: Vec<usize>,
    /// `[z_ell; u_ell]`, `mu x mu`.
    pub z: Matrix,
    /// `[y_ell; u_ell]`, `(p+m) x mu`.
    pub w: Matrix,
    /// `z_{ell+1}` columns, `(m ell + eta) x mu`.
    pub zplus: Matrix,
    pub u_ell: Matrix,
    pub y_ell: Matrix,
    pub z_condition: f64,
    z_inv: Matrix,
}

impl QLearnProblem {
    pub fn mu(&self) -> usize {
        self.z.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.emap.state_dim()
    }

    pub fn z_inverse(&self) -> &Matrix {
        &self.z_inv
    }

    /// `Sigma_i = [z_{ell+1}; -K z_{ell+1}]`.
    pub fn sigma(&self, k: &Matrix) -> Matrix {
        let nz = self.state_dim();
        let m = self.emap.m;
        let mut s = Matrix::zeros(self.mu(), self.mu());
        s.view_mut((0, 0), (nz, self.mu())).copy_from(&self.zplus);
        s.view_mut((nz, 0), (m, self.mu())).copy_from(&(-(k * &self.zplus)));
        s
    }

    /// Frobenius norm of `Z' Theta Z - W' Qbar W - Sigma' Theta Sigma`.
    pub fn bellman_residual(&self, theta: &QMatrix, k: &Matrix) -> f64 {
        let sigma = self.sigma(k);
        let qbar = self.cost.stacked_weight();
        let lhs = self.z.transpose() * &theta.theta * &self.z;
        let rhs = self.w.transpose() * qbar * &self.w + sigma.transpose() * &theta.theta * sigma;
        (lhs - rhs).norm()
    }
}

/// Q-function matrix partitioned into `(z, u)` blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QMatrix {
    #[serde(with = "json::matrix_rows")]
    pub theta: Matrix,
    pub state_dim: usize,
    pub input_dim: usize,
}

impl QMatrix {
    pub fn new(theta: Matrix, state_dim: usize, input_dim: usize) -> Result<Self> {
        if theta.nrows() != state_dim + input_dim || !theta.is_square() {
            return Err(Error::input(format!(
                "Theta is {}x{}, expected {n}x{n}",
                theta.nrows(),
                theta.ncols(),
                n = state_dim + input_dim
            )));
        }
        Ok(QMatrix {
            theta,
            state_dim,
            input_dim,
        })
    }

    pub fn zz(&self) -> Matrix {
        self.theta.view((0, 0), (self.state_dim, self.state_dim)).into_owned()
    }

    pub fn uz(&self) -> Matrix {
        self.theta.view((self.state_dim, 0), (self.input_dim, self.state_dim)).into_owned()
    }

    pub fn uu(&self) -> Matrix {
        self.theta.view((self.state_dim, self.state_dim), (self.input_dim, self.input_dim)).into_owned()
    }
}

/// Gain on the nonminimal state: `u = -K z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    #[serde(with = "json::matrix_rows")]
    pub k: Matrix,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    pub bellman_residual: f64,
    pub theta_uu_min_eigenvalue: f64,
    pub gain_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnResult {
    pub initial_policy: Policy,
    /// `K^1 .. K^N`.
    pub policies: Vec<Policy>,
    /// `Theta^1 .. Theta^N`.
    pub thetas: Vec<QMatrix>,
    pub converged: bool,
    pub final_gain_delta: f64,
    pub diagnostics: Vec<IterationDiagnostics>,
}

impl LearnResult {
    pub fn iterations(&self) -> usize {
        self.policies.len()
    }

    pub fn final_policy(&self) -> &Policy {
        self.policies.last().unwrap_or(&self.initial_policy)
    }

    /// `K^0, K^1, ..., K^N`.
    pub fn gain_history(&self) -> impl Iterator<Item = &Policy> {
        std::iter::once(&self.initial_policy).chain(self.policies.iter())
    }

    pub fn to_json(&self) -> Result<String> {
        json::to_string(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: LearnResult = serde_json::from_str(text)?;
        if r.policies.len() != r.thetas.len() || r.policies.len() != r.diagnostics.len() {
            return Err(Error::Schema {
                path: "policies".into(),
                message: "policies, thetas and diagnostics must have equal length".into(),
            });
        }
        Ok(r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnOptions {
    pub max_iters: usize,
    pub gain_tol: f64,
}

impl Default for LearnOptions {
    fn default() -> Self {
        LearnOptions {
            max_iters: DEFAULT_MAX_ITERS,
            gain_tol: DEFAULT_GAIN_TOL,
        }
    }
}

/// Builds `z_ell`, `z_{ell+1}` for every trajectory and selects `mu` of them
/// so that `Z` is nonsingular.
pub fn assemble_problem(d: &Dataset, emap: &EmbeddingMap, cost: &CostSpec, k0: &Matrix, tol: Option<f64>) -> Result<QLearnProblem> {
    let (m, p) = (emap.m, emap.p);
    if d.input_dim() != m || d.output_dim() != p || d.ell() != emap.ell {
        return Err(Error::input(format!(
            "dataset (m={}, p={}, ell={}) does not match embedding (m={m}, p={p}, ell={})",
            d.input_dim(),
            d.output_dim(),
            d.ell(),
            emap.ell
        )));
    }
    if cost.output_dim() != p || cost.input_dim() != m {
        return Err(Error::input("cost weights do not match the data dimensions"));
    }
    let nz = emap.state_dim();
    if k0.shape() != (m, nz) {
        return Err(Error::input(format!("K0 must be {m}x{nz}, got {}x{}", k0.nrows(), k0.ncols())));
    }
    let mu = emap.mu();
    let nu = d.len();
    let ell = emap.ell;

    let mut all_z = Matrix::zeros(mu, nu);
    let mut all_zplus = Matrix::zeros(nz, nu);
    for (j, traj) in d.trajectories().iter().enumerate() {
        let (z, z_next) = emap.boundary_states(traj)?;
        all_z.view_mut((0, j), (nz, 1)).copy_from(&z.z);
        all_z.view_mut((nz, j), (m, 1)).copy_from(&traj.inputs[ell]);
        all_zplus.set_column(j, &z_next.z);
    }

    let tol = tol.unwrap_or_else(|| default_rank_tolerance(&all_z));
    let mut selected = pivoted_independent_columns(&all_z, mu, tol).map_err(|e| match e {
        Error::RankDeficient { achieved, .. } => Error::DataNotRich { required: mu, achieved },
        other => other,
    })?;
    selected.sort_unstable();

    let z = all_z.select_columns(selected.iter());
    let zplus = all_zplus.select_columns(selected.iter());
    let u_ell = z.rows(nz, m).into_owned();
    let y_ell = Matrix::from_fn(p, mu, |i, c| d.trajectories()[selected[c]].outputs[ell][i]);
    let mut w = Matrix::zeros(p + m, mu);
    w.view_mut((0, 0), (p, mu)).copy_from(&y_ell);
    w.view_mut((p, 0), (m, mu)).copy_from(&u_ell);

    let z_inv = solve_square(&z, &Matrix::identity(mu, mu)).ok_or(Error::DataNotRich {
        required: mu,
        achieved: mu - 1,
    })?;
    let z_condition = condition_number(&z);
    log::debug!("selected {mu} of {nu} columns, cond(Z) = {z_condition:.3e}");

    Ok(QLearnProblem {
        emap: emap.clone(),
        cost: cost.clone(),
        k0: k0.clone(),
        selected_indices: selected,
        z,
        w,
        zplus,
        u_ell,
        y_ell,
        z_condition,
        z_inv,
    })
}

/// Policy evaluation: the unique `Theta` of the Bellman equation for gain `K`.
pub fn bellman_solve(problem: &QLearnProblem, policy: &Policy) -> Result<QMatrix> {
    let nz = problem.state_dim();
    let m = problem.emap.m;
    if policy.k.shape() != (m, nz) {
        return Err(Error::input(format!("policy gain must be {m}x{nz}")));
    }
    let phi = problem.sigma(&policy.k) * &problem.z_inv;
    let out_map = &problem.w * &problem.z_inv;
    let qeff = symmetrize(&(out_map.transpose() * problem.cost.stacked_weight() * out_map));
    let theta = solve_discrete_lyapunov(&phi, &qeff)?;
    QMatrix::new(theta, nz, m)
}

/// Policy improvement `K = Theta_uu^-1 Theta_uz`.
pub fn policy_update(theta: &QMatrix, current: &Policy) -> Result<Policy> {
    let uu = theta.uu();
    let min_eigenvalue = min_symmetric_eigenvalue(&uu);
    if !(min_eigenvalue > 0.0) {
        return Err(Error::IllConditionedUpdate { min_eigenvalue });
    }
    let chol = symmetrize(&uu)
        .cholesky()
        .ok_or(Error::IllConditionedUpdate { min_eigenvalue })?;
    Ok(Policy {
        k: chol.solve(&theta.uz()),
        iteration: current.iteration + 1,
    })
}

/// Policy iteration from `problem.k0` until the gain change drops below
/// `opts.gain_tol` or `opts.max_iters` iterations have run.
pub fn run_qlearning(problem: &QLearnProblem, opts: &LearnOptions) -> Result<LearnResult> {
    if opts.max_iters == 0 {
        return Err(Error::input("max_iters must be at least 1"));
    }
    let initial_policy = Policy {
        k: problem.k0.clone(),
        iteration: 0,
    };
    let mut current = initial_policy.clone();
    let mut policies = Vec::new();
    let mut thetas = Vec::new();
    let mut diagnostics = Vec::new();
    let mut converged = false;
    let mut final_gain_delta = f64::INFINITY;

    for i in 0..opts.max_iters {
        let theta = bellman_solve(problem, &current).map_err(|e| match e {
            Error::NotSchurStable { spectral_radius } if i == 0 => Error::BadInitialPolicy { spectral_radius },
            Error::NotSchurStable { spectral_radius } => Error::InternalStabilityLoss {
                iteration: i,
                spectral_radius,
            },
            other => other,
        })?;
        let residual = problem.bellman_residual(&theta, &current.k);
        let next = policy_update(&theta, &current)?;
        let delta = (&next.k - &current.k).norm();
        log::info!("iteration {}: gain delta {delta:.3e}, Bellman residual {residual:.3e}", i + 1);
        diagnostics.push(IterationDiagnostics {
            iteration: i + 1,
            bellman_residual: residual,
            theta_uu_min_eigenvalue: min_symmetric_eigenvalue(&theta.uu()),
            gain_delta: delta,
        });
        thetas.push(theta);
        policies.push(next.clone());
        final_gain_delta = delta;
        current = next;
        if delta < opts.gain_tol {
            converged = true;
            break;
        }
    }

    Ok(LearnResult {
        initial_policy,
        policies,
        thetas,
        converged,
        final_gain_delta,
        diagnostics,
    })
}

/// Runs the learned law `u_t = -K z_t` in closed loop.
///
/// Calls must alternate: [`observe`](Self::observe) the output `y_t`, then
/// [`act`](Self::act) to obtain `u_t`. The first `ell` actions replay the
/// warmup inputs while the window fills.
#[derive(Debug, Clone)]
pub struct OnlineController {
    k: Matrix,
    emap: EmbeddingMap,
    warmup: Vec<Vector>,
    inputs: VecDeque<Vector>,
    outputs: VecDeque<Vector>,
    pending: Option<Vector>,
    t: usize,
}

impl OnlineController {
    pub fn new(policy: &Policy, emap: &EmbeddingMap, warmup: Vec<Vector>) -> Result<Self> {
        if policy.k.shape() != (emap.m, emap.state_dim()) {
            return Err(Error::input("policy gain does not match the embedding"));
        }
        if warmup.len() != emap.ell || warmup.iter().any(|u| u.len() != emap.m) {
            return Err(Error::input(format!("warmup must hold {} inputs in R^{}", emap.ell, emap.m)));
        }
        Ok(OnlineController {
            k: policy.k.clone(),
            emap: emap.clone(),
            warmup,
            inputs: VecDeque::with_capacity(emap.ell),
            outputs: VecDeque::with_capacity(emap.ell),
            pending: None,
            t: 0,
        })
    }

    pub fn with_zero_warmup(policy: &Policy, emap: &EmbeddingMap) -> Result<Self> {
        let warmup = vec![Vector::zeros(emap.m); emap.ell];
        OnlineController::new(policy, emap, warmup)
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn input_dim(&self) -> usize {
        self.emap.m
    }

    pub fn output_dim(&self) -> usize {
        self.emap.p
    }

    pub fn observe(&mut self, y: &Vector) -> Result<()> {
        if self.pending.is_some() {
            return Err(Error::Protocol("observe called twice without act".into()));
        }
        if y.len() != self.emap.p {
            return Err(Error::input(format!("output must be in R^{}", self.emap.p)));
        }
        self.pending = Some(y.clone());
        Ok(())
    }

    pub fn act(&mut self) -> Result<Vector> {
        let y = self
            .pending
            .take()
            .ok_or_else(|| Error::Protocol("act called before observing the current output".into()))?;
        let u = if self.t < self.emap.ell {
            self.warmup[self.t].clone()
        } else {
            let (us, ys) = (self.inputs.make_contiguous().to_vec(), self.outputs.make_contiguous().to_vec());
            let z = make_state(&self.emap, &us, &ys)?;
            -(&self.k * z.z)
        };
        if self.inputs.len() == self.emap.ell {
            self.inputs.pop_front();
            self.outputs.pop_front();
        }
        self.inputs.push_back(u.clone());
        self.outputs.push_back(y);
        self.t += 1;
        Ok(u)
    }
}

impl Controller for OnlineController {
    fn control(&mut self, _state: &Vector, output: &Vector) -> Result<Vector> {
        self.observe(output)?;
        self.act()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::GammaMethod;

    fn scalar_emap() -> EmbeddingMap {
        EmbeddingMap {
            eta_bound: 1,
            ell: 1,
            m: 1,
            p: 1,
            method: GammaMethod::Exact,
            gamma: Matrix::from_element(1, 1, 1.0),
            permutation: vec![0],
        }
    }

    #[test]
    fn policy_update_cases() {
        let p0 = Policy {
            k: Matrix::zeros(1, 1),
            iteration: 3,
        };
        let theta = QMatrix::new(Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]), 1, 1).unwrap();
        let next = policy_update(&theta, &p0).unwrap();
        assert!((next.k[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(next.iteration, 4);

        let theta = QMatrix::new(Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 5.0]), 1, 1).unwrap();
        assert_eq!(policy_update(&theta, &p0).unwrap().k, Matrix::zeros(1, 1));

        let theta = QMatrix::new(Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, -1.0]), 1, 1).unwrap();
        assert!(matches!(policy_update(&theta, &p0), Err(Error::IllConditionedUpdate { .. })));
    }

    #[test]
    fn online_controller_protocol() {
        let policy = Policy {
            k: Matrix::from_row_slice(1, 2, &[0.3, -0.7]),
            iteration: 1,
        };
        let mut ctrl = OnlineController::new(&policy, &scalar_emap(), vec![Vector::from_element(1, 0.25)]).unwrap();
        assert!(matches!(ctrl.act(), Err(Error::Protocol(_))));
        ctrl.observe(&Vector::from_element(1, 2.0)).unwrap();
        assert!(matches!(ctrl.observe(&Vector::from_element(1, 2.0)), Err(Error::Protocol(_))));
        assert_eq!(ctrl.act().unwrap()[0], 0.25);
        ctrl.observe(&Vector::from_element(1, 1.0)).unwrap();
        // z = (0.25, 2.0)
        let u = ctrl.act().unwrap()[0];
        assert!((u - -(0.3 * 0.25 - 0.7 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_history_gives_zero_input() {
        let policy = Policy {
            k: Matrix::from_row_slice(1, 2, &[5.0, -3.0]),
            iteration: 0,
        };
        let mut ctrl = OnlineController::with_zero_warmup(&policy, &scalar_emap()).unwrap();
        for _ in 0..3 {
            assert_eq!(ctrl.control(&Vector::zeros(1), &Vector::zeros(1)).unwrap(), Vector::zeros(1));
        }
    }
}
