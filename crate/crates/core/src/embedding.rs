//! Construction of the output-compression matrix `Gamma` and of the
//! nonminimal state `z_t = (u_{t-l..t-1}, Gamma y_{t-l..t-1})`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datastore::{build_hankel, Dataset};
use crate::error::{Error, Result};
use crate::json;
use crate::numerics::{default_rank_tolerance, pivoted_independent_rows, rank_with_tolerance, row_space_basis, Matrix, Vector};
use crate::systems::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMethod {
    /// Row selection by permutation (noise-free data).
    Exact,
    /// Leading left singular vectors (noisy data).
    Svd,
}

impl std::str::FromStr for GammaMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(GammaMethod::Exact),
            "svd" => Ok(GammaMethod::Svd),
            other => Err(Error::input(format!("unknown gamma method '{other}' (expected exact|svd)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMap {
    pub eta_bound: usize,
    pub ell: usize,
    pub m: usize,
    pub p: usize,
    pub method: GammaMethod,
    /// `eta_bound x p*ell`, full row rank.
    #[serde(with = "json::matrix_rows")]
    pub gamma: Matrix,
    /// Output-row order used by the exact method: the selected rows first (in
    /// pivot order), then the rest ascending. Empty for the SVD method.
    pub permutation: Vec<usize>,
}

/// `z = (u window; Gamma * y window)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonminimalState {
    pub z: Vector,
}

impl EmbeddingMap {
    /// Dimension of `z`: `m*ell + eta_bound`.
    pub fn state_dim(&self) -> usize {
        self.m * self.ell + self.eta_bound
    }

    /// `mu = m(ell+1) + eta_bound`.
    pub fn mu(&self) -> usize {
        self.m * (self.ell + 1) + self.eta_bound
    }

    /// Shape and permutation checks applied when a map is loaded.
    pub fn validate(&self) -> Result<()> {
        if self.gamma.nrows() != self.eta_bound || self.gamma.ncols() != self.p * self.ell {
            return Err(Error::Schema {
                path: "gamma".into(),
                message: format!(
                    "expected {}x{} matrix, found {}x{}",
                    self.eta_bound,
                    self.p * self.ell,
                    self.gamma.nrows(),
                    self.gamma.ncols()
                ),
            });
        }
        if self.m == 0 || self.p == 0 || self.ell == 0 || self.eta_bound == 0 {
            return Err(Error::Schema {
                path: "".into(),
                message: "m, p, ell and eta_bound must be positive".into(),
            });
        }
        if !self.permutation.is_empty() {
            let mut sorted = self.permutation.clone();
            sorted.sort_unstable();
            if sorted != (0..self.p * self.ell).collect::<Vec<_>>() {
                return Err(Error::Schema {
                    path: "permutation".into(),
                    message: format!("not a permutation of 0..{}", self.p * self.ell),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        json::to_string(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: EmbeddingMap = serde_json::from_str(text)?;
        map.validate()?;
        Ok(map)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        EmbeddingMap::from_json(&std::fs::read_to_string(path)?)
    }

    /// `z_ell` and `z_{ell+1}` of a stored trajectory (`ell + 1` samples).
    pub fn boundary_states(&self, traj: &Trajectory) -> Result<(NonminimalState, NonminimalState)> {
        let l = self.ell;
        if traj.len() != l + 1 {
            return Err(Error::input(format!("trajectory has {} samples, expected {}", traj.len(), l + 1)));
        }
        let z = make_state(self, &traj.inputs[..l], &traj.outputs[..l])?;
        let z_next = make_state(self, &traj.inputs[1..], &traj.outputs[1..])?;
        Ok((z, z_next))
    }
}

fn check_eta(d: &Dataset, eta_bound: usize) -> Result<()> {
    if eta_bound == 0 {
        return Err(Error::input("eta_bound must be at least 1"));
    }
    let pl = d.output_dim() * d.ell();
    if eta_bound > pl {
        return Err(Error::input(format!("eta_bound {eta_bound} exceeds p*ell = {pl}")));
    }
    Ok(())
}

/// Splits `H_minus` into input rows and output rows, and removes from the
/// output rows their component in the input-row span.
fn projected_output_block(d: &Dataset, tol: Option<f64>) -> Result<(Matrix, Matrix, f64)> {
    let h = build_hankel(d).minus;
    let ml = d.input_dim() * d.ell();
    let tol = match tol {
        Some(t) => t,
        None => default_rank_tolerance(&h),
    };
    let u_rows = h.rows(0, ml).into_owned();
    let y_rows = h.rows(ml, h.nrows() - ml).into_owned();
    let basis = row_space_basis(&u_rows, tol);
    let y_perp = &y_rows - (&y_rows * basis.transpose()) * &basis;
    Ok((u_rows, y_perp, tol))
}

/// Exact construction: picks `eta_bound` output rows of `H_minus` that,
/// stacked under the input rows, are jointly full row rank. `Gamma` is the
/// top block of the inverse permutation, i.e. a row-selection matrix.
pub fn build_gamma(d: &Dataset, eta_bound: usize, tol: Option<f64>) -> Result<EmbeddingMap> {
    check_eta(d, eta_bound)?;
    let (m, p, ell) = (d.input_dim(), d.output_dim(), d.ell());
    let (u_rows, y_perp, tol) = projected_output_block(d, tol)?;

    let input_rank = rank_with_tolerance(&u_rows, Some(tol))?.numerical_rank;
    if input_rank < m * ell {
        return Err(Error::RankDeficient {
            required: m * ell + eta_bound,
            achieved: input_rank,
        });
    }
    let selected = pivoted_independent_rows(&y_perp, eta_bound, tol).map_err(|e| match e {
        Error::RankDeficient { achieved, .. } => Error::RankDeficient {
            required: m * ell + eta_bound,
            achieved: m * ell + achieved,
        },
        other => other,
    })?;

    let pl = p * ell;
    let mut permutation = selected.clone();
    permutation.extend((0..pl).filter(|i| !selected.contains(i)));
    // Pi^-1 = Pi^T for a permutation; its first eta rows select the chosen rows.
    let mut gamma = Matrix::zeros(eta_bound, pl);
    for (k, &row) in selected.iter().enumerate() {
        gamma[(k, row)] = 1.0;
    }
    Ok(EmbeddingMap {
        eta_bound,
        ell,
        m,
        p,
        method: GammaMethod::Exact,
        gamma,
        permutation,
    })
}

/// Noise-tolerant construction: `Gamma` spans the dominant `eta_bound`
/// left singular directions of the projected output block.
pub fn build_gamma_svd(d: &Dataset, eta_bound: usize) -> Result<EmbeddingMap> {
    check_eta(d, eta_bound)?;
    let (m, p, ell) = (d.input_dim(), d.output_dim(), d.ell());
    let (_, y_perp, tol) = projected_output_block(d, None)?;
    let svd = y_perp.clone().svd(true, false);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let achieved = order.iter().filter(|&&i| svd.singular_values[i] > tol).count();
    if achieved < eta_bound {
        return Err(Error::RankDeficient {
            required: m * ell + eta_bound,
            achieved: m * ell + achieved,
        });
    }
    let u = svd.u.expect("requested U");
    let mut gamma = Matrix::zeros(eta_bound, p * ell);
    for (k, &i) in order.iter().take(eta_bound).enumerate() {
        let mut row = u.column(i).transpose();
        // sign convention: largest-magnitude entry positive
        let (imax, _) = row.iter().enumerate().fold((0, 0.0), |acc, (j, v)| if v.abs() > acc.1 { (j, v.abs()) } else { acc });
        if row[imax] < 0.0 {
            row = -row;
        }
        gamma.row_mut(k).copy_from(&row);
    }
    Ok(EmbeddingMap {
        eta_bound,
        ell,
        m,
        p,
        method: GammaMethod::Svd,
        gamma,
        permutation: Vec::new(),
    })
}

/// Stacks the input window over `Gamma` times the output window.
pub fn make_state(emap: &EmbeddingMap, u_window: &[Vector], y_window: &[Vector]) -> Result<NonminimalState> {
    let (m, p, l) = (emap.m, emap.p, emap.ell);
    if u_window.len() != l || y_window.len() != l {
        return Err(Error::input(format!(
            "windows must hold {l} samples, got {} inputs and {} outputs",
            u_window.len(),
            y_window.len()
        )));
    }
    if u_window.iter().any(|u| u.len() != m) || y_window.iter().any(|y| y.len() != p) {
        return Err(Error::input(format!("window samples must be in R^{m} (inputs) and R^{p} (outputs)")));
    }
    let mut z = Vector::zeros(emap.state_dim());
    for (t, u) in u_window.iter().enumerate() {
        z.rows_mut(t * m, m).copy_from(u);
    }
    let mut y_stack = Vector::zeros(p * l);
    for (t, y) in y_window.iter().enumerate() {
        y_stack.rows_mut(t * p, p).copy_from(y);
    }
    z.rows_mut(m * l, emap.eta_bound).copy_from(&(&emap.gamma * y_stack));
    Ok(NonminimalState { z })
}
