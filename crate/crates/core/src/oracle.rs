//! Model-based ground truth.
//!
//! Lifted matrices, Riccati-optimal gains and realization transforms live
//! here and nowhere else: the learning modules never import this one, so any
//! test that compares learned quantities against a model does so explicitly.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::EmbeddingMap;
use crate::error::{Error, Result};
use crate::numerics::{
    rank_with_tolerance, solve_dare, solve_discrete_lyapunov, solve_square, spectral_radius, symmetrize, Matrix, Vector,
};
use crate::qlearn::{Policy, QMatrix};
use crate::systems::{paper_sec4_lifting, Controller, CostSpec, Plant, PlantKey};

type Lifting = dyn Fn(&Vector) -> Vector + Send + Sync;

/// Linear embedding `xi+ = A xi + B u`, `y = C xi`, with its lifting when known.
#[derive(Clone)]
pub struct LiftedModel {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    psi: Option<Arc<Lifting>>,
}

impl fmt::Debug for LiftedModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LiftedModel")
            .field("a", &self.a)
            .field("b", &self.b)
            .field("c", &self.c)
            .field("psi", &self.psi.as_ref().map(|_| "<fn>"))
            .finish()
    }
}

impl LiftedModel {
    pub fn new(a: Matrix, b: Matrix, c: Matrix) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || b.nrows() != n || c.ncols() != n {
            return Err(Error::input("inconsistent (A, B, C) dimensions"));
        }
        Ok(LiftedModel { a, b, c, psi: None })
    }

    pub fn with_lifting<F>(mut self, psi: F) -> Self
    where
        F: Fn(&Vector) -> Vector + Send + Sync + 'static,
    {
        self.psi = Some(Arc::new(psi));
        self
    }

    pub fn eta(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn lifting(&self) -> Option<Arc<Lifting>> {
        self.psi.clone()
    }

    pub fn lift(&self, x: &Vector) -> Result<Vector> {
        let psi = self.psi.as_ref().ok_or_else(|| Error::input("model has no lifting function"))?;
        Ok(psi(x))
    }
}

/// Lifted matrices of the builtin polynomial plant for
/// `Psi(x) = (x1, x2, x3, x1^2, x1^3, x1^5)`.
pub fn paper_sec4_matrices() -> (Matrix, Matrix, Matrix) {
    let mut a = Matrix::from_diagonal(&Vector::from_vec(vec![0.7, 0.9, 0.8, 0.49, 0.343, 0.16807]));
    a[(1, 3)] = -1.0;
    a[(1, 4)] = 1.0;
    a[(2, 1)] = -1.0;
    a[(2, 5)] = 1.0;
    let mut b = Matrix::zeros(6, 2);
    b[(1, 0)] = 1.0;
    b[(2, 1)] = 1.0;
    let mut c = Matrix::zeros(3, 6);
    c.view_mut((0, 0), (3, 3)).fill_with_identity();
    (a, b, c)
}

const SELF_CHECK_POINTS: usize = 16;
const SELF_CHECK_TOL: f64 = 1e-12;

fn check_sec4_transcription(model: &LiftedModel) -> Result<()> {
    let plant = Plant::paper_sec4();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..SELF_CHECK_POINTS {
        let x = Vector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let u = Vector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let lhs = paper_sec4_lifting(&plant.step(&x, &u)?);
        let rhs = &model.a * paper_sec4_lifting(&x) + &model.b * &u;
        if (lhs - rhs).amax() > SELF_CHECK_TOL {
            return Err(Error::input("paper_sec4 lifted matrices disagree with the plant"));
        }
    }
    Ok(())
}

/// Exact lifted model of a registry plant.
pub fn lifted_model(key: &PlantKey) -> Result<LiftedModel> {
    let model = match key {
        PlantKey::PaperSec4 => {
            let (a, b, c) = paper_sec4_matrices();
            let model = LiftedModel::new(a, b, c)?.with_lifting(paper_sec4_lifting);
            check_sec4_transcription(&model)?;
            model
        }
        PlantKey::ScalarStable => LiftedModel::new(
            Matrix::from_element(1, 1, 0.5),
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, 1.0),
        )?
        .with_lifting(|x: &Vector| x.clone()),
        PlantKey::LtiGeneric { a, b, c } => {
            LiftedModel::new(a.clone(), b.clone(), c.clone())?.with_lifting(|x: &Vector| x.clone())
        }
    };
    observability_lag(&model)?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalSolution {
    pub p: Matrix,
    pub kstar: Matrix,
    pub qxi: Matrix,
}

impl OptimalSolution {
    /// Optimal cost-to-go `xi' P xi`.
    pub fn value(&self, xi: &Vector) -> f64 {
        (xi.transpose() * &self.p * xi)[(0, 0)]
    }
}

/// Riccati-optimal gain `K* = (R + B'PB)^-1 B'PA` with `Qxi = C'QC`.
pub fn optimal_gain(model: &LiftedModel, cost: &CostSpec) -> Result<OptimalSolution> {
    if cost.output_dim() != model.output_dim() || cost.input_dim() != model.input_dim() {
        return Err(Error::input("cost weights do not match the model"));
    }
    let qxi = symmetrize(&(model.c.transpose() * cost.q() * &model.c));
    let p = solve_dare(&model.a, &model.b, &qxi, cost.r())?;
    let gram = cost.r() + model.b.transpose() * &p * &model.b;
    let kstar = solve_square(&gram, &(model.b.transpose() * &p * &model.a))
        .ok_or_else(|| Error::input("R + B'PB is singular"))?;
    let rho = spectral_radius(&(&model.a - &model.b * &kstar))?;
    if rho >= 1.0 {
        return Err(Error::NotSchurStable { spectral_radius: rho });
    }
    Ok(OptimalSolution { p, kstar, qxi })
}

/// `[C; CA; ...; C A^{l-1}]`.
pub fn observability_matrix(a: &Matrix, c: &Matrix, l: usize) -> Matrix {
    let (p, n) = (c.nrows(), a.nrows());
    let mut o = Matrix::zeros(p * l, n);
    let mut block = c.clone();
    for k in 0..l {
        o.view_mut((k * p, 0), (p, n)).copy_from(&block);
        block = &block * a;
    }
    o
}

/// Smallest `l` for which the `l`-step observability matrix has rank `eta`.
pub fn observability_lag(model: &LiftedModel) -> Result<usize> {
    let eta = model.eta();
    let mut rank = 0;
    for l in 1..=eta {
        rank = rank_with_tolerance(&observability_matrix(&model.a, &model.c, l), None)?.numerical_rank;
        if rank == eta {
            return Ok(l);
        }
    }
    Err(Error::NotObservable { rank, dim: eta })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
}

impl Realization {
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }
}

/// Restriction to the observable quotient: with `V` an orthonormal basis of
/// the orthogonal complement of the unobservable subspace (an invariant
/// subspace of `A`), returns `(V'AV, V'B, CV)`.
pub fn kalman_observable_realization(a: &Matrix, b: &Matrix, c: &Matrix) -> Result<Realization> {
    let eta = a.nrows();
    if !a.is_square() || b.nrows() != eta || c.ncols() != eta {
        return Err(Error::input("inconsistent (A, B, C) dimensions"));
    }
    let o = observability_matrix(a, c, eta.max(1));
    let rank = rank_with_tolerance(&o, None)?;
    let r = rank.numerical_rank;
    let v = if r == 0 {
        Matrix::zeros(eta, 0)
    } else {
        let svd = o.svd(false, true);
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
        let v_t = svd.v_t.expect("requested V^T");
        v_t.select_rows(order[..r].iter()).transpose()
    };
    Ok(Realization {
        a: v.transpose() * a * &v,
        b: v.transpose() * b,
        c: c * &v,
    })
}

/// `C A^k B` for `k = 0..count`.
pub fn markov_parameters(a: &Matrix, b: &Matrix, c: &Matrix, count: usize) -> Vec<Matrix> {
    let mut out = Vec::with_capacity(count);
    let mut ak_b = b.clone();
    for _ in 0..count {
        out.push(c * &ak_b);
        ak_b = a * &ak_b;
    }
    out
}

/// Model-based Q-matrix of gain `K` for dynamics `z+ = Abar z + Bbar u`,
/// `y = Cbar z` and stage weights `blkdiag(Cbar'QCbar, R)`.
pub fn model_q_matrix(abar: &Matrix, bbar: &Matrix, cbar: &Matrix, policy: &Policy, cost: &CostSpec) -> Result<QMatrix> {
    let nz = abar.nrows();
    let m = bbar.ncols();
    if cbar.ncols() != nz || cbar.nrows() != cost.output_dim() || m != cost.input_dim() {
        return Err(Error::input("model and cost dimensions disagree"));
    }
    let mut weight = Matrix::zeros(nz + m, nz + m);
    weight
        .view_mut((0, 0), (nz, nz))
        .copy_from(&(cbar.transpose() * cost.q() * cbar));
    weight.view_mut((nz, nz), (m, m)).copy_from(cost.r());
    model_q_matrix_weighted(abar, bbar, &weight, policy)
}

/// As [`model_q_matrix`] with an arbitrary symmetric stage weight on `(z, u)`:
/// `Theta = W + [Abar Bbar]' P [Abar Bbar]` where `P` evaluates `K` on the
/// closed loop `Abar - Bbar K`.
pub fn model_q_matrix_weighted(abar: &Matrix, bbar: &Matrix, weight: &Matrix, policy: &Policy) -> Result<QMatrix> {
    let nz = abar.nrows();
    let m = bbar.ncols();
    if bbar.nrows() != nz || weight.shape() != (nz + m, nz + m) || policy.k.shape() != (m, nz) {
        return Err(Error::input("inconsistent dimensions for the model Q-matrix"));
    }
    let closed = abar - bbar * &policy.k;
    let mut feedback = Matrix::zeros(nz + m, nz);
    feedback.view_mut((0, 0), (nz, nz)).fill_with_identity();
    feedback.view_mut((nz, 0), (m, nz)).copy_from(&(-&policy.k));
    let stage = symmetrize(&(feedback.transpose() * weight * &feedback));
    let p = solve_discrete_lyapunov(&closed, &stage)?;
    let mut g = Matrix::zeros(nz, nz + m);
    g.view_mut((0, 0), (nz, nz)).copy_from(abar);
    g.view_mut((0, nz), (nz, m)).copy_from(bbar);
    let theta = symmetrize(&(weight + g.transpose() * p * g));
    QMatrix::new(theta, nz, m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresModel {
    pub a_hat: Matrix,
    pub b_hat: Matrix,
    /// `Zplus - [Ahat Bhat] Zcols`.
    pub residual: Matrix,
}

/// Minimum-residual `[Ahat Bhat]` with `Zplus ~ [Ahat Bhat] Zcols`.
pub fn identify_least_squares(zcols: &Matrix, zplus: &Matrix) -> Result<LeastSquaresModel> {
    let mu = zcols.nrows();
    let nz = zplus.nrows();
    if zcols.ncols() != zplus.ncols() || nz > mu {
        return Err(Error::input("Zcols and Zplus must have equal column counts and nz <= mu"));
    }
    let rank = rank_with_tolerance(zcols, None)?.numerical_rank;
    if rank < mu {
        return Err(Error::RankDeficient {
            required: mu,
            achieved: rank,
        });
    }
    let coeffs = least_squares_right(zcols, zplus)?;
    let residual = zplus - &coeffs * zcols;
    Ok(LeastSquaresModel {
        a_hat: coeffs.columns(0, nz).into_owned(),
        b_hat: coeffs.columns(nz, mu - nz).into_owned(),
        residual,
    })
}

/// `X` minimizing `||rhs - X lhs||_F` for full-row-rank `lhs`.
pub fn least_squares_right(lhs: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    let singular = Error::RankDeficient {
        required: lhs.nrows(),
        achieved: lhs.nrows().saturating_sub(1),
    };
    let x_t = if lhs.is_square() {
        solve_square(&lhs.transpose(), &rhs.transpose())
    } else {
        solve_square(&(lhs * lhs.transpose()), &(lhs * rhs.transpose()))
    };
    Ok(x_t.ok_or(singular)?.transpose())
}

/// Disturbed stage weight `(Cm + V Z^-1)' Qbar (Cm + V Z^-1)`.
pub fn effective_cost_matrix(cmat: &Matrix, v: &Matrix, zcols: &Matrix, cost: &CostSpec) -> Result<Matrix> {
    let rows = cost.output_dim() + cost.input_dim();
    let mu = zcols.nrows();
    if cmat.shape() != (rows, mu) || v.shape() != (rows, mu) || !zcols.is_square() {
        return Err(Error::input(format!(
            "expected Cm and V of shape {rows}x{mu} and square Zcols, got {:?}, {:?}, {:?}",
            cmat.shape(),
            v.shape(),
            zcols.shape()
        )));
    }
    let v_zinv = solve_square(&zcols.transpose(), &v.transpose())
        .ok_or(Error::RankDeficient {
            required: mu,
            achieved: mu - 1,
        })?
        .transpose();
    let disturbed = cmat + v_zinv;
    Ok(symmetrize(&(disturbed.transpose() * cost.stacked_weight() * disturbed)))
}

/// The `z`-coordinate realization implied by a known model and `Gamma`,
/// together with the map `T` with `xi_t = T z_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZRealization {
    pub abar: Matrix,
    pub bbar: Matrix,
    pub cbar: Matrix,
    pub t: Matrix,
}

impl ZRealization {
    /// `K* T`: the optimal law expressed on `z`.
    pub fn lift_gain(&self, kstar: &Matrix) -> Matrix {
        kstar * &self.t
    }
}

pub fn z_realization(model: &LiftedModel, emap: &EmbeddingMap) -> Result<ZRealization> {
    let (eta, m, p) = (model.eta(), model.input_dim(), model.output_dim());
    let l = emap.ell;
    if emap.m != m || emap.p != p {
        return Err(Error::input("embedding dimensions do not match the model"));
    }
    let nz = emap.state_dim();
    let ml = m * l;
    let (a, b, c) = (&model.a, &model.b, &model.c);

    let o = observability_matrix(a, c, l);
    let mut toeplitz = Matrix::zeros(p * l, ml);
    let mut ctrl = Matrix::zeros(eta, ml);
    let mut powers = vec![Matrix::identity(eta, eta)];
    for k in 1..=l {
        powers.push(a * &powers[k - 1]);
    }
    for k in 0..l {
        for j in 0..k {
            toeplitz
                .view_mut((k * p, j * m), (p, m))
                .copy_from(&(c * &powers[k - 1 - j] * b));
        }
        ctrl.view_mut((0, k * m), (eta, m)).copy_from(&(&powers[l - 1 - k] * b));
    }

    let gamma_o = &emap.gamma * &o;
    let rank = rank_with_tolerance(&gamma_o, None)?.numerical_rank;
    if rank < eta {
        return Err(Error::RankDeficient {
            required: eta,
            achieved: rank,
        });
    }
    let left_inv = gamma_o
        .pseudo_inverse(1e-14)
        .map_err(|e| Error::input(format!("pseudo-inverse failed: {e}")))?;

    // xi_{t-l} = S z
    let mut s = Matrix::zeros(eta, nz);
    s.view_mut((0, 0), (eta, ml)).copy_from(&(-(&left_inv * &emap.gamma * &toeplitz)));
    s.view_mut((0, ml), (eta, emap.eta_bound)).copy_from(&left_inv);

    let mut t = &powers[l] * &s;
    let mut ctrl_pad = Matrix::zeros(eta, nz);
    ctrl_pad.view_mut((0, 0), (eta, ml)).copy_from(&ctrl);
    t += ctrl_pad;
    let cbar = c * &t;

    let mut first_input = Matrix::zeros(m, nz);
    first_input.view_mut((0, 0), (m, m)).fill_with_identity();
    let mut shift = Matrix::zeros(ml, nz);
    for k in 0..l.saturating_sub(1) {
        shift.view_mut((k * m, (k + 1) * m), (m, m)).fill_with_identity();
    }
    let y_next = &o * (a * &s + b * &first_input) + &toeplitz * &shift;

    let mut abar = Matrix::zeros(nz, nz);
    abar.view_mut((0, 0), (ml, nz)).copy_from(&shift);
    abar.view_mut((ml, 0), (emap.eta_bound, nz)).copy_from(&(&emap.gamma * y_next));
    let mut bbar = Matrix::zeros(nz, m);
    bbar.view_mut(((l - 1) * m, 0), (m, m)).fill_with_identity();

    Ok(ZRealization { abar, bbar, cbar, t })
}

/// Oracle law `u = -K* Psi(x)`.
#[derive(Clone)]
pub struct StateFeedback {
    pub k: Matrix,
    psi: Arc<Lifting>,
}

impl StateFeedback {
    pub fn new(solution: &OptimalSolution, model: &LiftedModel) -> Result<Self> {
        let psi = model.lifting().ok_or_else(|| Error::input("model has no lifting function"))?;
        Ok(StateFeedback {
            k: solution.kstar.clone(),
            psi,
        })
    }
}

impl Controller for StateFeedback {
    fn control(&mut self, state: &Vector, _output: &Vector) -> Result<Vector> {
        Ok(-(&self.k * (self.psi)(state)))
    }
}
