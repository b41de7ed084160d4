//! Dense linear-algebra kernel.
//!
//! Everything here works on `nalgebra` dynamic matrices. The routines are
//! sized for desk-scale problems (a few hundred unknowns at most): the
//! Lyapunov solver forms the full Kronecker system and the Riccati solver is
//! a plain fixed-point iteration.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Outcome of a numerical-rank computation.
#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub numerical_rank: usize,
    /// Nonincreasing, nonnegative.
    pub singular_values: Vec<f64>,
    pub tolerance_used: f64,
}

const LYAPUNOV_MAX_DIM: usize = 32;
const DARE_MAX_ITERS: usize = 100_000;
const DARE_STEP_TOL: f64 = 1e-13;
const DARE_RESIDUAL_TOL: f64 = 1e-10;

pub(crate) fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::input(format!("{what} contains non-finite entries")))
    }
}

fn ensure_square(m: &Matrix, what: &str) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(Error::input(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )))
    }
}

/// Singular values in nonincreasing order.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Default tolerance `max(rows, cols) * eps * sigma_max`.
pub fn default_rank_tolerance(m: &Matrix) -> f64 {
    let sigma_max = singular_values(m).first().copied().unwrap_or(0.0);
    m.nrows().max(m.ncols()) as f64 * f64::EPSILON * sigma_max
}

/// Numerical rank: the number of singular values strictly above `tol`
/// (or the default tolerance when `tol` is `None`).
pub fn rank_with_tolerance(m: &Matrix, tol: Option<f64>) -> Result<RankReport> {
    if m.is_empty() {
        return Err(Error::input("rank of an empty matrix"));
    }
    ensure_finite(m, "matrix")?;
    let singular_values = singular_values(m);
    let tolerance_used = match tol {
        Some(t) if t.is_finite() && t >= 0.0 => t,
        Some(t) => return Err(Error::input(format!("invalid rank tolerance {t}"))),
        None => m.nrows().max(m.ncols()) as f64 * f64::EPSILON * singular_values[0],
    };
    let numerical_rank = singular_values.iter().filter(|&&s| s > tolerance_used).count();
    Ok(RankReport {
        numerical_rank,
        singular_values,
        tolerance_used,
    })
}

/// Greedy pivoted selection of `k` linearly independent rows.
///
/// Each step picks the row whose component orthogonal to the rows already
/// chosen has the largest norm (smallest index on exact ties), then deflates
/// the remaining rows. Fails if the next pivot norm is not above `tol`, or if
/// the selected submatrix does not have rank `k` at `tol`.
pub fn pivoted_independent_rows(m: &Matrix, k: usize, tol: f64) -> Result<Vec<usize>> {
    ensure_finite(m, "matrix")?;
    if k > m.nrows() {
        return Err(Error::RankDeficient {
            required: k,
            achieved: achieved_rank(m, tol),
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut residual: Vec<Vector> = m.row_iter().map(|r| r.transpose()).collect();
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut taken = vec![false; m.nrows()];

    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in residual.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let norm = r.norm();
            if best.is_none_or(|(_, b)| norm > b) {
                best = Some((i, norm));
            }
        }
        let (pivot, norm) = best.expect("k <= rows");
        if !(norm > tol) {
            return Err(Error::RankDeficient {
                required: k,
                achieved: achieved_rank(m, tol),
            });
        }
        taken[pivot] = true;
        chosen.push(pivot);
        let q = &residual[pivot] / norm;
        for (i, r) in residual.iter_mut().enumerate() {
            if taken[i] {
                continue;
            }
            // two passes of classical Gram-Schmidt
            for _ in 0..2 {
                let c = q.dot(r);
                r.axpy(-c, &q, 1.0);
            }
        }
    }

    let sub = m.select_rows(chosen.iter());
    if rank_with_tolerance(&sub, Some(tol))?.numerical_rank != k {
        return Err(Error::RankDeficient {
            required: k,
            achieved: achieved_rank(m, tol),
        });
    }
    Ok(chosen)
}

/// Column counterpart of [`pivoted_independent_rows`].
pub fn pivoted_independent_columns(m: &Matrix, k: usize, tol: f64) -> Result<Vec<usize>> {
    pivoted_independent_rows(&m.transpose(), k, tol)
}

fn achieved_rank(m: &Matrix, tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    rank_with_tolerance(m, Some(tol))
        .map(|r| r.numerical_rank)
        .unwrap_or(0)
}

/// Largest eigenvalue magnitude.
pub fn spectral_radius(m: &Matrix) -> Result<f64> {
    ensure_square(m, "matrix")?;
    ensure_finite(m, "matrix")?;
    if m.is_empty() {
        return Ok(0.0);
    }
    Ok(m
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_symmetric_eigenvalue(m: &Matrix) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// 2-norm condition number (infinite for singular matrices).
pub fn condition_number(m: &Matrix) -> f64 {
    let sv = singular_values(m);
    match (sv.first(), sv.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Solves `Theta = Phi^T Theta Phi + Qeff` through the vectorized system
/// `(I - Phi^T (x) Phi^T) vec(Theta) = vec(Qeff)`.
pub fn solve_discrete_lyapunov(phi: &Matrix, qeff: &Matrix) -> Result<Matrix> {
    ensure_square(phi, "Phi")?;
    ensure_square(qeff, "Qeff")?;
    ensure_finite(phi, "Phi")?;
    ensure_finite(qeff, "Qeff")?;
    let n = phi.nrows();
    if qeff.nrows() != n {
        return Err(Error::input(format!(
            "Qeff is {}x{}, Phi is {n}x{n}",
            qeff.nrows(),
            qeff.ncols()
        )));
    }
    if n > LYAPUNOV_MAX_DIM {
        log::warn!("vectorized Lyapunov solve with n = {n} ({} unknowns)", n * n);
    }
    let rho = spectral_radius(phi)?;
    if rho >= 1.0 {
        return Err(Error::NotSchurStable { spectral_radius: rho });
    }

    let phi_t = phi.transpose();
    let mut system = -phi_t.kronecker(&phi_t);
    for i in 0..n * n {
        system[(i, i)] += 1.0;
    }
    let rhs = Vector::from_column_slice(qeff.as_slice());
    let solution = system
        .lu()
        .solve(&rhs)
        .ok_or(Error::NotSchurStable { spectral_radius: rho })?;
    if solution.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotSchurStable { spectral_radius: rho });
    }
    let theta = Matrix::from_column_slice(n, n, solution.as_slice());
    Ok(symmetrize(&theta))
}

/// Residual `Qxi + A^T P A - P - A^T P B (R + B^T P B)^-1 B^T P A`.
pub fn dare_residual(a: &Matrix, b: &Matrix, qxi: &Matrix, r: &Matrix, p: &Matrix) -> Result<Matrix> {
    let next = riccati_step(a, b, qxi, r, p)?;
    Ok(next - p)
}

/// Iterates beyond this norm mean there is no stabilizing solution.
const DARE_DIVERGENCE: f64 = 1e100;

fn riccati_step(a: &Matrix, b: &Matrix, qxi: &Matrix, r: &Matrix, p: &Matrix) -> Result<Matrix> {
    let pa = p * a;
    let pb = p * b;
    let gram = r + b.transpose() * &pb;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::input("R + B^T P B is not positive definite"))?;
    let gain = chol.solve(&(pb.transpose() * a));
    let next = qxi + a.transpose() * &pa - (a.transpose() * &pb) * gain;
    Ok(symmetrize(&next))
}

/// Stabilizing solution of the discrete algebraic Riccati equation by
/// fixed-point iteration from `P = Qxi`.
pub fn solve_dare(a: &Matrix, b: &Matrix, qxi: &Matrix, r: &Matrix) -> Result<Matrix> {
    ensure_square(a, "A")?;
    ensure_square(qxi, "Qxi")?;
    ensure_square(r, "R")?;
    for (m, name) in [(a, "A"), (b, "B"), (qxi, "Qxi"), (r, "R")] {
        ensure_finite(m, name)?;
    }
    let n = a.nrows();
    if b.nrows() != n || qxi.nrows() != n || r.nrows() != b.ncols() {
        return Err(Error::input(format!(
            "inconsistent DARE dimensions: A {n}x{n}, B {}x{}, Qxi {}x{}, R {}x{}",
            b.nrows(),
            b.ncols(),
            qxi.nrows(),
            qxi.ncols(),
            r.nrows(),
            r.ncols()
        )));
    }

    let mut p = symmetrize(qxi);
    let mut last_change = f64::INFINITY;
    for iter in 0..DARE_MAX_ITERS {
        let next = riccati_step(a, b, qxi, r, &p)?;
        if next.iter().any(|v| !v.is_finite()) || next.norm() > DARE_DIVERGENCE {
            return Err(Error::NoConvergence {
                iterations: iter + 1,
                last_change,
            });
        }
        last_change = (&next - &p).norm();
        let scale = 1.0 + next.norm();
        p = next;
        if last_change <= DARE_STEP_TOL * scale {
            let residual = dare_residual(a, b, qxi, r, &p)?.norm();
            if residual <= DARE_RESIDUAL_TOL * scale {
                log::debug!("DARE converged in {} iterations", iter + 1);
                return Ok(p);
            }
        }
    }
    Err(Error::NoConvergence {
        iterations: DARE_MAX_ITERS,
        last_change,
    })
}

/// Solves `lhs * X = rhs` for square nonsingular `lhs`.
pub(crate) fn solve_square(lhs: &Matrix, rhs: &Matrix) -> Option<Matrix> {
    lhs.clone().lu().solve(rhs)
}

/// Orthonormal basis (as rows) of the row space of `m` at tolerance `tol`.
pub(crate) fn row_space_basis(m: &Matrix, tol: f64) -> Matrix {
    if m.is_empty() {
        return Matrix::zeros(0, m.ncols());
    }
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > tol)
        .map(|(i, _)| i)
        .collect();
    v_t.select_rows(keep.iter())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn rank_of_zero_and_identity() {
        assert_eq!(rank_with_tolerance(&Matrix::zeros(4, 4), None).unwrap().numerical_rank, 0);
        assert_eq!(rank_with_tolerance(&Matrix::identity(5, 5), None).unwrap().numerical_rank, 5);
    }

    #[test]
    fn rank_of_outer_product_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Vector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let b = Vector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let report = rank_with_tolerance(&(&a * b.transpose()), None).unwrap();
        assert_eq!(report.numerical_rank, 1);
        assert!(report.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rank_rejects_non_finite() {
        let mut m = Matrix::identity(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(rank_with_tolerance(&m, None), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn pivot_identity_in_order() {
        let idx = pivoted_independent_rows(&Matrix::identity(3, 3), 3, 1e-12).unwrap();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn pivot_prefers_larger_row() {
        let m = Matrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 2.0, -4.0, 1.0]);
        assert_eq!(pivoted_independent_rows(&m, 1, 1e-12).unwrap(), vec![1]);
        match pivoted_independent_rows(&m, 2, 1e-12) {
            Err(Error::RankDeficient { required: 2, achieved: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pivot_never_selects_zero_row() {
        let m = Matrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 2.0, 3.0, -1.0]);
        let idx = pivoted_independent_rows(&m, 2, 1e-12).unwrap();
        assert!(!idx.contains(&0));
    }

    #[test]
    fn lyapunov_zero_phi_returns_q() {
        let q = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let theta = solve_discrete_lyapunov(&Matrix::zeros(2, 2), &q).unwrap();
        assert!((theta - q).norm() < 1e-15);
    }

    #[test]
    fn lyapunov_scalar_closed_form() {
        let theta = solve_discrete_lyapunov(&Matrix::from_element(1, 1, 0.5), &Matrix::from_element(1, 1, 1.0)).unwrap();
        assert!((theta[(0, 0)] - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn lyapunov_rejects_unstable() {
        let r = solve_discrete_lyapunov(&Matrix::from_element(1, 1, 1.5), &Matrix::from_element(1, 1, 1.0));
        assert!(matches!(r, Err(Error::NotSchurStable { .. })));
    }

    #[test]
    fn lyapunov_matches_fixed_point_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = random_matrix(&mut rng, 8, 8);
        let phi = &g * (0.9 / g.norm());
        let s = random_matrix(&mut rng, 8, 8);
        let q = &s + s.transpose();
        let theta = solve_discrete_lyapunov(&phi, &q).unwrap();

        let mut fp = q.clone();
        for _ in 0..2000 {
            fp = phi.transpose() * &fp * &phi + &q;
        }
        assert!((&theta - &fp).norm() < 1e-10);
        assert_eq!(theta, theta.transpose());
    }

    #[test]
    fn dare_scalar_cases() {
        let one = Matrix::from_element(1, 1, 1.0);
        let p0 = solve_dare(&Matrix::zeros(1, 1), &one, &one, &one).unwrap();
        assert!((p0[(0, 0)] - 1.0).abs() < 1e-15);

        let p = solve_dare(&Matrix::from_element(1, 1, 0.5), &one, &one, &one).unwrap();
        let exact = (0.25 + 4.0625f64.sqrt()) / 2.0;
        assert!((p[(0, 0)] - exact).abs() < 1e-12);
    }

    #[test]
    fn dare_unstabilizable_fails() {
        // unstable mode with no input authority
        let a = Matrix::from_element(1, 1, 1.2);
        let b = Matrix::zeros(1, 1);
        let one = Matrix::from_element(1, 1, 1.0);
        assert!(matches!(solve_dare(&a, &b, &one, &one), Err(Error::NoConvergence { .. })));
    }

    #[test]
    fn spectral_radius_cases() {
        assert!((spectral_radius(&Matrix::identity(4, 4)).unwrap() - 1.0).abs() < 1e-12);
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![0.7, 0.9, 0.8, 0.49, 0.343, 0.16807]));
        assert!((spectral_radius(&d).unwrap() - 0.9).abs() < 1e-12);
        let nil = Matrix::from_row_slice(3, 3, &[0.0, 1.0, 2.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0]);
        assert!(spectral_radius(&nil).unwrap() < 1e-12);
        // rotation: complex pair of modulus 0.5
        let rot = Matrix::from_row_slice(2, 2, &[0.0, -0.5, 0.5, 0.0]);
        assert!((spectral_radius(&rot).unwrap() - 0.5).abs() < 1e-12);
    }
}
