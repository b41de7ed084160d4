//! Discrete-time plants, trajectory rollout and cost evaluation.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ensure_finite, min_symmetric_eigenvalue, Matrix, Vector};

/// States whose norm exceeds this value are reported as divergent.
pub const DIVERGENCE_GUARD: f64 = 1e12;
pub const DEFAULT_TAIL_TOL: f64 = 1e-14;

type StepMap = dyn Fn(&Vector, &Vector) -> Vector + Send + Sync;
type OutputMap = dyn Fn(&Vector) -> Vector + Send + Sync;

/// Builtin plants. `LtiGeneric` wraps user-supplied `(A, B, C)`.
#[derive(Debug, Clone, PartialEq)]
pub enum PlantKey {
    PaperSec4,
    ScalarStable,
    LtiGeneric { a: Matrix, b: Matrix, c: Matrix },
}

impl PlantKey {
    pub fn name(&self) -> &'static str {
        match self {
            PlantKey::PaperSec4 => "paper_sec4",
            PlantKey::ScalarStable => "scalar_stable",
            PlantKey::LtiGeneric { .. } => "lti_generic",
        }
    }
}

/// A discrete-time plant `x+ = f(x, u)`, `y = h(x)` with `f(0,0) = 0`, `h(0) = 0`.
#[derive(Clone)]
pub struct Plant {
    name: String,
    n: usize,
    m: usize,
    p: usize,
    step_map: Arc<StepMap>,
    output_map: Arc<OutputMap>,
}

impl fmt::Debug for Plant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Plant")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("p", &self.p)
            .finish_non_exhaustive()
    }
}

impl Plant {
    pub fn new<F, H>(name: impl Into<String>, n: usize, m: usize, p: usize, step_map: F, output_map: H) -> Result<Self>
    where
        F: Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static,
        H: Fn(&Vector) -> Vector + Send + Sync + 'static,
    {
        if n == 0 || m == 0 || p == 0 {
            return Err(Error::input("plant dimensions must be positive"));
        }
        let plant = Plant {
            name: name.into(),
            n,
            m,
            p,
            step_map: Arc::new(step_map),
            output_map: Arc::new(output_map),
        };
        let x1 = plant.step(&Vector::zeros(n), &Vector::zeros(m))?;
        let y0 = plant.output(&Vector::zeros(n))?;
        if x1.amax() != 0.0 || y0.amax() != 0.0 {
            return Err(Error::input("plant must satisfy f(0,0) = 0 and h(0) = 0"));
        }
        Ok(plant)
    }

    pub fn lti(a: Matrix, b: Matrix, c: Matrix) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || b.nrows() != n || c.ncols() != n {
            return Err(Error::input(format!(
                "inconsistent LTI dimensions: A {}x{}, B {}x{}, C {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols()
            )));
        }
        for (mat, name) in [(&a, "A"), (&b, "B"), (&c, "C")] {
            ensure_finite(mat, name)?;
        }
        let (m, p) = (b.ncols(), c.nrows());
        Plant::new("lti_generic", n, m, p, move |x, u| &a * x + &b * u, move |x| &c * x)
    }

    /// Three-state polynomial plant with two inputs and full-state output:
    /// `x1+ = 0.7 x1`, `x2+ = 0.9 x2 + x1^3 - x1^2 + u1`, `x3+ = 0.8 x3 - x2 + x1^5 + u2`.
    pub fn paper_sec4() -> Self {
        Plant::new(
            "paper_sec4",
            3,
            2,
            3,
            |x, u| {
                let x1 = x[0];
                Vector::from_vec(vec![
                    0.7 * x1,
                    0.9 * x[1] + x1.powi(3) - x1.powi(2) + u[0],
                    0.8 * x[2] - x[1] + x1.powi(5) + u[1],
                ])
            },
            |x| x.clone(),
        )
        .expect("builtin plant is valid")
    }

    /// `x+ = 0.5 x + u`, `y = x`.
    pub fn scalar_stable() -> Self {
        let mut plant = Plant::lti(
            Matrix::from_element(1, 1, 0.5),
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, 1.0),
        )
        .expect("builtin plant is valid");
        plant.name = "scalar_stable".into();
        plant
    }

    pub fn from_key(key: &PlantKey) -> Result<Self> {
        match key {
            PlantKey::PaperSec4 => Ok(Plant::paper_sec4()),
            PlantKey::ScalarStable => Ok(Plant::scalar_stable()),
            PlantKey::LtiGeneric { a, b, c } => Plant::lti(a.clone(), b.clone(), c.clone()),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn output_dim(&self) -> usize {
        self.p
    }

    pub fn step(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        if x.len() != self.n || u.len() != self.m {
            return Err(Error::input(format!(
                "step expects x in R^{} and u in R^{}, got {} and {}",
                self.n,
                self.m,
                x.len(),
                u.len()
            )));
        }
        Ok((self.step_map)(x, u))
    }

    pub fn output(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.n {
            return Err(Error::input(format!("output expects x in R^{}, got {}", self.n, x.len())));
        }
        let y = (self.output_map)(x);
        if y.len() != self.p {
            return Err(Error::input(format!("output map returned {} entries, expected {}", y.len(), self.p)));
        }
        Ok(y)
    }
}

/// Input/output record of equal length. `states` is only filled by
/// simulation helpers that are asked to keep it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub inputs: Vec<Vector>,
    pub outputs: Vec<Vector>,
    pub states: Option<Vec<Vector>>,
}

impl Trajectory {
    pub fn new(inputs: Vec<Vector>, outputs: Vec<Vector>) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != outputs.len() {
            return Err(Error::input(format!(
                "trajectory needs equal, nonzero input/output lengths (got {} and {})",
                inputs.len(),
                outputs.len()
            )));
        }
        if inputs.iter().chain(outputs.iter()).any(|v| v.iter().any(|e| !e.is_finite())) {
            return Err(Error::input("trajectory contains non-finite samples"));
        }
        Ok(Trajectory {
            inputs,
            outputs,
            states: None,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Quadratic stage weights `y' Q y + u' R u` with `Q, R` positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    q: Matrix,
    r: Matrix,
}

impl CostSpec {
    pub fn new(q: Matrix, r: Matrix) -> Result<Self> {
        for (mat, name) in [(&q, "Q"), (&r, "R")] {
            if !mat.is_square() || mat.is_empty() {
                return Err(Error::input(format!("{name} must be square and nonempty")));
            }
            ensure_finite(mat, name)?;
            if (mat - mat.transpose()).amax() > 1e-12 * (1.0 + mat.amax()) {
                return Err(Error::input(format!("{name} must be symmetric")));
            }
            let lambda = min_symmetric_eigenvalue(mat);
            if !(lambda > 0.0) {
                return Err(Error::input(format!("{name} must be positive definite (min eigenvalue {lambda:.3e})")));
            }
        }
        Ok(CostSpec { q, r })
    }

    pub fn identity(p: usize, m: usize) -> Self {
        CostSpec {
            q: Matrix::identity(p, p),
            r: Matrix::identity(m, m),
        }
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn r(&self) -> &Matrix {
        &self.r
    }

    pub fn output_dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.r.nrows()
    }

    /// `blkdiag(Q, R)`.
    pub fn stacked_weight(&self) -> Matrix {
        let (p, m) = (self.output_dim(), self.input_dim());
        let mut w = Matrix::zeros(p + m, p + m);
        w.view_mut((0, 0), (p, p)).copy_from(&self.q);
        w.view_mut((p, p), (m, m)).copy_from(&self.r);
        w
    }

    pub fn stage(&self, y: &Vector, u: &Vector) -> f64 {
        (y.transpose() * &self.q * y)[(0, 0)] + (u.transpose() * &self.r * u)[(0, 0)]
    }
}

pub fn step(plant: &Plant, x: &Vector, u: &Vector) -> Result<Vector> {
    plant.step(x, u)
}

fn guard(x: &Vector, step: usize) -> Result<()> {
    let norm = x.norm();
    if norm.is_finite() && norm <= DIVERGENCE_GUARD {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            trajectory: None,
            norm,
        })
    }
}

/// Simulates the plant from `x0` under `inputs`; `outputs[t] = h(x_t)`.
pub fn simulate(plant: &Plant, x0: &Vector, inputs: &[Vector], record_states: bool) -> Result<Trajectory> {
    if x0.len() != plant.state_dim() {
        return Err(Error::input(format!("x0 has {} entries, plant state has {}", x0.len(), plant.state_dim())));
    }
    let mut x = x0.clone();
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut states = record_states.then(|| Vec::with_capacity(inputs.len()));
    for (t, u) in inputs.iter().enumerate() {
        guard(&x, t)?;
        outputs.push(plant.output(&x)?);
        if let Some(s) = states.as_mut() {
            s.push(x.clone());
        }
        x = plant.step(&x, u)?;
    }
    let mut traj = Trajectory::new(inputs.to_vec(), outputs)?;
    traj.states = states;
    Ok(traj)
}

/// A feedback law queried once per step with the current state and output.
///
/// Output-feedback controllers ignore `state`; it is there for oracle
/// state-feedback laws. Stateful controllers keep their own history.
pub trait Controller {
    fn control(&mut self, state: &Vector, output: &Vector) -> Result<Vector>;
}

impl<F> Controller for F
where
    F: FnMut(&Vector, &Vector) -> Vector,
{
    fn control(&mut self, state: &Vector, output: &Vector) -> Result<Vector> {
        Ok(self(state, output))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutCost {
    pub cost: f64,
    /// Number of stage costs accumulated.
    pub steps: usize,
    /// True when the sum was truncated because the stage cost fell below the
    /// tail tolerance, false when the horizon ran out.
    pub converged: bool,
}

/// Truncated evaluation of the infinite-horizon quadratic cost.
pub fn rollout_cost(
    plant: &Plant,
    x0: &Vector,
    controller: &mut dyn Controller,
    cost: &CostSpec,
    horizon: usize,
    tail_tol: f64,
) -> Result<RolloutCost> {
    if horizon == 0 {
        return Err(Error::input("horizon must be at least 1"));
    }
    if cost.output_dim() != plant.output_dim() || cost.input_dim() != plant.input_dim() {
        return Err(Error::input("cost weights do not match plant dimensions"));
    }
    let mut x = x0.clone();
    let mut total = 0.0;
    for t in 0..horizon {
        guard(&x, t)?;
        let y = plant.output(&x)?;
        let u = controller.control(&x, &y)?;
        if u.len() != plant.input_dim() {
            return Err(Error::input(format!("controller returned {} inputs, expected {}", u.len(), plant.input_dim())));
        }
        let stage = cost.stage(&y, &u);
        if stage < tail_tol {
            return Ok(RolloutCost {
                cost: total,
                steps: t,
                converged: true,
            });
        }
        total += stage;
        x = plant.step(&x, &u)?;
    }
    Ok(RolloutCost {
        cost: total,
        steps: horizon,
        converged: false,
    })
}

pub fn lift(psi: &dyn Fn(&Vector) -> Vector, x: &Vector) -> Vector {
    psi(x)
}

/// Monomial lifting `(x1, x2, x3, x1^2, x1^3, x1^5)` of the builtin polynomial plant.
pub fn paper_sec4_lifting(x: &Vector) -> Vector {
    let x1 = x[0];
    Vector::from_vec(vec![x1, x[1], x[2], x1.powi(2), x1.powi(3), x1.powi(5)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn sec4_step_examples() {
        let plant = Plant::paper_sec4();
        assert_eq!(plant.step(&v(&[1.0, 0.0, 0.0]), &v(&[0.0, 0.0])).unwrap(), v(&[0.7, 0.0, 1.0]));
        assert_eq!(plant.step(&v(&[0.0, 0.0, 0.0]), &v(&[1.0, 2.0])).unwrap(), v(&[0.0, 1.0, 2.0]));
        assert_eq!(plant.step(&Vector::zeros(3), &Vector::zeros(2)).unwrap(), Vector::zeros(3));
    }

    #[test]
    fn step_rejects_bad_dimensions() {
        let plant = Plant::paper_sec4();
        assert!(plant.step(&Vector::zeros(2), &Vector::zeros(2)).is_err());
        assert!(plant.step(&Vector::zeros(3), &Vector::zeros(3)).is_err());
    }

    #[test]
    fn plant_must_fix_origin() {
        let r = Plant::new("shifted", 1, 1, 1, |x, u| x + u + Vector::from_element(1, 1.0), |x| x.clone());
        assert!(r.is_err());
    }

    #[test]
    fn simulate_zero_and_decay() {
        let plant = Plant::paper_sec4();
        let zeros = vec![Vector::zeros(2); 10];
        let traj = simulate(&plant, &Vector::zeros(3), &zeros, false).unwrap();
        assert!(traj.outputs.iter().all(|y| y.amax() == 0.0));

        let inputs = vec![Vector::zeros(2); 201];
        let traj = simulate(&plant, &v(&[1.0, 1.0, 1.0]), &inputs, true).unwrap();
        assert!(traj.outputs[200].norm() < 1e-6);
        assert_eq!(traj.states.unwrap().len(), 201);
    }

    #[test]
    fn simulate_detects_divergence() {
        let plant = Plant::lti(
            Matrix::from_element(1, 1, 10.0),
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let inputs = vec![Vector::zeros(1); 50];
        match simulate(&plant, &v(&[1.0]), &inputs, false) {
            Err(Error::Diverged { step: 13, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn simulate_matches_step() {
        let plant = Plant::paper_sec4();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = Vector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let u = Vector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let traj = simulate(&plant, &x, &[u.clone(), Vector::zeros(2)], false).unwrap();
            assert_eq!(traj.outputs[1], plant.output(&plant.step(&x, &u).unwrap()).unwrap());
        }
    }

    #[test]
    fn rollout_cost_cases() {
        let plant = Plant::scalar_stable();
        let cost = CostSpec::identity(1, 1);
        let mut zero = |_: &Vector, _: &Vector| Vector::zeros(1);
        let r = rollout_cost(&plant, &Vector::zeros(1), &mut zero, &cost, 100, DEFAULT_TAIL_TOL).unwrap();
        assert_eq!((r.cost, r.steps, r.converged), (0.0, 0, true));

        let r = rollout_cost(&plant, &v(&[1.0]), &mut zero, &cost, 1000, DEFAULT_TAIL_TOL).unwrap();
        assert!(r.converged);
        assert!((r.cost - 4.0 / 3.0).abs() < 1e-13);

        let r = rollout_cost(&plant, &v(&[1.0]), &mut zero, &cost, 3, DEFAULT_TAIL_TOL).unwrap();
        assert!(!r.converged);
        assert!((r.cost - (1.0 + 0.25 + 0.0625)).abs() < 1e-15);
    }

    #[test]
    fn cost_spec_validation() {
        assert!(CostSpec::new(Matrix::identity(2, 2), Matrix::identity(1, 1)).is_ok());
        assert!(CostSpec::new(Matrix::zeros(2, 2), Matrix::identity(1, 1)).is_err());
        let asym = Matrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 1.0]);
        assert!(CostSpec::new(asym, Matrix::identity(1, 1)).is_err());
    }

    #[test]
    fn sec4_lifting_examples() {
        assert_eq!(paper_sec4_lifting(&Vector::zeros(3)), Vector::zeros(6));
        assert_eq!(lift(&paper_sec4_lifting, &v(&[1.0, 2.0, 3.0])), v(&[1.0, 2.0, 3.0, 1.0, 1.0, 1.0]));
        assert_eq!(paper_sec4_lifting(&v(&[2.0, 0.0, 0.0])), v(&[2.0, 0.0, 0.0, 4.0, 8.0, 32.0]));
    }
}
