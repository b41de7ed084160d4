//! Input-output datasets: collection, persistence, Hankel matrices and the
//! persistence-of-excitation rank test.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json;
use crate::numerics::{rank_with_tolerance, Matrix, Vector};
use crate::systems::{Plant, Trajectory, DIVERGENCE_GUARD};

/// RNG stream offsets so that inputs, initial states and noise of the same
/// trajectory index never share a stream.
const NOISE_STREAM: u64 = 1 << 32;

/// Distribution on `R^d` used for inputs and initial states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleLaw {
    Zero,
    /// Independent uniform entries on `(low, high)`.
    Uniform { low: f64, high: f64 },
}

impl SampleLaw {
    pub fn uniform(low: f64, high: f64) -> Self {
        SampleLaw::Uniform { low, high }
    }

    fn sample<R: Rng>(&self, dim: usize, rng: &mut R) -> Vector {
        match *self {
            SampleLaw::Zero => Vector::zeros(dim),
            SampleLaw::Uniform { low, high } => Vector::from_fn(dim, |_, _| rng.random_range(low..high)),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            SampleLaw::Uniform { low, high } if !(low < high) || !low.is_finite() || !high.is_finite() => {
                Err(Error::input(format!("uniform law needs finite low < high, got ({low}, {high})")))
            }
            _ => Ok(()),
        }
    }
}

/// Additive Gaussian corruption injected while collecting data.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation of measurement noise on every output sample.
    pub output_sigma: f64,
    /// Standard deviation of additive noise on every state transition.
    pub state_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectionSpec {
    pub nu: usize,
    pub ell: usize,
    pub input_law: SampleLaw,
    pub x0_law: SampleLaw,
    pub noise: NoiseSpec,
    pub seed: u64,
}

/// `nu` trajectories of `ell + 1` input and output samples each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    m: usize,
    p: usize,
    ell: usize,
    seed: u64,
    trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(m: usize, p: usize, ell: usize, seed: u64, trajectories: Vec<Trajectory>) -> Result<Self> {
        if m == 0 || p == 0 || ell == 0 {
            return Err(Error::input("dataset dimensions m, p, ell must be positive"));
        }
        if trajectories.is_empty() {
            return Err(Error::input("dataset needs at least one trajectory"));
        }
        for (j, t) in trajectories.iter().enumerate() {
            check_samples(&t.inputs, ell + 1, m, &format!("trajectories[{j}].u"))?;
            check_samples(&t.outputs, ell + 1, p, &format!("trajectories[{j}].y"))?;
        }
        let trajectories = trajectories
            .into_iter()
            .map(|mut t| {
                t.states = None;
                t
            })
            .collect();
        Ok(Dataset {
            m,
            p,
            ell,
            seed,
            trajectories,
        })
    }

    /// Slices one long trajectory into overlapping windows of `ell + 1`
    /// samples with stride 1.
    pub fn from_long_trajectory(long: &Trajectory, ell: usize, seed: u64) -> Result<Self> {
        if long.len() < ell + 1 {
            return Err(Error::input(format!(
                "trajectory of length {} is shorter than one window ({})",
                long.len(),
                ell + 1
            )));
        }
        let m = long.inputs[0].len();
        let p = long.outputs[0].len();
        let windows = (0..=long.len() - (ell + 1))
            .map(|s| Trajectory::new(long.inputs[s..s + ell + 1].to_vec(), long.outputs[s..s + ell + 1].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(m, p, ell, seed, windows)
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn output_dim(&self) -> usize {
        self.p
    }

    pub fn ell(&self) -> usize {
        self.ell
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Rows of the PE Hankel matrix: `m(ell+1) + p ell`.
    pub fn hankel_rows(&self) -> usize {
        self.m * (self.ell + 1) + self.p * self.ell
    }

    /// Number of trajectories required by the rank condition for `eta_bound`.
    pub fn required_rank(&self, eta_bound: usize) -> usize {
        self.m * (self.ell + 1) + eta_bound
    }

    pub fn with_trajectories(&self, trajectories: Vec<Trajectory>) -> Result<Self> {
        Dataset::new(self.m, self.p, self.ell, self.seed, trajectories)
    }

    pub fn to_json(&self) -> Result<String> {
        json::to_string(&DatasetFile::from(self))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(text)?;
        file.into_dataset()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Dataset::from_json(&std::fs::read_to_string(path)?)
    }
}

fn check_samples(samples: &[Vector], len: usize, dim: usize, path: &str) -> Result<()> {
    if samples.len() != len {
        return Err(Error::Schema {
            path: path.to_string(),
            message: format!("expected {len} samples, found {}", samples.len()),
        });
    }
    for (t, s) in samples.iter().enumerate() {
        if s.len() != dim {
            return Err(Error::Schema {
                path: format!("{path}[{t}]"),
                message: format!("expected {dim} entries, found {}", s.len()),
            });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema {
                path: format!("{path}[{t}]"),
                message: "non-finite sample".into(),
            });
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TrajectoryFile {
    #[serde(with = "json::vector_list")]
    u: Vec<Vector>,
    #[serde(with = "json::vector_list")]
    y: Vec<Vector>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    m: usize,
    p: usize,
    ell: usize,
    seed: u64,
    trajectories: Vec<TrajectoryFile>,
}

impl From<&Dataset> for DatasetFile {
    fn from(d: &Dataset) -> Self {
        DatasetFile {
            m: d.m,
            p: d.p,
            ell: d.ell,
            seed: d.seed,
            trajectories: d
                .trajectories
                .iter()
                .map(|t| TrajectoryFile {
                    u: t.inputs.clone(),
                    y: t.outputs.clone(),
                })
                .collect(),
        }
    }
}

impl DatasetFile {
    fn into_dataset(self) -> Result<Dataset> {
        let n_samples = self.ell + 1;
        let mut trajectories = Vec::with_capacity(self.trajectories.len());
        for (j, t) in self.trajectories.into_iter().enumerate() {
            check_samples(&t.u, n_samples, self.m, &format!("trajectories[{j}].u"))?;
            check_samples(&t.y, n_samples, self.p, &format!("trajectories[{j}].y"))?;
            trajectories.push(Trajectory {
                inputs: t.u,
                outputs: t.y,
                states: None,
            });
        }
        Dataset::new(self.m, self.p, self.ell, self.seed, trajectories)
    }
}

fn trajectory_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian<R: Rng>(dim: usize, sigma: f64, rng: &mut R) -> Vector {
    Vector::from_fn(dim, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        sigma * z
    })
}

/// Simulates `spec.nu` independent trajectories of length `ell + 1`.
///
/// Trajectory `j` draws its initial state and inputs from RNG stream `j` of
/// the master seed, so the result is bit-reproducible and independent of
/// collection order.
pub fn collect_dataset(plant: &Plant, spec: &CollectionSpec) -> Result<Dataset> {
    if spec.nu == 0 || spec.ell == 0 {
        return Err(Error::input("nu and ell must be at least 1"));
    }
    spec.input_law.validate()?;
    spec.x0_law.validate()?;
    if !(spec.noise.output_sigma >= 0.0) || !(spec.noise.state_sigma >= 0.0) {
        return Err(Error::input("noise sigmas must be nonnegative"));
    }
    let (n, m, p) = (plant.state_dim(), plant.input_dim(), plant.output_dim());
    let len = spec.ell + 1;
    let trajectories = (0..spec.nu)
        .map(|j| {
            let mut rng = trajectory_rng(spec.seed, j as u64);
            let mut noise_rng = trajectory_rng(spec.seed, NOISE_STREAM + j as u64);
            let mut x = spec.x0_law.sample(n, &mut rng);
            let inputs: Vec<Vector> = (0..len).map(|_| spec.input_law.sample(m, &mut rng)).collect();
            let mut outputs = Vec::with_capacity(len);
            for (t, u) in inputs.iter().enumerate() {
                let norm = x.norm();
                if !norm.is_finite() || norm > DIVERGENCE_GUARD {
                    return Err(Error::Diverged {
                        step: t,
                        trajectory: Some(j),
                        norm,
                    });
                }
                let mut y = plant.output(&x)?;
                if spec.noise.output_sigma > 0.0 {
                    y += gaussian(p, spec.noise.output_sigma, &mut noise_rng);
                }
                outputs.push(y);
                x = plant.step(&x, u)?;
                if spec.noise.state_sigma > 0.0 {
                    x += gaussian(n, spec.noise.state_sigma, &mut noise_rng);
                }
            }
            Trajectory::new(inputs, outputs)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(m, p, spec.ell, spec.seed, trajectories)
}

/// Hankel matrices of the dataset, one column per trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelPair {
    /// `[u_0; ...; u_ell; y_0; ...; y_{ell-1}]`
    pub full: Matrix,
    /// `[u_0; ...; u_{ell-1}; y_0; ...; y_{ell-1}]`
    pub minus: Matrix,
}

pub fn build_hankel(d: &Dataset) -> HankelPair {
    let (m, p, ell) = (d.m, d.p, d.ell);
    let nu = d.len();
    let mut full = Matrix::zeros(m * (ell + 1) + p * ell, nu);
    let mut minus = Matrix::zeros(m * ell + p * ell, nu);
    for (j, traj) in d.trajectories.iter().enumerate() {
        for t in 0..=ell {
            full.view_mut((t * m, j), (m, 1)).copy_from(&traj.inputs[t]);
            if t < ell {
                minus.view_mut((t * m, j), (m, 1)).copy_from(&traj.inputs[t]);
            }
        }
        for t in 0..ell {
            full.view_mut((m * (ell + 1) + t * p, j), (p, 1)).copy_from(&traj.outputs[t]);
            minus.view_mut((m * ell + t * p, j), (p, 1)).copy_from(&traj.outputs[t]);
        }
    }
    HankelPair { full, minus }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeReport {
    pub is_pe: bool,
    pub rank: usize,
    pub required: usize,
    /// Necessary condition `nu >= m(ell+1) + eta`.
    pub enough_trajectories: bool,
    pub tolerance_used: f64,
}

/// Rank test: the data are persistently exciting for `eta_bound` iff
/// `rank(H_full) = m(ell+1) + eta_bound`.
pub fn check_pe(d: &Dataset, eta_bound: usize, tol: Option<f64>) -> Result<PeReport> {
    if eta_bound == 0 {
        return Err(Error::input("eta_bound must be at least 1"));
    }
    let hankel = build_hankel(d);
    let report = rank_with_tolerance(&hankel.full, tol)?;
    let required = d.required_rank(eta_bound);
    Ok(PeReport {
        is_pe: report.numerical_rank == required,
        rank: report.numerical_rank,
        required,
        enough_trajectories: d.len() >= required,
        tolerance_used: report.tolerance_used,
    })
}
