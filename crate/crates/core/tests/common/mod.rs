#![allow(dead_code)]

use koopql::datastore::{collect_dataset, CollectionSpec, Dataset, NoiseSpec, SampleLaw};
use koopql::numerics::{rank_with_tolerance, spectral_radius, Matrix};
use koopql::oracle::{lifted_model, observability_matrix, LiftedModel};
use koopql::systems::{Plant, PlantKey};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded observable and controllable LTI plant with spectral radius 0.8.
pub fn random_lti(seed: u64, n: usize, m: usize, p: usize) -> (Plant, LiftedModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut a = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let rho = spectral_radius(&a).unwrap();
        if rho < 1e-3 {
            continue;
        }
        a *= 0.8 / rho;
        let b = Matrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let c = Matrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0));
        let obs = observability_matrix(&a.transpose(), &b.transpose(), n);
        let ctrb_ok = rank_with_tolerance(&obs, Some(1e-6)).unwrap().numerical_rank == n;
        let obs_ok = rank_with_tolerance(&observability_matrix(&a, &c, n), Some(1e-6)).unwrap().numerical_rank == n;
        if !(ctrb_ok && obs_ok) {
            continue;
        }
        let key = PlantKey::LtiGeneric { a, b, c };
        return (Plant::from_key(&key).unwrap(), lifted_model(&key).unwrap());
    }
}

pub fn uniform_spec(nu: usize, ell: usize, seed: u64, output_sigma: f64) -> CollectionSpec {
    CollectionSpec {
        nu,
        ell,
        input_law: SampleLaw::uniform(-1.0, 1.0),
        x0_law: SampleLaw::uniform(-1.0, 1.0),
        noise: NoiseSpec {
            output_sigma,
            state_sigma: 0.0,
        },
        seed,
    }
}

pub fn collect(plant: &Plant, nu: usize, ell: usize, seed: u64) -> Dataset {
    collect_dataset(plant, &uniform_spec(nu, ell, seed, 0.0)).unwrap()
}
