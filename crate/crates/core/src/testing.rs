//! Seeded random model family used by the oracle checks and tests.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::model::{
    ChmmModel, Dims, EmissionStep, GaussianPrior, LinearPolicy, PolicyStep, TransitionStep,
};

pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn random_vector<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// `scale * (A A^T / n + I / 2)`, comfortably positive definite.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> DMatrix<f64> {
    let a = random_matrix(rng, n, n, 1.0);
    let m = (&a * a.transpose()) / n as f64 + DMatrix::identity(n, n) * 0.5;
    crate::linalg::symmetrize(&(m * scale))
}

#[derive(Debug, Clone, Copy)]
pub struct RandomModelSpec {
    pub n_x: usize,
    pub n_u: usize,
    pub n_z: usize,
    pub steps: usize,
    /// Overrides the process noise with `qcov_scale * I` when set.
    pub qcov_scale: Option<f64>,
}

impl RandomModelSpec {
    /// Dimensions drawn from the small family used by the equivalence checks:
    /// `n_x <= 3`, `n_u <= 2`, `n_z <= 2`, `steps <= 10`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            n_x: rng.gen_range(1..=3),
            n_u: rng.gen_range(1..=2),
            n_z: rng.gen_range(1..=2),
            steps: rng.gen_range(2..=10),
            qcov_scale: None,
        }
    }
}

/// Time-varying random model with moderately conditioned parameters.
pub fn random_model<R: Rng + ?Sized>(rng: &mut R, spec: RandomModelSpec) -> ChmmModel {
    let RandomModelSpec { n_x, n_u, n_z, steps, qcov_scale } = spec;
    let transitions = (0..steps - 1)
        .map(|_| {
            let fx = DMatrix::identity(n_x, n_x) * 0.8 + random_matrix(rng, n_x, n_x, 0.3 / (n_x as f64).sqrt());
            let qcov = match qcov_scale {
                Some(s) => DMatrix::identity(n_x, n_x) * s,
                None => random_spd(rng, n_x, 0.3),
            };
            TransitionStep::new(fx, random_matrix(rng, n_x, n_u, 0.5), random_vector(rng, n_x, 0.3), qcov)
        })
        .collect();
    let emissions = (0..steps)
        .map(|_| {
            EmissionStep::new(
                random_matrix(rng, n_z, n_x, 1.0),
                random_matrix(rng, n_z, n_u, 0.5),
                random_vector(rng, n_z, 0.3),
                random_spd(rng, n_z, 0.5),
            )
        })
        .collect();
    let policy = (0..steps)
        .map(|_| {
            PolicyStep::new(
                random_matrix(rng, n_u, n_x, 0.3),
                random_vector(rng, n_u, 0.5),
                random_spd(rng, n_u, 0.8),
            )
        })
        .collect();
    ChmmModel::new(
        Dims { n_x, n_u, n_z, steps, dt: 0.1 },
        GaussianPrior {
            mean: random_vector(rng, n_x, 1.0),
            cov: random_spd(rng, n_x, 1.0),
        },
        transitions,
        emissions,
        LinearPolicy::new(policy),
    )
    .expect("random model family is valid by construction")
}

/// Draws one measurement sequence from the model under its own prior policy.
pub fn sample_measurements<R: Rng + ?Sized>(rng: &mut R, model: &ChmmModel) -> Vec<DVector<f64>> {
    let d = model.dims;
    let draw = |rng: &mut R, cov: &DMatrix<f64>| {
        let l = crate::linalg::psd_factor(cov);
        let e = random_vector(rng, cov.nrows(), 1.0);
        l * e
    };
    let mut x = &model.prior.mean + draw(rng, &model.prior.cov);
    let mut zs = Vec::with_capacity(d.steps);
    for t in 0..d.steps {
        let pol = &model.prior_policy.steps[t];
        let u = pol.mean(&x) + draw(rng, &pol.cov);
        let e = &model.emissions[t];
        zs.push(&e.gx * &x + &e.gu * &u + &e.g + draw(rng, &e.rcov));
        if t + 1 < d.steps {
            let tr = &model.transitions[t];
            x = &tr.fx * &x + &tr.fu * &u + &tr.f + draw(rng, &tr.qcov);
        }
    }
    zs
}
