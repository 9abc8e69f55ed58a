//! Forward-backward Gaussian inference on the model closed under its prior
//! policy.
//!
//! The filter carries the joint state-action `xi_t = (x_t, u_t)` rather than
//! marginalizing the control into closed-loop transition and emission noises:
//! when the emission depends on `u` those two noises are correlated through
//! the policy noise, and the joint form stays exact.

pub mod oracle;

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{ApcdError, Result};
use crate::linalg::{cholesky, gaussian_log_density, symmetrize};
use crate::model::{ChmmModel, PolicyStep};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMarginal {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMarginal {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }

    /// Leading `n` coordinates.
    pub fn head(&self, n: usize) -> GaussianMarginal {
        GaussianMarginal {
            mean: self.mean.rows(0, n).into_owned(),
            cov: self.cov.view((0, 0), (n, n)).into_owned(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FilterResult {
    /// `p(x_t | z_0..z_{t-1})`
    pub predicted: Vec<GaussianMarginal>,
    /// `p(x_t | z_0..z_t)`
    pub filtered: Vec<GaussianMarginal>,
    /// `p(x_t, u_t | z_0..z_t)`
    pub filtered_joint: Vec<GaussianMarginal>,
    /// `log p(z_t | z_0..z_{t-1})`; sums to `log p(Z)`.
    pub log_evidence: Vec<f64>,
}

impl FilterResult {
    pub fn total_log_evidence(&self) -> f64 {
        self.log_evidence.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct Smoothed {
    /// `p(x_t | Z)`
    pub states: Vec<GaussianMarginal>,
    /// `p(x_t, u_t | Z)`
    pub joint: Vec<GaussianMarginal>,
}

fn augment(pred: &GaussianMarginal, pol: &PolicyStep) -> GaussianMarginal {
    let n_x = pred.mean.len();
    let n_u = pol.offset.len();
    let mut mean = DVector::zeros(n_x + n_u);
    mean.rows_mut(0, n_x).copy_from(&pred.mean);
    mean.rows_mut(n_x, n_u).copy_from(&pol.mean(&pred.mean));
    let pk = &pred.cov * pol.gain.transpose();
    let mut cov = DMatrix::zeros(n_x + n_u, n_x + n_u);
    cov.view_mut((0, 0), (n_x, n_x)).copy_from(&pred.cov);
    cov.view_mut((0, n_x), (n_x, n_u)).copy_from(&pk);
    cov.view_mut((n_x, 0), (n_u, n_x)).copy_from(&pk.transpose());
    cov.view_mut((n_x, n_x), (n_u, n_u))
        .copy_from(&(&pol.gain * &pk + &pol.cov));
    GaussianMarginal::new(mean, symmetrize(&cov))
}

/// Kalman filter on the model under `model.prior_policy`.
pub fn kalman_filter(model: &ChmmModel, z: &[DVector<f64>]) -> Result<FilterResult> {
    let d = model.dims;
    if z.len() != d.steps {
        return Err(ApcdError::Shape(format!(
            "measurement sequence has {} entries, model has {} steps",
            z.len(),
            d.steps
        )));
    }
    let n_xi = d.n_xi();
    let mut out = FilterResult {
        predicted: Vec::with_capacity(d.steps),
        filtered: Vec::with_capacity(d.steps),
        filtered_joint: Vec::with_capacity(d.steps),
        log_evidence: Vec::with_capacity(d.steps),
    };
    let mut pred = GaussianMarginal::new(model.prior.mean.clone(), model.prior.cov.clone());
    for (t, zt) in z.iter().enumerate() {
        let prior_xi = augment(&pred, &model.prior_policy.steps[t]);
        let em = &model.emissions[t];
        let g = em.g_xi();
        let innov_cov = symmetrize(&(&g * &prior_xi.cov * g.transpose() + &em.rcov));
        let chol = cholesky(&innov_cov).ok_or(ApcdError::DegenerateEmission { t })?;
        let z_mean = &g * &prior_xi.mean + &em.g;
        out.log_evidence.push(gaussian_log_density(zt, &z_mean, &chol));
        // gain^T = S^-1 G P
        let gain = chol.solve(&(&g * &prior_xi.cov)).transpose();
        let mean = &prior_xi.mean + &gain * (zt - &z_mean);
        let i_kg = DMatrix::identity(n_xi, n_xi) - &gain * &g;
        let cov = &i_kg * &prior_xi.cov * i_kg.transpose() + &gain * &em.rcov * gain.transpose();
        let post_xi = GaussianMarginal::new(mean, symmetrize(&cov));

        out.predicted.push(pred.clone());
        out.filtered.push(post_xi.head(d.n_x));
        if t + 1 < d.steps {
            let tr = &model.transitions[t];
            let f = tr.f_xi();
            pred = GaussianMarginal::new(
                &f * &post_xi.mean + &tr.f,
                symmetrize(&(&f * &post_xi.cov * f.transpose() + &tr.qcov)),
            );
        }
        out.filtered_joint.push(post_xi);
    }
    Ok(out)
}

/// Rauch-Tung-Striebel smoother over the filter's state-action marginals.
pub fn rts_smoother(filter: &FilterResult, model: &ChmmModel) -> Result<Smoothed> {
    let steps = filter.filtered_joint.len();
    let n_x = model.dims.n_x;
    let mut joint = vec![filter.filtered_joint[steps - 1].clone(); steps];
    for t in (0..steps - 1).rev() {
        let filt = &filter.filtered_joint[t];
        let pred = &filter.predicted[t + 1];
        let next = joint[t + 1].head(n_x);
        let f = model.transitions[t].f_xi();
        let chol = cholesky(&pred.cov).ok_or(ApcdError::DegenerateTransition { t: t + 1 })?;
        // J = P_filt F^T P_pred^-1
        let j = chol.solve(&(&f * &filt.cov)).transpose();
        let mean = &filt.mean + &j * (&next.mean - &pred.mean);
        let cov = &filt.cov + &j * (&next.cov - &pred.cov) * j.transpose();
        joint[t] = GaussianMarginal::new(mean, symmetrize(&cov));
    }
    let states = joint.iter().map(|m| m.head(n_x)).collect();
    Ok(Smoothed { states, joint })
}

/// Filter and smoother for one measurement sequence.
pub fn smooth_sequence(model: &ChmmModel, z: &[DVector<f64>]) -> Result<Smoothed> {
    let filter = kalman_filter(model, z)?;
    rts_smoother(&filter, model)
}

/// Writes smoothed state means as CSV with columns `t, x1..xn`.
pub fn write_smoothed_means_csv(path: &Path, states: &[GaussianMarginal]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| ApcdError::io(path.display().to_string(), e))?;
    let n = states.first().map(|s| s.mean.len()).unwrap_or(0);
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=n).map(|i| format!("x{i}")))
        .collect();
    let mut buf = header.join(",") + "\n";
    for (t, s) in states.iter().enumerate() {
        buf.push_str(&t.to_string());
        for v in s.mean.iter() {
            buf.push_str(&format!(",{v}"));
        }
        buf.push('\n');
    }
    file.write_all(buf.as_bytes())
        .map_err(|e| ApcdError::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::oracle::JointGaussian;
    use super::*;
    use crate::linalg::{is_psd, rel_err, rel_err_vec};
    use crate::model::{Dims, EmissionStep, GaussianPrior, LinearPolicy, TransitionStep};
    use crate::testing::{random_model, random_spd, random_vector, sample_measurements, RandomModelSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_marginal_close(a: &GaussianMarginal, b: &GaussianMarginal, tol: f64) {
        let em = rel_err_vec(&a.mean, &b.mean, 1e-12);
        let ec = rel_err(&a.cov, &b.cov, 1e-12);
        assert!(em < tol && ec < tol, "mean rel err {em:e}, cov rel err {ec:e}");
    }

    #[test]
    fn uninformative_measurements_leave_prediction_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = random_model(&mut rng, RandomModelSpec { n_x: 2, n_u: 1, n_z: 2, steps: 6, qcov_scale: None });
        for e in &mut model.emissions {
            e.rcov = DMatrix::identity(2, 2) * 1e12;
        }
        let z = sample_measurements(&mut rng, &model);
        let f = kalman_filter(&model, &z).unwrap();
        for (p, q) in f.predicted.iter().zip(&f.filtered) {
            assert_marginal_close(p, q, 1e-4);
        }
    }

    #[test]
    fn first_step_is_bayes_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = random_model(&mut rng, RandomModelSpec { n_x: 2, n_u: 2, n_z: 2, steps: 2, qcov_scale: None });
        let z = sample_measurements(&mut rng, &model);
        let f = kalman_filter(&model, &z).unwrap();

        // direct formula on (x0, u0) ~ N(m, C), z0 = G xi + g + r
        let pol = &model.prior_policy.steps[0];
        let m = &model.prior.mean;
        let p = &model.prior.cov;
        let mean_xi = crate::linalg::vstack_vec(m, &pol.mean(m));
        let c = crate::linalg::block_diag(p, &pol.cov);
        let mut lift = DMatrix::identity(4, 4);
        lift.view_mut((2, 0), (2, 2)).copy_from(&pol.gain);
        let cov_xi = &lift * c * lift.transpose();
        let e = &model.emissions[0];
        let g = e.g_xi();
        let s = &g * &cov_xi * g.transpose() + &e.rcov;
        let s_inv = s.try_inverse().unwrap();
        let gain = &cov_xi * g.transpose() * s_inv;
        let post_mean = &mean_xi + &gain * (&z[0] - &g * &mean_xi - &e.g);
        let post_cov = &cov_xi - &gain * &g * &cov_xi;
        let expected = GaussianMarginal::new(post_mean, post_cov).head(2);
        assert_marginal_close(&f.filtered[0], &expected, 1e-12);
    }

    #[test]
    fn filter_and_smoother_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let spec = RandomModelSpec::sample(&mut rng);
            let model = random_model(&mut rng, spec);
            let z = sample_measurements(&mut rng, &model);
            let filter = kalman_filter(&model, &z).unwrap();
            let smoothed = rts_smoother(&filter, &model).unwrap();
            let joint = JointGaussian::build(&model, &model.prior_policy).unwrap();
            let post = joint.condition(&z).unwrap();
            for t in 0..spec.steps {
                assert_marginal_close(&smoothed.states[t], &post.state_marginal(t), 1e-10);
                assert_marginal_close(&smoothed.joint[t], &post.state_action_marginal(t), 1e-10);
                // filtered marginal = oracle conditioned on the prefix
                if t >= 1 {
                    let short = truncate(&model, t + 1);
                    let prefix = JointGaussian::build(&short, &short.prior_policy)
                        .unwrap()
                        .condition(&z[..=t])
                        .unwrap();
                    assert_marginal_close(&filter.filtered[t], &prefix.state_marginal(t), 1e-10);
                }
            }
            let ev = joint.log_evidence(&z).unwrap();
            assert!((filter.total_log_evidence() - ev).abs() < 1e-8, "{} vs {ev}", filter.total_log_evidence());
        }
    }

    fn truncate(model: &ChmmModel, steps: usize) -> ChmmModel {
        let mut m = model.clone();
        m.dims.steps = steps;
        m.transitions.truncate(steps - 1);
        m.emissions.truncate(steps);
        m.prior_policy.steps.truncate(steps);
        m
    }

    #[test]
    fn smoother_boundary_equals_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_model(&mut rng, RandomModelSpec { n_x: 3, n_u: 2, n_z: 1, steps: 8, qcov_scale: None });
        let z = sample_measurements(&mut rng, &model);
        let f = kalman_filter(&model, &z).unwrap();
        let s = rts_smoother(&f, &model).unwrap();
        assert_eq!(s.states[7], f.filtered[7]);
        for m in &s.states {
            assert!(is_psd(&m.cov));
        }
    }

    #[test]
    fn deterministic_transition_gives_consistent_smoothed_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n_x = 2;
        let steps = 7;
        let tr = TransitionStep::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.2, 0.9]),
            DMatrix::from_row_slice(2, 1, &[0.0, 0.1]),
            DVector::from_vec(vec![0.05, -0.02]),
            DMatrix::zeros(2, 2),
        );
        let em = EmissionStep::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(1, 1),
            DVector::zeros(1),
            DMatrix::identity(1, 1) * 0.1,
        );
        let pol = crate::model::PolicyStep::new(
            DMatrix::from_row_slice(1, 2, &[-0.5, -0.3]),
            DVector::from_element(1, 0.2),
            DMatrix::identity(1, 1) * 0.5,
        );
        let model = ChmmModel::new(
            Dims { n_x, n_u: 1, n_z: 1, steps, dt: 0.1 },
            GaussianPrior { mean: random_vector(&mut rng, 2, 1.0), cov: random_spd(&mut rng, 2, 1.0) },
            vec![tr.clone(); steps - 1],
            vec![em; steps],
            LinearPolicy::new(vec![pol; steps]),
        )
        .unwrap();
        let z = sample_measurements(&mut rng, &model);
        let s = smooth_sequence(&model, &z).unwrap();
        for t in 0..steps - 1 {
            let next = &tr.f_xi() * &s.joint[t].mean + &tr.f;
            assert!((next - &s.states[t + 1].mean).norm() < 1e-8);
        }
    }
}
