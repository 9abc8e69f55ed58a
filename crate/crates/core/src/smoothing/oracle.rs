//! Dense joint-Gaussian reference for small horizons.
//!
//! Builds the single Gaussian over `(x_0..x_T, u_0..u_T, z_0..z_T)` implied by
//! the model factorization, then conditions it on a measurement sequence by
//! block Schur complements. Everything here is `O((steps * n)^3)` and meant as
//! an independent check on the recursive filters and backward passes.

use nalgebra::{DMatrix, DVector};

use super::GaussianMarginal;
use crate::error::{ApcdError, Result};
use crate::linalg::{cholesky, gaussian_log_density, symmetrize};
use crate::model::{ChmmModel, Dims, LinearPolicy, PolicyStep};

/// Largest total dimension `steps * (n_x + n_u + n_z)` the dense oracle accepts.
pub const MAX_ORACLE_DIM: usize = 5000;

/// Diagonal regularization added before factorizing a joint covariance block.
pub const JOINT_REGULARIZATION: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
struct Layout {
    dims: Dims,
}

impl Layout {
    fn path_dim(&self) -> usize {
        self.dims.steps * self.dims.n_xi()
    }
    fn total(&self) -> usize {
        self.dims.steps * (self.dims.n_xi() + self.dims.n_z)
    }
    fn x(&self, t: usize) -> usize {
        t * self.dims.n_x
    }
    fn u(&self, t: usize) -> usize {
        self.dims.steps * self.dims.n_x + t * self.dims.n_u
    }
    fn z(&self, t: usize) -> usize {
        self.path_dim() + t * self.dims.n_z
    }
}

/// Joint Gaussian over states, controls and measurements.
#[derive(Debug, Clone)]
pub struct JointGaussian {
    layout: Layout,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Gaussian over a whole state-control path `(x_0..x_T, u_0..u_T)`.
#[derive(Debug, Clone)]
pub struct PathGaussian {
    dims: Dims,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl JointGaussian {
    /// Joint law of the model when controls follow `policy`.
    pub fn build(model: &ChmmModel, policy: &LinearPolicy) -> Result<Self> {
        let d = model.dims;
        let layout = Layout { dims: d };
        let total = layout.total();
        if total > MAX_ORACLE_DIM {
            return Err(ApcdError::Shape(format!(
                "dense oracle dimension {total} exceeds {MAX_ORACLE_DIM}"
            )));
        }
        if policy.len() != d.steps {
            return Err(ApcdError::Shape("policy length differs from model steps".into()));
        }

        // Every variable is an affine function of independent noise blocks:
        // x0, then s_t, q_t, r_t. `lift` holds those coefficients.
        let e_s = |t: usize| d.n_x + t * d.n_u;
        let e_q = |t: usize| d.n_x + d.steps * d.n_u + t * d.n_x;
        let e_r = |t: usize| d.n_x + d.steps * d.n_u + (d.steps - 1) * d.n_x + t * d.n_z;
        let n_noise = e_r(d.steps);

        let mut noise_cov = DMatrix::zeros(n_noise, n_noise);
        noise_cov.view_mut((0, 0), (d.n_x, d.n_x)).copy_from(&model.prior.cov);
        for t in 0..d.steps {
            noise_cov
                .view_mut((e_s(t), e_s(t)), (d.n_u, d.n_u))
                .copy_from(&policy.steps[t].cov);
            noise_cov
                .view_mut((e_r(t), e_r(t)), (d.n_z, d.n_z))
                .copy_from(&model.emissions[t].rcov);
        }
        for t in 0..d.steps - 1 {
            noise_cov
                .view_mut((e_q(t), e_q(t)), (d.n_x, d.n_x))
                .copy_from(&model.transitions[t].qcov);
        }

        let mut lift = DMatrix::zeros(total, n_noise);
        let mut mean = DVector::zeros(total);
        lift.view_mut((0, 0), (d.n_x, d.n_x)).fill_with_identity();
        mean.rows_mut(0, d.n_x).copy_from(&model.prior.mean);

        for t in 0..d.steps {
            let pol: &PolicyStep = &policy.steps[t];
            let lx = lift.rows(layout.x(t), d.n_x).into_owned();
            let mx = mean.rows(layout.x(t), d.n_x).into_owned();

            let mut lu = &pol.gain * &lx;
            lu.view_mut((0, e_s(t)), (d.n_u, d.n_u)).fill_with_identity();
            let mu = pol.mean(&mx);

            let em = &model.emissions[t];
            let mut lz = &em.gx * &lx + &em.gu * &lu;
            lz.view_mut((0, e_r(t)), (d.n_z, d.n_z)).fill_with_identity();
            let mz = &em.gx * &mx + &em.gu * &mu + &em.g;

            if t + 1 < d.steps {
                let tr = &model.transitions[t];
                let mut lx_next = &tr.fx * &lx + &tr.fu * &lu;
                lx_next.view_mut((0, e_q(t)), (d.n_x, d.n_x)).fill_with_identity();
                let mx_next = &tr.fx * &mx + &tr.fu * &mu + &tr.f;
                lift.rows_mut(layout.x(t + 1), d.n_x).copy_from(&lx_next);
                mean.rows_mut(layout.x(t + 1), d.n_x).copy_from(&mx_next);
            }
            lift.rows_mut(layout.u(t), d.n_u).copy_from(&lu);
            mean.rows_mut(layout.u(t), d.n_u).copy_from(&mu);
            lift.rows_mut(layout.z(t), d.n_z).copy_from(&lz);
            mean.rows_mut(layout.z(t), d.n_z).copy_from(&mz);
        }

        let cov = symmetrize(&(&lift * noise_cov * lift.transpose()));
        Ok(Self { layout, mean, cov })
    }

    /// Marginal over `(X, U)`.
    pub fn path_marginal(&self) -> PathGaussian {
        let n = self.layout.path_dim();
        PathGaussian {
            dims: self.layout.dims,
            mean: self.mean.rows(0, n).into_owned(),
            cov: self.cov.view((0, 0), (n, n)).into_owned(),
        }
    }

    /// Marginal over the stacked measurements.
    pub fn measurement_marginal(&self) -> GaussianMarginal {
        let n = self.layout.path_dim();
        let m = self.layout.total() - n;
        GaussianMarginal::new(
            self.mean.rows(n, m).into_owned(),
            self.cov.view((n, n), (m, m)).into_owned(),
        )
    }

    fn stack(&self, z: &[DVector<f64>]) -> Result<DVector<f64>> {
        let d = self.layout.dims;
        if z.len() != d.steps || z.iter().any(|v| v.len() != d.n_z) {
            return Err(ApcdError::Shape("measurement sequence shape".into()));
        }
        Ok(DVector::from_iterator(
            d.steps * d.n_z,
            z.iter().flat_map(|v| v.iter().copied()),
        ))
    }

    /// `p(X, U | Z)`
    pub fn condition(&self, z: &[DVector<f64>]) -> Result<PathGaussian> {
        let zv = self.stack(z)?;
        let n = self.layout.path_dim();
        let m = zv.len();
        let zz = self.cov.view((n, n), (m, m)).into_owned()
            + DMatrix::identity(m, m) * JOINT_REGULARIZATION;
        let chol = cholesky(&zz).ok_or(ApcdError::IllPosedJoint)?;
        let wz = self.cov.view((0, n), (n, m)).into_owned();
        let resid = zv - self.mean.rows(n, m);
        let mean = self.mean.rows(0, n) + &wz * chol.solve(&resid);
        let cov = self.cov.view((0, 0), (n, n)) - &wz * chol.solve(&wz.transpose());
        Ok(PathGaussian {
            dims: self.layout.dims,
            mean,
            cov: symmetrize(&cov),
        })
    }

    /// `log p(Z)` from the dense measurement marginal.
    pub fn log_evidence(&self, z: &[DVector<f64>]) -> Result<f64> {
        let zv = self.stack(z)?;
        let marg = self.measurement_marginal();
        let m = zv.len();
        let chol = cholesky(&(marg.cov + DMatrix::identity(m, m) * JOINT_REGULARIZATION))
            .ok_or(ApcdError::IllPosedJoint)?;
        Ok(gaussian_log_density(&zv, &marg.mean, &chol))
    }
}

impl PathGaussian {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    fn layout(&self) -> Layout {
        Layout { dims: self.dims }
    }

    pub fn state_marginal(&self, t: usize) -> GaussianMarginal {
        let i = self.layout().x(t);
        let n = self.dims.n_x;
        GaussianMarginal::new(
            self.mean.rows(i, n).into_owned(),
            self.cov.view((i, i), (n, n)).into_owned(),
        )
    }

    /// Marginal of `xi_t = (x_t, u_t)`.
    pub fn state_action_marginal(&self, t: usize) -> GaussianMarginal {
        let l = self.layout();
        let idx: Vec<usize> = (l.x(t)..l.x(t) + self.dims.n_x)
            .chain(l.u(t)..l.u(t) + self.dims.n_u)
            .collect();
        let k = idx.len();
        GaussianMarginal::new(
            DVector::from_fn(k, |i, _| self.mean[idx[i]]),
            DMatrix::from_fn(k, k, |i, j| self.cov[(idx[i], idx[j])]),
        )
    }

    /// `p(u_t | x_t, Z)` as an affine-Gaussian law in `x_t`.
    pub fn control_given_state(&self, t: usize) -> Result<PolicyStep> {
        let n_x = self.dims.n_x;
        let n_u = self.dims.n_u;
        let m = self.state_action_marginal(t);
        let cxx = m.cov.view((0, 0), (n_x, n_x)).into_owned();
        let cxu = m.cov.view((0, n_x), (n_x, n_u)).into_owned();
        let cuu = m.cov.view((n_x, n_x), (n_u, n_u)).into_owned();
        let chol = cholesky(&cxx).ok_or(ApcdError::IllPosedJoint)?;
        let gain = chol.solve(&cxu).transpose();
        let mx = m.mean.rows(0, n_x).into_owned();
        let offset = m.mean.rows(n_x, n_u) - &gain * mx;
        let cov = symmetrize(&(cuu - &gain * cxu));
        Ok(PolicyStep::new(gain, offset, cov))
    }
}

/// Smoothed machinery for one measurement sequence under the model's prior policy.
pub fn joint_gaussian_oracle(model: &ChmmModel, z: &[DVector<f64>]) -> Result<PathGaussian> {
    JointGaussian::build(model, &model.prior_policy)?.condition(z)
}

/// `D[p || q]` between two path Gaussians of equal dimension.
pub fn kl_divergence(p: &PathGaussian, q: &PathGaussian) -> Result<f64> {
    let n = p.mean.len();
    if q.mean.len() != n {
        return Err(ApcdError::Shape("KL between different dimensions".into()));
    }
    let cq = cholesky(&q.cov).ok_or(ApcdError::IllPosedJoint)?;
    let cp = cholesky(&p.cov).ok_or(ApcdError::IllPosedJoint)?;
    let log_det = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
        let l = c.l_dirty();
        2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>()
    };
    let trace = cq.solve(&p.cov).trace();
    let delta = &q.mean - &p.mean;
    let maha = delta.dot(&cq.solve(&delta));
    Ok(0.5 * (trace + maha - n as f64 + log_det(&cq) - log_det(&cp)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rel_err;
    use crate::testing::{random_model, sample_measurements, RandomModelSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uninformative_measurements_recover_prior_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = random_model(&mut rng, RandomModelSpec { n_x: 2, n_u: 2, n_z: 1, steps: 5, qcov_scale: None });
        let z = sample_measurements(&mut rng, &model);
        for e in &mut model.emissions {
            e.rcov = DMatrix::identity(1, 1) * 1e12;
        }
        let post = joint_gaussian_oracle(&model, &z).unwrap();
        for t in 0..5 {
            let c = post.control_given_state(t).unwrap();
            let rho = &model.prior_policy.steps[t];
            assert!((&c.gain - &rho.gain).norm() < 1e-6);
            assert!((&c.offset - &rho.offset).norm() < 1e-6);
            assert!((&c.cov - &rho.cov).norm() < 1e-6);
        }
    }

    /// Two steps, scalar everything: the conditional at t=1 has a slope
    /// obtained by hand from block Gaussian conditioning.
    #[test]
    fn two_step_scalar_conditional_slope() {
        let m1 = |v: f64| DMatrix::from_element(1, 1, v);
        let v1 = |v: f64| DVector::from_element(1, v);
        // x0 ~ N(0,1); u_t ~ N(0,1); x1 = x0 + u0 + q, q ~ N(0,1);
        // z_t = x_t + u_t + r, r ~ N(0,1).
        let model = ChmmModel::time_invariant(
            Dims { n_x: 1, n_u: 1, n_z: 1, steps: 2, dt: 1.0 },
            crate::model::GaussianPrior { mean: v1(0.0), cov: m1(1.0) },
            crate::model::TransitionStep::new(m1(1.0), m1(1.0), v1(0.0), m1(1.0)),
            crate::model::EmissionStep::new(m1(1.0), m1(1.0), v1(0.0), m1(1.0)),
            PolicyStep::zero_mean(1, 1, m1(1.0)),
        )
        .unwrap();
        let z = vec![v1(0.7), v1(-1.3)];
        let post = joint_gaussian_oracle(&model, &z).unwrap();
        let c = post.control_given_state(1).unwrap();
        // Given x1, u1 only interacts with z1 = x1 + u1 + r1 (z0 is independent
        // of u1 given x1): p(u1|x1,z1) ∝ N(u1;0,1) N(z1 - x1 - u1; 0, 1)
        // -> mean (z1 - x1)/2, var 1/2, slope -1/2.
        assert!((c.gain[(0, 0)] + 0.5).abs() < 1e-10);
        assert!((c.offset[0] - (-1.3 / 2.0)).abs() < 1e-10);
        assert!((c.cov[(0, 0)] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn kl_of_identical_paths_is_zero_and_positive_otherwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = random_model(&mut rng, RandomModelSpec { n_x: 2, n_u: 1, n_z: 1, steps: 4, qcov_scale: None });
        let p = JointGaussian::build(&model, &model.prior_policy).unwrap().path_marginal();
        assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-10);
        let z = sample_measurements(&mut rng, &model);
        let post = joint_gaussian_oracle(&model, &z).unwrap();
        assert!(kl_divergence(&post, &p).unwrap() > 0.0);
    }

    #[test]
    fn oversized_oracle_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = random_model(&mut rng, RandomModelSpec { n_x: 1, n_u: 1, n_z: 1, steps: 3, qcov_scale: None });
        model.dims.steps = 2000;
        assert!(matches!(
            JointGaussian::build(&model, &model.prior_policy),
            Err(ApcdError::Shape(_))
        ));
    }

    #[test]
    fn path_marginal_of_conditioned_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = random_model(&mut rng, RandomModelSpec { n_x: 2, n_u: 1, n_z: 2, steps: 3, qcov_scale: None });
        let j = JointGaussian::build(&model, &model.prior_policy).unwrap();
        let pm = j.path_marginal();
        let s0 = pm.state_marginal(0);
        assert!(rel_err(&s0.cov, &model.prior.cov, 1e-12) < 1e-14);
    }
}
