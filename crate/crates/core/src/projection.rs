//! Divergence objectives whose minimizers are the two extracted policies,
//! and a finite-difference local-optimality probe.
//!
//! * M-projection: `D[p(Xi | Z) || p(Xi; pi)]`, dense KL between path
//!   Gaussians. Minimized by the V-APCD.
//! * I-projection: `sum_t E_pi[KL(pi_t || rho_t)] + E_pi[l(z_t | xi_t)]`,
//!   evaluated by forward moment propagation under `pi`. For deterministic
//!   dynamics this equals `D[p(Xi; pi) || p(Xi | Z)]` up to a constant.
//!   Minimized by the N-APCD.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ApcdError, Result};
use crate::linalg::{cholesky, symmetrize};
use crate::model::{ChmmModel, LinearPolicy, ObsQuadratic, PolicyStep};
use crate::smoothing::oracle::{kl_divergence, JointGaussian, PathGaussian};

/// `D[posterior || p(Xi; policy)]` with the model's dynamics.
pub fn m_projection_divergence(posterior: &PathGaussian, model: &ChmmModel, policy: &LinearPolicy) -> Result<f64> {
    let induced = JointGaussian::build(model, policy)?.path_marginal();
    kl_divergence(posterior, &induced)
}

/// `E_x[KL(N(Kp x + kp, Sp) || N(K x + k, S))]` for `x ~ N(m, c)`.
fn expected_policy_kl(pi: &PolicyStep, rho: &PolicyStep, m: &DVector<f64>, c: &DMatrix<f64>) -> Result<f64> {
    let n = pi.offset.len() as f64;
    let s = cholesky(&rho.cov).ok_or(ApcdError::SingularPolicy { t: None })?;
    let sp = cholesky(&pi.cov).ok_or(ApcdError::SingularPolicy { t: None })?;
    let log_det = |ch: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
        let l = ch.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    };
    let dk = &pi.gain - &rho.gain;
    let dmean = &dk * m + (&pi.offset - &rho.offset);
    let trace_cov = s.solve(&pi.cov).trace();
    let quad = dmean.dot(&s.solve(&dmean)) + (dk.transpose() * s.solve(&dk) * c).trace();
    Ok(0.5 * (trace_cov - n + log_det(&s) - log_det(&sp) + quad))
}

/// Variational objective of the natural extraction for a given policy.
pub fn i_projection_objective(model: &ChmmModel, obs: &[ObsQuadratic], policy: &LinearPolicy) -> Result<f64> {
    let d = model.dims;
    if obs.len() != d.steps || policy.len() != d.steps {
        return Err(ApcdError::Shape("objective inputs do not cover the horizon".into()));
    }
    let mut m = model.prior.mean.clone();
    let mut c = model.prior.cov.clone();
    let mut total = 0.0;
    for t in 0..d.steps {
        let pi = &policy.steps[t];
        total += expected_policy_kl(pi, &model.prior_policy.steps[t], &m, &c).map_err(|e| e.at(t))?;
        // moments of xi_t = (x_t, u_t) under pi
        let n_xi = d.n_xi();
        let mut mu = DVector::zeros(n_xi);
        mu.rows_mut(0, d.n_x).copy_from(&m);
        mu.rows_mut(d.n_x, d.n_u).copy_from(&pi.mean(&m));
        let kc = &pi.gain * &c;
        let mut cxi = DMatrix::zeros(n_xi, n_xi);
        cxi.view_mut((0, 0), (d.n_x, d.n_x)).copy_from(&c);
        cxi.view_mut((d.n_x, 0), (d.n_u, d.n_x)).copy_from(&kc);
        cxi.view_mut((0, d.n_x), (d.n_x, d.n_u)).copy_from(&kc.transpose());
        cxi.view_mut((d.n_x, d.n_x), (d.n_u, d.n_u))
            .copy_from(&(&kc * pi.gain.transpose() + &pi.cov));
        let o = &obs[t];
        total += 0.5 * (&o.r_xixi * &cxi).trace() + o.eval(&mu);
        if t + 1 < d.steps {
            let tr = &model.transitions[t];
            let f = tr.f_xi();
            m = &f * &mu + &tr.f;
            c = symmetrize(&(&f * &cxi * f.transpose() + &tr.qcov));
        }
    }
    Ok(total)
}

/// Gains and offsets of every step, flattened.
pub fn mean_parameters(policy: &LinearPolicy) -> DVector<f64> {
    let mut v = Vec::new();
    for s in &policy.steps {
        v.extend(s.gain.iter());
        v.extend(s.offset.iter());
    }
    DVector::from_vec(v)
}

/// Inverse of [`mean_parameters`]; covariances are kept from `template`.
pub fn with_mean_parameters(template: &LinearPolicy, theta: &DVector<f64>) -> LinearPolicy {
    let mut i = 0;
    let steps = template
        .steps
        .iter()
        .map(|s| {
            let (r, c) = s.gain.shape();
            let gain = DMatrix::from_column_slice(r, c, &theta.as_slice()[i..i + r * c]);
            i += r * c;
            let offset = DVector::from_column_slice(&theta.as_slice()[i..i + r]);
            i += r;
            PolicyStep::new(gain, offset, s.cov.clone())
        })
        .collect();
    LinearPolicy::new(steps)
}

#[derive(Debug, Clone)]
pub struct OptimalityReport {
    pub value: f64,
    pub gradient_norm: f64,
    /// `|grad| / max(1, |value|)`
    pub relative_gradient: f64,
    pub perturbations: usize,
    pub increasing: usize,
    pub min_increase: f64,
}

impl OptimalityReport {
    pub fn is_local_minimum(&self, grad_tol: f64) -> bool {
        self.relative_gradient <= grad_tol && self.increasing == self.perturbations
    }
}

/// Central-difference gradient over all gain/offset entries, plus random
/// perturbations of norm `magnitude`.
pub fn probe_local_optimum<R: Rng + ?Sized>(
    policy: &LinearPolicy,
    objective: impl Fn(&LinearPolicy) -> Result<f64>,
    step: f64,
    perturbations: usize,
    magnitude: f64,
    rng: &mut R,
) -> Result<OptimalityReport> {
    let theta = mean_parameters(policy);
    let f = |th: &DVector<f64>| objective(&with_mean_parameters(policy, th));
    let value = f(&theta)?;
    let mut grad = DVector::zeros(theta.len());
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[i] += step;
        minus[i] -= step;
        grad[i] = (f(&plus)? - f(&minus)?) / (2.0 * step);
    }
    let mut increasing = 0;
    let mut min_increase = f64::INFINITY;
    for _ in 0..perturbations {
        let dir = DVector::<f64>::from_fn(theta.len(), |_, _| rng.sample(StandardNormal));
        let delta = dir.normalize() * magnitude;
        let inc = f(&(&theta + delta))? - value;
        if inc > 0.0 {
            increasing += 1;
        }
        min_increase = min_increase.min(inc);
    }
    let gradient_norm = grad.norm();
    Ok(OptimalityReport {
        value,
        gradient_norm,
        relative_gradient: gradient_norm / value.abs().max(1.0),
        perturbations,
        increasing,
        min_increase,
    })
}
