//! A-posteriori control distributions for linear-Gaussian models.
//!
//! Both extractors run the same backward pass over quadratic Q- and
//! V-functions and share the policy and value updates:
//!
//! ```text
//! Sigma* = (S^-1 + Quu)^-1
//! K*     = Sigma* (S^-1 K - Qux)
//! k*     = Sigma* (S^-1 k - Qu)
//! Vxx    = Qxx + K^T S^-1 K - K*^T Sigma*^-1 K*
//! Vx     = Qx  + K^T S^-1 k - K*^T Sigma*^-1 k*
//! ```
//!
//! They differ only in how the next value function is pulled back through
//! the transition ([`VanillaQ`] vs [`NaturalQ`]). The vanilla pass runs once
//! per measurement sequence and yields a mixture weighted by the smoothed
//! state marginals; the natural pass runs once on the averaged observation
//! likelihood and yields a single linear-Gaussian policy.

mod mixture;

pub use mixture::{mixture_mean_control, MixturePolicy};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{ApcdError, Result};
use crate::linalg::{cholesky, spd_inverse, symmetrize};
use crate::model::{ChmmModel, LinearPolicy, MeasurementSequence, ObsQuadratic, PolicyStep, TransitionStep};
use crate::smoothing::smooth_sequence;

/// `V(x) = 1/2 x^T vxx x + vx^T x + const`
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticValue {
    pub vx: DVector<f64>,
    pub vxx: DMatrix<f64>,
}

impl QuadraticValue {
    pub fn zeros(n_x: usize) -> Self {
        Self {
            vx: DVector::zeros(n_x),
            vxx: DMatrix::zeros(n_x, n_x),
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.vxx * x)) + self.vx.dot(x)
    }
}

/// `Q(xi) = 1/2 xi^T q_xixi xi + q_xi^T xi + const` over `xi = (x, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticQ {
    pub q_xi: DVector<f64>,
    pub q_xixi: DMatrix<f64>,
    n_x: usize,
}

impl QuadraticQ {
    pub fn new(n_x: usize, q_xi: DVector<f64>, q_xixi: DMatrix<f64>) -> Self {
        Self { q_xi, q_xixi: symmetrize(&q_xixi), n_x }
    }

    pub fn from_obs(n_x: usize, obs: &ObsQuadratic) -> Self {
        Self::new(n_x, obs.r_xi.clone(), obs.r_xixi.clone())
    }

    fn n_u(&self) -> usize {
        self.q_xi.len() - self.n_x
    }

    pub fn qx(&self) -> DVector<f64> {
        self.q_xi.rows(0, self.n_x).into_owned()
    }

    pub fn qu(&self) -> DVector<f64> {
        self.q_xi.rows(self.n_x, self.n_u()).into_owned()
    }

    pub fn qxx(&self) -> DMatrix<f64> {
        self.q_xixi.view((0, 0), (self.n_x, self.n_x)).into_owned()
    }

    pub fn qux(&self) -> DMatrix<f64> {
        self.q_xixi.view((self.n_x, 0), (self.n_u(), self.n_x)).into_owned()
    }

    pub fn quu(&self) -> DMatrix<f64> {
        self.q_xixi
            .view((self.n_x, self.n_x), (self.n_u(), self.n_u()))
            .into_owned()
    }

    pub fn eval(&self, xi: &DVector<f64>) -> f64 {
        0.5 * xi.dot(&(&self.q_xixi * xi)) + self.q_xi.dot(xi)
    }
}

/// Posterior policy step of `pi*(u|x) ∝ rho(u|x) exp(-Q(x, u))`.
pub fn policy_from_q(prior: &PolicyStep, q: &QuadraticQ) -> Result<PolicyStep> {
    let s_inv = spd_inverse(&prior.cov).ok_or(ApcdError::SingularPolicy { t: None })?;
    let precision = &s_inv + q.quu();
    let chol = cholesky(&precision).ok_or(ApcdError::IndefiniteQ { t: None })?;
    let gain = chol.solve(&(&s_inv * &prior.gain - q.qux()));
    let offset = chol.solve(&(&s_inv * &prior.offset - q.qu()));
    let cov = symmetrize(&chol.inverse());
    Ok(PolicyStep::new(gain, offset, cov))
}

/// Value function matching a `policy_from_q` result, from
/// `exp(-V(x)) pi*(u|x) = rho(u|x) exp(-Q(x, u))` evaluated at `u = 0`.
pub fn value_from_q(prior: &PolicyStep, posterior: &PolicyStep, q: &QuadraticQ) -> Result<QuadraticValue> {
    let s_inv = spd_inverse(&prior.cov).ok_or(ApcdError::SingularPolicy { t: None })?;
    // Sigma*^-1 is exactly S^-1 + Quu; no need to invert Sigma* back.
    let post_precision = &s_inv + q.quu();
    let kt = prior.gain.transpose();
    let kst = posterior.gain.transpose();
    let vxx = q.qxx() + &kt * &s_inv * &prior.gain - &kst * &post_precision * &posterior.gain;
    let vx = q.qx() + &kt * &s_inv * &prior.offset - &kst * &post_precision * &posterior.offset;
    Ok(QuadraticValue { vx, vxx: symmetrize(&vxx) })
}

/// Pulls the next value function back through one transition.
pub trait QUpdate: Send + Sync {
    fn name(&self) -> &'static str;

    fn update(&self, step: &TransitionStep, obs: &ObsQuadratic, v_next: &QuadraticValue) -> Result<QuadraticQ>;
}

/// `Q(xi) = l(z|xi) - log E[exp(-V_{t+1}(x'))]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct VanillaQ;

/// `Q(xi) = mean_n l(z^n|xi) + E[V_{t+1}(x')]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct NaturalQ;

impl QUpdate for VanillaQ {
    fn name(&self) -> &'static str {
        "vanilla"
    }

    fn update(&self, step: &TransitionStep, obs: &ObsQuadratic, v_next: &QuadraticValue) -> Result<QuadraticQ> {
        vanilla_q_update(step, obs, v_next)
    }
}

impl QUpdate for NaturalQ {
    fn name(&self) -> &'static str {
        "natural"
    }

    fn update(&self, step: &TransitionStep, obs: &ObsQuadratic, v_next: &QuadraticValue) -> Result<QuadraticQ> {
        Ok(natural_q_update(step, obs, v_next))
    }
}

/// Vanilla pull-back.
///
/// `(Vxx^-1 + Qcov)^-1 = (I + Vxx Qcov)^-1 Vxx` and
/// `(Vxx^-1 + Qcov)^-1 Vxx^-1 = (I + Vxx Qcov)^-1`, so the update never
/// inverts `Vxx`, which is singular whenever only part of the state is
/// measured.
pub fn vanilla_q_update(step: &TransitionStep, obs: &ObsQuadratic, v_next: &QuadraticValue) -> Result<QuadraticQ> {
    let n_x = step.fx.nrows();
    let p = &v_next.vxx;
    let m = DMatrix::identity(n_x, n_x) + p * &step.qcov;
    let lu = m.lu();
    if !lu.is_invertible() {
        return Err(ApcdError::DegeneratePropagation { t: None });
    }
    let prop = symmetrize(&lu.solve(p).ok_or(ApcdError::DegeneratePropagation { t: None })?);
    let lin = lu
        .solve(&(&v_next.vx + p * &step.f))
        .ok_or(ApcdError::DegeneratePropagation { t: None })?;
    let f = step.f_xi();
    let ft = f.transpose();
    Ok(QuadraticQ::new(
        n_x,
        &obs.r_xi + &ft * lin,
        &obs.r_xixi + &ft * prop * &f,
    ))
}

/// Natural pull-back: the expectation of a quadratic under Gaussian process
/// noise only shifts the constant, so `Qcov` drops out.
pub fn natural_q_update(step: &TransitionStep, obs_mean: &ObsQuadratic, v_next: &QuadraticValue) -> QuadraticQ {
    let n_x = step.fx.nrows();
    let f = step.f_xi();
    let ft = f.transpose();
    QuadraticQ::new(
        n_x,
        &obs_mean.r_xi + &ft * (&v_next.vxx * &step.f + &v_next.vx),
        &obs_mean.r_xixi + &ft * &v_next.vxx * &f,
    )
}

/// Everything one backward pass produces, indexed by `t`.
#[derive(Debug, Clone)]
pub struct BackwardPass {
    pub policy: LinearPolicy,
    pub values: Vec<QuadraticValue>,
    pub q: Vec<QuadraticQ>,
}

/// Runs `t = T..0` from a zero value function at the virtual step `T + 1`,
/// so the last Q-function is the observation likelihood alone.
pub fn backward_pass(model: &ChmmModel, obs: &[ObsQuadratic], rule: &dyn QUpdate) -> Result<BackwardPass> {
    let d = model.dims;
    if obs.len() != d.steps {
        return Err(ApcdError::Shape(format!(
            "{} observation terms for {} steps",
            obs.len(),
            d.steps
        )));
    }
    let mut policy = Vec::with_capacity(d.steps);
    let mut values = Vec::with_capacity(d.steps);
    let mut qs = Vec::with_capacity(d.steps);
    let mut v_next = QuadraticValue::zeros(d.n_x);
    for t in (0..d.steps).rev() {
        let q = if t + 1 == d.steps {
            QuadraticQ::from_obs(d.n_x, &obs[t])
        } else {
            rule.update(&model.transitions[t], &obs[t], &v_next).map_err(|e| e.at(t))?
        };
        let prior = &model.prior_policy.steps[t];
        let post = policy_from_q(prior, &q).map_err(|e| e.at(t))?;
        let v = value_from_q(prior, &post, &q).map_err(|e| e.at(t))?;
        policy.push(post);
        values.push(v.clone());
        qs.push(q);
        v_next = v;
    }
    policy.reverse();
    values.reverse();
    qs.reverse();
    Ok(BackwardPass {
        policy: LinearPolicy::new(policy),
        values,
        q: qs,
    })
}

fn check_sequences(model: &ChmmModel, sequences: &[MeasurementSequence]) -> Result<()> {
    if sequences.is_empty() {
        return Err(ApcdError::Config("at least one measurement sequence is required".into()));
    }
    if let Some(bad) = sequences.iter().find(|s| s.len() != model.dims.steps) {
        return Err(ApcdError::Shape(format!(
            "measurement sequence of length {} for a {}-step model",
            bad.len(),
            model.dims.steps
        )));
    }
    Ok(())
}

/// Vanilla APCD: one backward pass per sequence, mixed by `p(x_t | Z^n)`.
pub fn extract_vanilla(model: &ChmmModel, sequences: &[MeasurementSequence]) -> Result<MixturePolicy> {
    check_sequences(model, sequences)?;
    let parts: Vec<(LinearPolicy, Vec<_>)> = sequences
        .par_iter()
        .map(|seq| {
            let obs = model.obs_quadratics(&seq.z)?;
            let pass = backward_pass(model, &obs, &VanillaQ)?;
            let smoothed = smooth_sequence(model, &seq.z)?;
            Ok((pass.policy, smoothed.states))
        })
        .collect::<Result<_>>()?;
    let (components, weights) = parts.into_iter().unzip();
    MixturePolicy::new(components, weights)
}

/// Natural APCD: a single backward pass on the averaged likelihood.
pub fn extract_natural(model: &ChmmModel, sequences: &[MeasurementSequence]) -> Result<LinearPolicy> {
    check_sequences(model, sequences)?;
    let per_seq: Vec<Vec<ObsQuadratic>> = sequences
        .par_iter()
        .map(|seq| model.obs_quadratics(&seq.z))
        .collect::<Result<_>>()?;
    let averaged: Vec<ObsQuadratic> = (0..model.dims.steps)
        .map(|t| {
            let terms: Vec<&ObsQuadratic> = per_seq.iter().map(|s| &s[t]).collect();
            ObsQuadratic::mean(&terms)
        })
        .collect();
    Ok(backward_pass(model, &averaged, &NaturalQ)?.policy)
}
