//! Time-varying linear-Gaussian controlled hidden Markov model.
//!
//! ```text
//! x_0     ~ N(mu0, Sigma0)
//! u_t     = K_t x_t + k_t + s_t,             s_t ~ N(0, S_t)
//! x_{t+1} = Fx_t x_t + Fu_t u_t + f_t + q_t, q_t ~ N(0, Qcov_t)
//! z_t     = Gx_t x_t + Gu_t u_t + g_t + r_t, r_t ~ N(0, Rcov_t)
//! ```
//!
//! Quadratic forms are stored without their constant term; every consumer
//! only needs them up to an additive constant.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{ApcdError, Result};
use crate::linalg::{hstack, is_pd, is_psd, is_symmetric, spd_inverse, symmetrize, SYM_TOL};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dims {
    pub n_x: usize,
    pub n_u: usize,
    pub n_z: usize,
    /// Number of time indices `t = 0..=T`, i.e. `T + 1`.
    pub steps: usize,
    pub dt: f64,
}

impl Dims {
    pub fn n_xi(&self) -> usize {
        self.n_x + self.n_u
    }

    pub fn horizon(&self) -> f64 {
        self.dt * (self.steps - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionStep {
    pub fx: DMatrix<f64>,
    pub fu: DMatrix<f64>,
    pub f: DVector<f64>,
    pub qcov: DMatrix<f64>,
}

impl TransitionStep {
    pub fn new(fx: DMatrix<f64>, fu: DMatrix<f64>, f: DVector<f64>, qcov: DMatrix<f64>) -> Self {
        Self { fx, fu, f, qcov }
    }

    /// `[Fx Fu]`
    pub fn f_xi(&self) -> DMatrix<f64> {
        hstack(&self.fx, &self.fu)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmissionStep {
    pub gx: DMatrix<f64>,
    pub gu: DMatrix<f64>,
    pub g: DVector<f64>,
    pub rcov: DMatrix<f64>,
}

impl EmissionStep {
    pub fn new(gx: DMatrix<f64>, gu: DMatrix<f64>, g: DVector<f64>, rcov: DMatrix<f64>) -> Self {
        Self { gx, gu, g, rcov }
    }

    /// `[Gx Gu]`
    pub fn g_xi(&self) -> DMatrix<f64> {
        hstack(&self.gx, &self.gu)
    }
}

/// One step of an affine-Gaussian feedback law `u = K x + k + s`, `s ~ N(0, S)`.
///
/// A zero covariance marks a deterministic policy (the demonstrator).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStep {
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl PolicyStep {
    pub fn new(gain: DMatrix<f64>, offset: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { gain, offset, cov }
    }

    pub fn zero_mean(n_x: usize, n_u: usize, cov: DMatrix<f64>) -> Self {
        Self {
            gain: DMatrix::zeros(n_u, n_x),
            offset: DVector::zeros(n_u),
            cov,
        }
    }

    pub fn mean(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.gain * x + &self.offset
    }

    pub fn is_deterministic(&self) -> bool {
        self.cov.iter().all(|v| *v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearPolicy {
    pub steps: Vec<PolicyStep>,
}

impl LinearPolicy {
    pub fn new(steps: Vec<PolicyStep>) -> Self {
        Self { steps }
    }

    /// Zero-mean policy with covariance `sigma_sq * I` at every step.
    pub fn isotropic(steps: usize, n_x: usize, n_u: usize, sigma_sq: f64) -> Self {
        let step = PolicyStep::zero_mean(n_x, n_u, DMatrix::identity(n_u, n_u) * sigma_sq);
        Self {
            steps: vec![step; steps],
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChmmModel {
    pub dims: Dims,
    pub prior: GaussianPrior,
    /// `steps - 1` entries; entry `t` maps `xi_t` to `x_{t+1}`.
    pub transitions: Vec<TransitionStep>,
    /// `steps` entries.
    pub emissions: Vec<EmissionStep>,
    pub prior_policy: LinearPolicy,
}

impl ChmmModel {
    /// Builds a model and rejects it unless `validate_model` reports nothing.
    pub fn new(
        dims: Dims,
        prior: GaussianPrior,
        transitions: Vec<TransitionStep>,
        emissions: Vec<EmissionStep>,
        prior_policy: LinearPolicy,
    ) -> Result<Self> {
        let model = Self {
            dims,
            prior,
            transitions,
            emissions,
            prior_policy,
        };
        let report = validate_model(&model);
        if report.is_empty() {
            Ok(model)
        } else {
            Err(ApcdError::InvalidModel(
                report.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "),
            ))
        }
    }

    /// Broadcasts single time-invariant steps to the whole horizon.
    pub fn time_invariant(
        dims: Dims,
        prior: GaussianPrior,
        transition: TransitionStep,
        emission: EmissionStep,
        policy: PolicyStep,
    ) -> Result<Self> {
        let steps = dims.steps;
        Self::new(
            dims,
            prior,
            vec![transition; steps.saturating_sub(1)],
            vec![emission; steps],
            LinearPolicy::new(vec![policy; steps]),
        )
    }

    /// Same model with a different prior policy.
    pub fn with_prior_policy(&self, policy: LinearPolicy) -> Self {
        Self {
            prior_policy: policy,
            ..self.clone()
        }
    }

    /// Observation likelihood quadratics `l(z_t | xi_t)` for a whole sequence.
    pub fn obs_quadratics(&self, z: &[DVector<f64>]) -> Result<Vec<ObsQuadratic>> {
        if z.len() != self.dims.steps {
            return Err(ApcdError::Shape(format!(
                "measurement sequence has {} entries, model has {} steps",
                z.len(),
                self.dims.steps
            )));
        }
        self.emissions
            .iter()
            .zip(z)
            .enumerate()
            .map(|(t, (e, zt))| {
                obs_loglik_quadratic(e, zt).map_err(|err| err.at(t))
            })
            .collect()
    }
}

/// Quadratic form of the negative log observation likelihood,
/// `l(z | xi) = 1/2 xi^T r_xixi xi + r_xi^T xi + const`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsQuadratic {
    pub r_xi: DVector<f64>,
    pub r_xixi: DMatrix<f64>,
}

impl ObsQuadratic {
    pub fn zeros(n_xi: usize) -> Self {
        Self {
            r_xi: DVector::zeros(n_xi),
            r_xixi: DMatrix::zeros(n_xi, n_xi),
        }
    }

    /// Arithmetic mean of several likelihood quadratics, summed in order.
    pub fn mean(terms: &[&ObsQuadratic]) -> Self {
        assert!(!terms.is_empty(), "mean of zero observation quadratics");
        let n = terms[0].r_xi.len();
        let mut acc = Self::zeros(n);
        for t in terms {
            acc.r_xi += &t.r_xi;
            acc.r_xixi += &t.r_xixi;
        }
        let scale = 1.0 / terms.len() as f64;
        acc.r_xi *= scale;
        acc.r_xixi = symmetrize(&(acc.r_xixi * scale));
        acc
    }

    pub fn eval(&self, xi: &DVector<f64>) -> f64 {
        0.5 * xi.dot(&(&self.r_xixi * xi)) + self.r_xi.dot(xi)
    }
}

/// Affine-Gaussian conditional `y ~ N(A x + b, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGaussianSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// `Rxixi = G^T R^-1 G`, `Rxi = G^T R^-1 (g - z)` with `G = [Gx Gu]`.
pub fn obs_loglik_quadratic(emission: &EmissionStep, z: &DVector<f64>) -> Result<ObsQuadratic> {
    let r_inv = spd_inverse(&emission.rcov).ok_or(ApcdError::SingularEmission { t: None })?;
    let g_xi = emission.g_xi();
    let gt_rinv = g_xi.transpose() * r_inv;
    Ok(ObsQuadratic {
        r_xi: &gt_rinv * (&emission.g - z),
        r_xixi: symmetrize(&(&gt_rinv * &g_xi)),
    })
}

/// Marginalizes `u ~ pol(u | x)` out of the transition.
pub fn closed_loop_transition(step: &TransitionStep, pol: &PolicyStep) -> AffineGaussianSystem {
    AffineGaussianSystem {
        a: &step.fx + &step.fu * &pol.gain,
        b: &step.fu * &pol.offset + &step.f,
        cov: symmetrize(&(&step.qcov + &step.fu * &pol.cov * step.fu.transpose())),
    }
}

/// Marginalizes `u ~ pol(u | x)` out of the emission.
pub fn closed_loop_emission(step: &EmissionStep, pol: &PolicyStep) -> AffineGaussianSystem {
    AffineGaussianSystem {
        a: &step.gx + &step.gu * &pol.gain,
        b: &step.gu * &pol.offset + &step.g,
        cov: symmetrize(&(&step.rcov + &step.gu * &pol.cov * step.gu.transpose())),
    }
}

/// Measurements `z_0..z_T` of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSequence {
    pub z: Vec<DVector<f64>>,
}

impl MeasurementSequence {
    pub fn new(z: Vec<DVector<f64>>) -> Self {
        Self { z }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// States and controls of one closed-loop rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

/// One violated invariant, optionally tied to a time index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationIssue {
    pub message: String,
    pub t: Option<usize>,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.t {
            Some(t) => write!(f, "{}, t={}", self.message, t),
            None => write!(f, "{}", self.message),
        }
    }
}

/// Lists every violated invariant of `model`. Empty means valid.
pub fn validate_model(model: &ChmmModel) -> Vec<ValidationIssue> {
    let mut report = Vec::new();
    let mut issue = |message: String, t: Option<usize>| report.push(ValidationIssue { message, t });
    let d = model.dims;

    if d.n_x == 0 || d.n_u == 0 || d.n_z == 0 {
        issue("dimensions must be >= 1".into(), None);
        return report;
    }
    if d.steps < 2 {
        issue("steps must be >= 2".into(), None);
    }
    if !(d.dt > 0.0 && d.dt.is_finite()) {
        issue("dt must be positive".into(), None);
    }

    let shape = |m: &DMatrix<f64>, r: usize, c: usize| m.nrows() == r && m.ncols() == c;

    if model.prior.mean.len() != d.n_x || !shape(&model.prior.cov, d.n_x, d.n_x) {
        issue("prior shape mismatch".into(), None);
    } else {
        if !is_symmetric(&model.prior.cov, SYM_TOL) {
            issue("Sigma0 not symmetric".into(), None);
        }
        if !is_pd(&model.prior.cov) {
            issue("Sigma0 not PD".into(), None);
        }
    }

    if model.transitions.len() + 1 != d.steps {
        issue(
            format!(
                "transitions length mismatch: expected {}, got {}",
                d.steps.saturating_sub(1),
                model.transitions.len()
            ),
            None,
        );
    }
    for (t, s) in model.transitions.iter().enumerate() {
        if !shape(&s.fx, d.n_x, d.n_x)
            || !shape(&s.fu, d.n_x, d.n_u)
            || s.f.len() != d.n_x
            || !shape(&s.qcov, d.n_x, d.n_x)
        {
            issue("transition shape mismatch".into(), Some(t));
            continue;
        }
        if !is_symmetric(&s.qcov, SYM_TOL) {
            issue("Qcov not symmetric".into(), Some(t));
        }
        if !is_psd(&s.qcov) {
            issue("Qcov not PSD".into(), Some(t));
        }
    }

    if model.emissions.len() != d.steps {
        issue(
            format!(
                "emissions length mismatch: expected {}, got {}",
                d.steps,
                model.emissions.len()
            ),
            None,
        );
    }
    for (t, e) in model.emissions.iter().enumerate() {
        if !shape(&e.gx, d.n_z, d.n_x)
            || !shape(&e.gu, d.n_z, d.n_u)
            || e.g.len() != d.n_z
            || !shape(&e.rcov, d.n_z, d.n_z)
        {
            issue("emission shape mismatch".into(), Some(t));
            continue;
        }
        if !is_symmetric(&e.rcov, SYM_TOL) {
            issue("Rcov not symmetric".into(), Some(t));
        }
        if !is_pd(&e.rcov) {
            issue("Rcov not PD".into(), Some(t));
        }
    }

    if model.prior_policy.len() != d.steps {
        issue(
            format!(
                "prior policy length mismatch: expected {}, got {}",
                d.steps,
                model.prior_policy.len()
            ),
            None,
        );
    }
    for (t, p) in model.prior_policy.steps.iter().enumerate() {
        if !shape(&p.gain, d.n_u, d.n_x) || p.offset.len() != d.n_u || !shape(&p.cov, d.n_u, d.n_u) {
            issue("policy shape mismatch".into(), Some(t));
            continue;
        }
        if !is_symmetric(&p.cov, SYM_TOL) {
            issue("S not symmetric".into(), Some(t));
        }
        if !is_pd(&p.cov) {
            issue("S not PD".into(), Some(t));
        }
    }
    report
}
