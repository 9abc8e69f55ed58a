//! Demonstrator synthesis: risk-sensitive (exponential-of-quadratic) and
//! plain finite-horizon tracking regulators.
//!
//! The value function is `1/2 x^T P x + p^T x`. Before each regulator step
//! the propagated value is risk-transformed under the process noise `W`:
//!
//! ```text
//! P~ = (I - lambda P W)^-1 P
//! p~ = (I - lambda P W)^-1 p
//! ```
//!
//! which requires `I - lambda W^1/2 P W^1/2` to stay positive definite.

use nalgebra::{DMatrix, DVector};

use crate::error::{ApcdError, Result};
use crate::linalg::{block_diag, cholesky, is_psd, psd_factor, sym_eigenvalues, symmetrize};
use crate::model::{LinearPolicy, PolicyStep, TransitionStep};

/// Tracking cost `1/2 sum_t |p_t - p*_t|^2_Rp + |v_t|^2_Rv + |u_t|^2_Ru`
/// over `t = 0..=T`, with the state ordered as `(p, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqerCost {
    pub rp: DMatrix<f64>,
    pub rv: DMatrix<f64>,
    pub ru: DMatrix<f64>,
    pub lambda: f64,
    /// Reference positions `p*_t`, one per step.
    pub reference: Vec<DVector<f64>>,
}

impl LqerCost {
    pub fn state_weight(&self) -> DMatrix<f64> {
        block_diag(&self.rp, &self.rv)
    }

    /// `(p*_t, 0)`
    pub fn reference_state(&self, t: usize) -> DVector<f64> {
        let n_p = self.rp.nrows();
        let mut x = DVector::zeros(n_p + self.rv.nrows());
        x.rows_mut(0, n_p).copy_from(&self.reference[t]);
        x
    }

    /// `1/2 (|p - p*|^2_Rp + |v|^2_Rv + |u|^2_Ru)` at step `t`.
    pub fn stage_cost(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let e = x - self.reference_state(t);
        0.5 * (e.dot(&(self.state_weight() * &e)) + u.dot(&(&self.ru * u)))
    }

    pub fn validate(&self, n_x: usize, n_u: usize, steps: usize) -> Result<()> {
        let n_p = self.rp.nrows();
        if n_p + self.rv.nrows() != n_x || self.ru.nrows() != n_u {
            return Err(ApcdError::Shape(format!(
                "cost weights cover ({}, {}) but the model has n_x={n_x}, n_u={n_u}",
                n_p + self.rv.nrows(),
                self.ru.nrows()
            )));
        }
        for (name, w) in [("Rp", &self.rp), ("Rv", &self.rv), ("Ru", &self.ru)] {
            if !w.is_square() || !is_psd(w) {
                return Err(ApcdError::Config(format!("cost weight {name} is not symmetric PSD")));
            }
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(ApcdError::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.reference.len() != steps || self.reference.iter().any(|r| r.len() != n_p) {
            return Err(ApcdError::Shape(format!(
                "reference has {} entries for {steps} steps",
                self.reference.len()
            )));
        }
        Ok(())
    }
}

/// Backward tracking Riccati recursion; `lambda = 0` is the risk-neutral case.
fn riccati(transitions: &[TransitionStep], cost: &LqerCost, lambda: f64) -> Result<LinearPolicy> {
    let first = transitions
        .first()
        .ok_or_else(|| ApcdError::Shape("need at least one transition".into()))?;
    let (n_x, n_u) = (first.fx.nrows(), first.fu.ncols());
    let steps = transitions.len() + 1;
    let mut c = cost.clone();
    c.lambda = c.lambda.max(f64::MIN_POSITIVE);
    c.validate(n_x, n_u, steps)?;
    let q = cost.state_weight();
    let zero_cov = DMatrix::zeros(n_u, n_u);

    let mut p_mat = q.clone();
    let mut p_vec = -(&q * cost.reference_state(steps - 1));
    let mut out = vec![PolicyStep::zero_mean(n_x, n_u, zero_cov.clone())];
    for t in (0..steps - 1).rev() {
        let tr = &transitions[t];
        let (pt, pv) = if lambda > 0.0 {
            risk_transform(&p_mat, &p_vec, &tr.qcov, lambda).ok_or(ApcdError::RiskBreakdown { t })?
        } else {
            (p_mat.clone(), p_vec.clone())
        };
        let fut = tr.fu.transpose();
        let h = &cost.ru + &fut * &pt * &tr.fu;
        let g = &fut * &pt * &tr.fx;
        let carry = &pt * &tr.f + &pv;
        let hh = &fut * &carry;
        let chol = cholesky(&h).ok_or(ApcdError::SingularControlHessian { t })?;
        let gain = -chol.solve(&g);
        let offset = -chol.solve(&hh);
        let gt = g.transpose();
        p_mat = symmetrize(&(&q + tr.fx.transpose() * &pt * &tr.fx + &gt * &gain));
        p_vec = -(&q * cost.reference_state(t)) + tr.fx.transpose() * &carry + &gt * &offset;
        if !p_mat.iter().chain(p_vec.iter()).all(|v| v.is_finite()) {
            return Err(ApcdError::Diverged { t });
        }
        out.push(PolicyStep::new(gain, offset, zero_cov.clone()));
    }
    out.reverse();
    Ok(LinearPolicy::new(out))
}

/// `None` when `I - lambda W^1/2 P W^1/2` is not positive definite.
fn risk_transform(
    p: &DMatrix<f64>,
    pv: &DVector<f64>,
    w: &DMatrix<f64>,
    lambda: f64,
) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let n = p.nrows();
    let half = psd_factor(w);
    let check = DMatrix::identity(n, n) - (half.transpose() * p * &half) * lambda;
    let min_eig = sym_eigenvalues(&check).into_iter().fold(f64::INFINITY, f64::min);
    if !(min_eig > 0.0) {
        return None;
    }
    let lu = (DMatrix::identity(n, n) - p * w * lambda).lu();
    let pt = symmetrize(&lu.solve(p)?);
    let pvt = lu.solve(pv)?;
    Some((pt, pvt))
}

/// Risk-sensitive regulator; the returned policy is deterministic (`S = 0`).
pub fn lqer_synthesize(transitions: &[TransitionStep], cost: &LqerCost) -> Result<LinearPolicy> {
    riccati(transitions, cost, cost.lambda)
}

/// Risk-neutral regulator; `cost.lambda` is ignored.
pub fn lqr_synthesize(transitions: &[TransitionStep], cost: &LqerCost) -> Result<LinearPolicy> {
    riccati(transitions, cost, 0.0)
}

/// A demonstrator synthesizer selectable by name.
pub trait Synthesizer: Send + Sync {
    fn name(&self) -> &'static str;

    fn synthesize(&self, transitions: &[TransitionStep], cost: &LqerCost) -> Result<LinearPolicy>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Lqer;

#[derive(Debug, Clone, Copy, Default)]
pub struct Lqr;

impl Synthesizer for Lqer {
    fn name(&self) -> &'static str {
        "lqer"
    }

    fn synthesize(&self, transitions: &[TransitionStep], cost: &LqerCost) -> Result<LinearPolicy> {
        lqer_synthesize(transitions, cost)
    }
}

impl Synthesizer for Lqr {
    fn name(&self) -> &'static str {
        "lqr"
    }

    fn synthesize(&self, transitions: &[TransitionStep], cost: &LqerCost) -> Result<LinearPolicy> {
        lqr_synthesize(transitions, cost)
    }
}

/// Axis-wise double integrator with `axes` positions, unit mass.
pub fn double_integrator(axes: usize, dt: f64, force_cov: &DMatrix<f64>) -> TransitionStep {
    let i = DMatrix::<f64>::identity(axes, axes);
    let mut fx = DMatrix::identity(2 * axes, 2 * axes);
    fx.view_mut((0, axes), (axes, axes)).copy_from(&(&i * dt));
    let mut fu = DMatrix::zeros(2 * axes, axes);
    fu.view_mut((axes, 0), (axes, axes)).copy_from(&(&i * dt));
    let mut qcov = DMatrix::identity(2 * axes, 2 * axes) * 1e-12;
    qcov.view_mut((axes, axes), (axes, axes)).copy_from(&(force_cov * dt));
    TransitionStep::new(fx, fu, DVector::zeros(2 * axes), qcov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rel_err;

    fn unit_cost(axes: usize, steps: usize, lambda: f64) -> LqerCost {
        LqerCost {
            rp: DMatrix::identity(axes, axes),
            rv: DMatrix::identity(axes, axes) * 0.1,
            ru: DMatrix::identity(axes, axes),
            lambda,
            reference: (0..steps).map(|t| DVector::from_element(axes, (t as f64 * 0.05).sin())).collect(),
        }
    }

    fn unit_system(axes: usize, steps: usize) -> Vec<TransitionStep> {
        vec![double_integrator(axes, 0.1, &(DMatrix::identity(axes, axes) * 2.0)); steps - 1]
    }

    fn max_gain_diff(a: &LinearPolicy, b: &LinearPolicy) -> (f64, f64) {
        let d = a.steps.iter().zip(&b.steps).map(|(x, y)| rel_err(&x.gain, &y.gain, 1e-12)).fold(0.0, f64::max);
        let o = a
            .steps
            .iter()
            .zip(&b.steps)
            .map(|(x, y)| crate::linalg::rel_err_vec(&x.offset, &y.offset, 1e-12))
            .fold(0.0, f64::max);
        (d, o)
    }

    #[test]
    fn tiny_lambda_matches_lqr() {
        let tr = unit_system(2, 60);
        let cost = unit_cost(2, 60, 1e-10);
        let a = lqer_synthesize(&tr, &cost).unwrap();
        let b = lqr_synthesize(&tr, &cost).unwrap();
        let (dg, doff) = max_gain_diff(&a, &b);
        assert!(dg < 1e-8 && doff < 1e-8, "{dg:e} {doff:e}");
    }

    #[test]
    fn gain_gap_scales_linearly_in_lambda() {
        let tr = unit_system(1, 80);
        let lqr = lqr_synthesize(&tr, &unit_cost(1, 80, 1.0)).unwrap();
        let gap = |lambda: f64| {
            let p = lqer_synthesize(&tr, &unit_cost(1, 80, lambda)).unwrap();
            p.steps.iter().zip(&lqr.steps).map(|(a, b)| (&a.gain - &b.gain).norm()).fold(0.0, f64::max)
        };
        let (g8, g10) = (gap(1e-8), gap(1e-10));
        assert!(g10 > 0.0);
        let ratio = g8 / g10;
        assert!((ratio - 100.0).abs() < 5.0, "ratio {ratio}");
    }

    #[test]
    fn isotropic_noise_decouples_axes() {
        let tr = unit_system(2, 50);
        let p = lqer_synthesize(&tr, &unit_cost(2, 50, 1e-2)).unwrap();
        for s in &p.steps {
            // state (p1, p2, v1, v2), control (u1, u2)
            let off = [s.gain[(0, 1)], s.gain[(0, 3)], s.gain[(1, 0)], s.gain[(1, 2)]];
            assert!(off.iter().all(|v| v.abs() <= 1e-10), "{off:?}");
        }
    }

    #[test]
    fn correlated_noise_couples_axes() {
        let cov = DMatrix::from_row_slice(2, 2, &[4.0, 3.0, 3.0, 9.0]);
        let tr = vec![double_integrator(2, 0.1, &cov); 49];
        let p = lqer_synthesize(&tr, &unit_cost(2, 50, 1e-3)).unwrap();
        assert!(p.steps[0].gain[(0, 1)].abs() > 1e-8);
    }

    #[test]
    fn lqr_closed_loop_is_stable() {
        let steps = 200;
        let tr = unit_system(1, steps);
        let cost = LqerCost {
            rp: DMatrix::identity(1, 1),
            rv: DMatrix::zeros(1, 1),
            ru: DMatrix::identity(1, 1),
            lambda: 1.0,
            reference: vec![DVector::zeros(1); steps],
        };
        let p = lqr_synthesize(&tr, &cost).unwrap();
        let a = &tr[0].fx + &tr[0].fu * &p.steps[0].gain;
        let rho = a.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max);
        assert!(rho < 1.0, "spectral radius {rho}");
    }

    #[test]
    fn expensive_control_drives_gains_to_zero() {
        let tr = unit_system(1, 30);
        let mut cost = unit_cost(1, 30, 1.0);
        cost.ru *= 1e14;
        let p = lqr_synthesize(&tr, &cost).unwrap();
        let max = p.steps.iter().map(|s| s.gain.amax().max(s.offset.amax())).fold(0.0, f64::max);
        assert!(max < 1e-10, "{max:e}");
    }

    #[test]
    fn long_horizon_gains_become_stationary() {
        let steps = 3001;
        let tr = unit_system(1, steps);
        let mut cost = unit_cost(1, steps, 1.0);
        cost.reference = vec![DVector::zeros(1); steps];
        let p = lqr_synthesize(&tr, &cost).unwrap();
        let mid = steps / 2;
        let change = rel_err(&p.steps[mid].gain, &p.steps[mid + 1].gain, 1e-12);
        assert!(change <= 1e-8, "{change:e}");
    }

    #[test]
    fn large_lambda_breaks_down_with_step() {
        let tr = unit_system(1, 40);
        let err = lqer_synthesize(&tr, &unit_cost(1, 40, 1e3)).unwrap_err();
        assert!(matches!(err, ApcdError::RiskBreakdown { .. }));
    }

    #[test]
    fn terminal_step_has_no_control() {
        let tr = unit_system(1, 5);
        let p = lqer_synthesize(&tr, &unit_cost(1, 5, 1e-3)).unwrap();
        let last = p.steps.last().unwrap();
        assert_eq!(last.gain.amax(), 0.0);
        assert_eq!(last.offset.amax(), 0.0);
        assert!(p.steps.iter().all(|s| s.is_deterministic()));
    }
}
