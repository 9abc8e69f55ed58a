//! Oracle-equivalence and projection-optimality checks on seeded random
//! model families.

use std::fmt;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::apcd::{backward_pass, extract_natural, extract_vanilla, NaturalQ, VanillaQ};
use crate::error::Result;
use crate::linalg::{rel_err, rel_err_vec};
use crate::model::{ChmmModel, MeasurementSequence};
use crate::projection::{i_projection_objective, m_projection_divergence, probe_local_optimum};
use crate::smoothing::oracle::joint_gaussian_oracle;
use crate::smoothing::{kalman_filter, rts_smoother};
use crate::testing::{random_model, sample_measurements, RandomModelSpec};

/// Relative error floor; values below it are compared absolutely.
const FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub metric: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {:.3e} (tolerance {:.1e}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.metric,
            self.tolerance,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteConfig {
    pub trials: usize,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { trials: 50, max_steps: 10, seed: 2024 }
    }
}

fn sample_spec(rng: &mut ChaCha8Rng, max_steps: usize) -> RandomModelSpec {
    let mut spec = RandomModelSpec::sample(rng);
    spec.steps = spec.steps.min(max_steps.max(2));
    spec
}

fn model_and_data(rng: &mut ChaCha8Rng, spec: RandomModelSpec) -> (ChmmModel, MeasurementSequence) {
    let model = random_model(rng, spec);
    let z = MeasurementSequence::new(sample_measurements(rng, &model));
    (model, z)
}

/// Backward-recursion V-APCD against dense Gaussian conditioning.
pub fn oracle_equivalence(cfg: SuiteConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.trials {
        let spec = sample_spec(&mut rng, cfg.max_steps);
        let (model, z) = model_and_data(&mut rng, spec);
        let mix = extract_vanilla(&model, std::slice::from_ref(&z))?;
        let post = joint_gaussian_oracle(&model, &z.z)?;
        for (t, a) in mix.components[0].steps.iter().enumerate() {
            let b = post.control_given_state(t)?;
            worst = worst
                .max(rel_err(&a.gain, &b.gain, FLOOR))
                .max(rel_err_vec(&a.offset, &b.offset, FLOOR))
                .max(rel_err(&a.cov, &b.cov, FLOOR));
        }
    }
    Ok(CheckResult {
        name: "oracle-equivalence",
        passed: worst <= 1e-8,
        metric: worst,
        tolerance: 1e-8,
        detail: format!("max relative error of (K*, k*, Sigma*) over {} models", cfg.trials),
    })
}

/// Filter, smoother and dense oracle agree on every marginal and on the evidence.
pub fn smoother_agreement(cfg: SuiteConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut worst: f64 = 0.0;
    let mut worst_evidence: f64 = 0.0;
    for _ in 0..cfg.trials {
        let spec = sample_spec(&mut rng, cfg.max_steps);
        let (model, z) = model_and_data(&mut rng, spec);
        let filter = kalman_filter(&model, &z.z)?;
        let smoothed = rts_smoother(&filter, &model)?;
        let post = joint_gaussian_oracle(&model, &z.z)?;
        for (t, s) in smoothed.states.iter().enumerate() {
            let o = post.state_marginal(t);
            worst = worst
                .max(rel_err_vec(&s.mean, &o.mean, FLOOR))
                .max(rel_err(&s.cov, &o.cov, FLOOR));
        }
        let dense = crate::smoothing::oracle::JointGaussian::build(&model, &model.prior_policy)?.log_evidence(&z.z)?;
        worst_evidence = worst_evidence.max((filter.total_log_evidence() - dense).abs());
    }
    Ok(vec![
        CheckResult {
            name: "smoother-agreement",
            passed: worst <= 1e-10,
            metric: worst,
            tolerance: 1e-10,
            detail: format!("max relative error of smoothed marginals over {} models", cfg.trials),
        },
        CheckResult {
            name: "log-evidence",
            passed: worst_evidence <= 1e-8,
            metric: worst_evidence,
            tolerance: 1e-8,
            detail: "absolute difference between filter and dense log p(Z)".into(),
        },
    ])
}

fn gain_gap(model: &ChmmModel, z: &MeasurementSequence) -> Result<f64> {
    let obs = model.obs_quadratics(&z.z)?;
    let v = backward_pass(model, &obs, &VanillaQ)?.policy;
    let n = backward_pass(model, &obs, &NaturalQ)?.policy;
    let diff = v.steps.iter().zip(&n.steps).map(|(a, b)| (&a.gain - &b.gain).norm()).fold(0.0, f64::max);
    let scale = v.steps.iter().map(|s| s.gain.norm()).fold(0.0, f64::max);
    Ok(diff / scale.max(FLOOR))
}

/// Vanilla and natural coincide as process noise vanishes and differ under noise.
pub fn deterministic_limit(cfg: SuiteConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let base = RandomModelSpec { n_x: 3, n_u: 2, n_z: 2, steps: cfg.max_steps.max(2), qcov_scale: None };
    let mut worst_small: f64 = 0.0;
    let mut best_large: f64 = f64::INFINITY;
    for _ in 0..10 {
        let (mut model, z) = model_and_data(&mut rng, base);
        for (eps, slot) in [(1e-10, 0), (1.0, 1)] {
            for tr in &mut model.transitions {
                tr.qcov = DMatrix::identity(3, 3) * eps;
            }
            let gap = gain_gap(&model, &z)?;
            if slot == 0 {
                worst_small = worst_small.max(gap);
            } else {
                best_large = best_large.min(gap);
            }
        }
    }
    Ok(vec![
        CheckResult {
            name: "deterministic-limit",
            passed: worst_small <= 1e-6,
            metric: worst_small,
            tolerance: 1e-6,
            detail: "max_t |K_vanilla - K_natural| / max_t |K_vanilla| with Qcov = 1e-10 I".into(),
        },
        CheckResult {
            name: "methods-distinct",
            passed: best_large > 1e-3,
            metric: best_large,
            tolerance: 1e-3,
            detail: "same ratio with Qcov = I; must exceed the tolerance".into(),
        },
    ])
}

/// Local optimality of each extracted policy for its own divergence.
pub fn projection_optimality(cfg: SuiteConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let steps = cfg.max_steps.clamp(2, 4);
    let (model, z) = model_and_data(&mut rng, RandomModelSpec { n_x: 2, n_u: 1, n_z: 1, steps, qcov_scale: None });
    let post = joint_gaussian_oracle(&model, &z.z)?;
    let vanilla = extract_vanilla(&model, std::slice::from_ref(&z))?.components.remove(0);
    let m = probe_local_optimum(&vanilla, |p| m_projection_divergence(&post, &model, p), 1e-5, 20, 1e-2, &mut rng)?;

    let (det, zd) = model_and_data(&mut rng, RandomModelSpec { n_x: 2, n_u: 2, n_z: 1, steps, qcov_scale: Some(0.0) });
    let obs = det.obs_quadratics(&zd.z)?;
    let natural = extract_natural(&det, std::slice::from_ref(&zd))?;
    let i = probe_local_optimum(&natural, |p| i_projection_objective(&det, &obs, p), 1e-5, 20, 1e-2, &mut rng)?;

    let result = |name, r: crate::projection::OptimalityReport| CheckResult {
        name,
        passed: r.is_local_minimum(1e-5),
        metric: r.relative_gradient,
        tolerance: 1e-5,
        detail: format!(
            "relative gradient; {}/{} perturbations increase (min increase {:.2e})",
            r.increasing, r.perturbations, r.min_increase
        ),
    };
    Ok(vec![result("m-projection-optimality", m), result("i-projection-optimality", i)])
}

/// Uninformative measurements return the prior policy from both extractors.
pub fn prior_recovery(cfg: SuiteConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(4));
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let spec = sample_spec(&mut rng, cfg.max_steps);
        let (mut model, z) = model_and_data(&mut rng, spec);
        for e in &mut model.emissions {
            e.rcov *= 1e12;
        }
        let v = extract_vanilla(&model, std::slice::from_ref(&z))?.components.remove(0);
        let n = extract_natural(&model, std::slice::from_ref(&z))?;
        for p in [&v, &n] {
            for (a, b) in p.steps.iter().zip(&model.prior_policy.steps) {
                worst = worst
                    .max((&a.gain - &b.gain).amax())
                    .max((&a.offset - &b.offset).amax())
                    .max((&a.cov - &b.cov).amax());
            }
        }
    }
    Ok(CheckResult {
        name: "prior-recovery",
        passed: worst <= 1e-4,
        metric: worst,
        tolerance: 1e-4,
        detail: "max abs parameter difference to rho with Rcov x 1e12".into(),
    })
}

pub fn run_suite(cfg: SuiteConfig) -> Result<Vec<CheckResult>> {
    let mut out = vec![oracle_equivalence(cfg)?];
    out.extend(smoother_agreement(cfg)?);
    out.extend(deterministic_limit(cfg)?);
    out.extend(projection_optimality(cfg)?);
    out.push(prior_recovery(cfg)?);
    Ok(out)
}
