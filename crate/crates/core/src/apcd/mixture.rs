use nalgebra::{Cholesky, DVector, Dyn};

use crate::error::{ApcdError, Result};
use crate::linalg::{cholesky, gaussian_log_density};
use crate::model::LinearPolicy;
use crate::smoothing::GaussianMarginal;

/// N-component V-APCD. Component `n` is responsible for `x` at step `t`
/// in proportion to its smoothed state marginal `p(x_t | Z^n)`.
#[derive(Debug, Clone)]
pub struct MixturePolicy {
    pub components: Vec<LinearPolicy>,
    pub weight_marginals: Vec<Vec<GaussianMarginal>>,
    factors: Vec<Vec<Cholesky<f64, Dyn>>>,
}

impl MixturePolicy {
    pub fn new(components: Vec<LinearPolicy>, weight_marginals: Vec<Vec<GaussianMarginal>>) -> Result<Self> {
        if components.is_empty() {
            return Err(ApcdError::Config("a mixture needs at least one component".into()));
        }
        if components.len() != weight_marginals.len() {
            return Err(ApcdError::Shape(format!(
                "{} components but {} weight marginal lists",
                components.len(),
                weight_marginals.len()
            )));
        }
        let steps = components[0].len();
        let mut factors = Vec::with_capacity(components.len());
        for (n, (c, w)) in components.iter().zip(&weight_marginals).enumerate() {
            if c.len() != steps || w.len() != steps {
                return Err(ApcdError::Shape(format!("component {n} does not cover {steps} steps")));
            }
            let f = w
                .iter()
                .enumerate()
                .map(|(t, m)| cholesky(&m.cov).ok_or(ApcdError::SingularWeightMarginal { n, t }))
                .collect::<Result<Vec<_>>>()?;
            factors.push(f);
        }
        Ok(Self { components, weight_marginals, factors })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.components[0].len()
    }

    /// Normalized responsibilities `w_n(x)` at step `t`.
    pub fn weights(&self, t: usize, x: &DVector<f64>) -> Vec<f64> {
        let logs: Vec<f64> = self
            .weight_marginals
            .iter()
            .zip(&self.factors)
            .map(|(w, f)| gaussian_log_density(x, &w[t].mean, &f[t]))
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let n = logs.len();
        if !max.is_finite() {
            log::warn!("all mixture weights underflow at t={t}; using uniform weights");
            return vec![1.0 / n as f64; n];
        }
        let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }
}

/// `u = sum_n w_n(x) (K*_n x + k*_n)`.
pub fn mixture_mean_control(mix: &MixturePolicy, t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
    if t >= mix.steps() {
        return Err(ApcdError::Shape(format!("step {t} outside a {}-step policy", mix.steps())));
    }
    let w = mix.weights(t, x);
    let n_u = mix.components[0].steps[t].offset.len();
    let mut u = DVector::zeros(n_u);
    for (wn, c) in w.iter().zip(&mix.components) {
        if *wn > 0.0 {
            u += c.steps[t].mean(x) * *wn;
        }
    }
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PolicyStep;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn component(gain: f64, offset: f64) -> LinearPolicy {
        LinearPolicy::new(vec![PolicyStep::new(
            DMatrix::from_element(1, 2, gain),
            DVector::from_element(1, offset),
            DMatrix::identity(1, 1),
        )])
    }

    fn marginal(mean: [f64; 2], var: f64) -> Vec<GaussianMarginal> {
        vec![GaussianMarginal::new(DVector::from_row_slice(&mean), DMatrix::identity(2, 2) * var)]
    }

    #[test]
    fn single_component_is_its_mean() {
        let mix = MixturePolicy::new(vec![component(2.0, 1.0)], vec![marginal([0.0, 0.0], 1.0)]).unwrap();
        let x = DVector::from_row_slice(&[0.5, -1.0]);
        let u = mixture_mean_control(&mix, 0, &x).unwrap();
        assert!((u[0] - (2.0 * 0.5 - 2.0 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn far_separated_components_select_nearest() {
        let mix = MixturePolicy::new(
            vec![component(0.0, -1.0), component(0.0, 1.0)],
            vec![marginal([0.0, 0.0], 0.1), marginal([10.0, 0.0], 0.1)],
        )
        .unwrap();
        let x = DVector::from_row_slice(&[10.0, 0.0]);
        let w = mix.weights(0, &x);
        assert!(w[1] > 0.99);
    }

    #[test]
    fn identical_components_ignore_weights() {
        let mix = MixturePolicy::new(
            vec![component(1.5, 0.3), component(1.5, 0.3), component(1.5, 0.3)],
            vec![marginal([0.0, 0.0], 1.0), marginal([3.0, 0.0], 0.5), marginal([-2.0, 1.0], 2.0)],
        )
        .unwrap();
        let x = DVector::from_row_slice(&[0.7, 0.2]);
        let u = mixture_mean_control(&mix, 0, &x).unwrap();
        assert!((u[0] - (1.5 * 0.9 + 0.3)).abs() < 1e-14);
    }

    #[test]
    fn underflow_falls_back_to_uniform() {
        let mix = MixturePolicy::new(
            vec![component(0.0, 0.0), component(0.0, 2.0)],
            vec![marginal([0.0, 0.0], 1e-300), marginal([1.0, 0.0], 1e-300)],
        )
        .unwrap();
        let w = mix.weights(0, &DVector::from_row_slice(&[f64::INFINITY, 0.0]));
        assert_eq!(w, vec![0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn weights_form_a_distribution(
            x0 in -1e3f64..1e3, x1 in -1e3f64..1e3,
            means in proptest::collection::vec((-50f64..50.0, -50f64..50.0, 1e-3f64..1e2), 1..6),
        ) {
            let comps = means.iter().map(|_| component(1.0, 0.0)).collect();
            let marg = means.iter().map(|(a, b, v)| marginal([*a, *b], *v)).collect();
            let mix = MixturePolicy::new(comps, marg).unwrap();
            let w = mix.weights(0, &DVector::from_row_slice(&[x0, x1]));
            prop_assert!(w.iter().all(|v| *v >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
