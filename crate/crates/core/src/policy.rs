//! Runtime-polymorphic feedback laws consumed by the simulator.

use nalgebra::{DMatrix, DVector};

use crate::apcd::{mixture_mean_control, MixturePolicy};
use crate::error::{ApcdError, Result};
use crate::model::LinearPolicy;
use crate::schema::PolicyDocument;

pub trait ControlPolicy: Send + Sync {
    fn kind(&self) -> &'static str;

    fn steps(&self) -> usize;

    fn mean_control(&self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>>;

    /// Covariance of the control noise added in simulation, if any.
    fn noise_cov(&self, _t: usize) -> Option<&DMatrix<f64>> {
        None
    }

    fn to_document(&self) -> PolicyDocument;
}

impl ControlPolicy for LinearPolicy {
    fn kind(&self) -> &'static str {
        "linear"
    }

    fn steps(&self) -> usize {
        self.len()
    }

    fn mean_control(&self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        let step = self
            .steps
            .get(t)
            .ok_or_else(|| ApcdError::Shape(format!("step {t} outside a {}-step policy", self.len())))?;
        Ok(step.mean(x))
    }

    fn noise_cov(&self, t: usize) -> Option<&DMatrix<f64>> {
        self.steps.get(t).filter(|s| !s.is_deterministic()).map(|s| &s.cov)
    }

    fn to_document(&self) -> PolicyDocument {
        PolicyDocument::from_linear(self)
    }
}

impl ControlPolicy for MixturePolicy {
    fn kind(&self) -> &'static str {
        "mixture"
    }

    fn steps(&self) -> usize {
        MixturePolicy::steps(self)
    }

    fn mean_control(&self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        mixture_mean_control(self, t, x)
    }

    fn to_document(&self) -> PolicyDocument {
        PolicyDocument::from_mixture(self)
    }
}

/// Drops the control noise: the deterministic mean acts as a proxy for the
/// demonstrator, and the covariance is read as epistemic uncertainty.
pub struct MeanOnly<'a>(pub &'a dyn ControlPolicy);

impl ControlPolicy for MeanOnly<'_> {
    fn kind(&self) -> &'static str {
        self.0.kind()
    }

    fn steps(&self) -> usize {
        self.0.steps()
    }

    fn mean_control(&self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.0.mean_control(t, x)
    }

    fn to_document(&self) -> PolicyDocument {
        self.0.to_document()
    }
}

/// Loads any `apcd-policy/v1` document as a trait object.
pub fn policy_from_document(doc: &PolicyDocument) -> Result<Box<dyn ControlPolicy>> {
    match doc.kind.as_str() {
        "linear" => Ok(Box::new(doc.to_linear()?)),
        "mixture" => Ok(Box::new(doc.to_mixture()?)),
        other => Err(ApcdError::Unknown { kind: "policy kind", name: other.to_string() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PolicyStep;
    use crate::smoothing::GaussianMarginal;

    #[test]
    fn linear_noise_is_hidden_by_mean_only() {
        let p = LinearPolicy::isotropic(3, 2, 1, 2.0);
        assert!(p.noise_cov(1).is_some());
        assert!(MeanOnly(&p).noise_cov(1).is_none());
        let det = LinearPolicy::new(vec![PolicyStep::zero_mean(2, 1, DMatrix::zeros(1, 1))]);
        assert!(det.noise_cov(0).is_none());
    }

    #[test]
    fn mixture_document_round_trip() {
        let comp = LinearPolicy::new(vec![PolicyStep::new(
            DMatrix::from_row_slice(1, 2, &[1.0, -2.0]),
            DVector::from_element(1, 0.5),
            DMatrix::identity(1, 1),
        )]);
        let w = vec![GaussianMarginal::new(DVector::zeros(2), DMatrix::identity(2, 2))];
        let mix = MixturePolicy::new(vec![comp.clone(), comp], vec![w.clone(), w]).unwrap();
        let doc = mix.to_document();
        let text = serde_json::to_string(&doc).unwrap();
        let back = policy_from_document(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back.kind(), "mixture");
        let x = DVector::from_row_slice(&[0.3, 0.1]);
        assert_eq!(back.mean_control(0, &x).unwrap(), mix.mean_control(0, &x).unwrap());
    }
}
