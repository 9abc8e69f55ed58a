//! JSON documents for models (`chmm-model/v1`) and extracted policies
//! (`apcd-policy/v1`). Matrices are row-major nested arrays.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::apcd::MixturePolicy;
use crate::error::{ApcdError, Result};
use crate::linalg::{from_rows, to_rows};
use crate::model::{ChmmModel, Dims, EmissionStep, GaussianPrior, LinearPolicy, PolicyStep, TransitionStep};
use crate::smoothing::GaussianMarginal;

pub const MODEL_SCHEMA: &str = "chmm-model/v1";
pub const POLICY_SCHEMA: &str = "apcd-policy/v1";

type Rows = Vec<Vec<f64>>;

fn mat(rows: &Rows, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    let m = from_rows(rows, ncols).ok_or_else(|| ApcdError::Shape(format!("{what}: ragged rows")))?;
    Ok(m)
}

fn mat_shape(rows: &Rows, nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows {
        return Err(ApcdError::Shape(format!("{what}: expected {nrows} rows, got {}", rows.len())));
    }
    if nrows == 0 {
        return Ok(DMatrix::zeros(0, ncols));
    }
    mat(rows, ncols, what)
}

fn vec_len(v: &[f64], n: usize, what: &str) -> Result<DVector<f64>> {
    if v.len() != n {
        return Err(ApcdError::Shape(format!("{what}: expected length {n}, got {}", v.len())));
    }
    Ok(DVector::from_column_slice(v))
}

fn ensure_schema(found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(ApcdError::Config(format!("expected schema '{expected}', found '{found}'")));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DimsDoc {
    pub n_x: usize,
    pub n_u: usize,
    pub n_z: usize,
    pub steps: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GaussianDoc {
    pub mean: Vec<f64>,
    pub cov: Rows,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TransitionDoc {
    #[serde(rename = "Fx")]
    pub fx: Rows,
    #[serde(rename = "Fu")]
    pub fu: Rows,
    pub f: Vec<f64>,
    #[serde(rename = "Qcov")]
    pub qcov: Rows,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmissionDoc {
    #[serde(rename = "Gx")]
    pub gx: Rows,
    #[serde(rename = "Gu")]
    pub gu: Rows,
    pub g: Vec<f64>,
    #[serde(rename = "Rcov")]
    pub rcov: Rows,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PolicyStepDoc {
    #[serde(rename = "K")]
    pub gain: Rows,
    pub k: Vec<f64>,
    #[serde(rename = "Sigma")]
    pub cov: Rows,
}

/// A step list that may be stored once and repeated over the horizon.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepList<T> {
    #[serde(default)]
    pub broadcast: bool,
    pub steps: Vec<T>,
}

impl<T: Clone + PartialEq> StepList<T> {
    fn compact(items: Vec<T>) -> Self {
        if items.len() > 1 && items.iter().all(|s| *s == items[0]) {
            Self { broadcast: true, steps: vec![items[0].clone()] }
        } else {
            Self { broadcast: false, steps: items }
        }
    }

    fn expand(&self, len: usize, what: &str) -> Result<Vec<T>> {
        if self.broadcast {
            if self.steps.len() != 1 {
                return Err(ApcdError::Config(format!("{what}: broadcast lists hold exactly one step")));
            }
            Ok(vec![self.steps[0].clone(); len])
        } else if self.steps.len() != len {
            Err(ApcdError::Config(format!("{what}: expected {len} steps, got {}", self.steps.len())))
        } else {
            Ok(self.steps.clone())
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelDoc {
    pub schema: String,
    pub dims: DimsDoc,
    pub prior: GaussianDoc,
    pub transitions: StepList<TransitionDoc>,
    pub emissions: StepList<EmissionDoc>,
    pub prior_policy: StepList<PolicyStepDoc>,
}

fn gaussian_doc(mean: &DVector<f64>, cov: &DMatrix<f64>) -> GaussianDoc {
    GaussianDoc { mean: mean.iter().copied().collect(), cov: to_rows(cov) }
}

pub fn policy_step_doc(p: &PolicyStep) -> PolicyStepDoc {
    PolicyStepDoc {
        gain: to_rows(&p.gain),
        k: p.offset.iter().copied().collect(),
        cov: to_rows(&p.cov),
    }
}

fn policy_step_from_doc(d: &PolicyStepDoc, n_x: usize, n_u: usize) -> Result<PolicyStep> {
    Ok(PolicyStep::new(
        mat_shape(&d.gain, n_u, n_x, "K")?,
        vec_len(&d.k, n_u, "k")?,
        mat_shape(&d.cov, n_u, n_u, "Sigma")?,
    ))
}

impl ModelDoc {
    pub fn from_model(m: &ChmmModel) -> Self {
        let d = m.dims;
        Self {
            schema: MODEL_SCHEMA.into(),
            dims: DimsDoc { n_x: d.n_x, n_u: d.n_u, n_z: d.n_z, steps: d.steps, dt: d.dt },
            prior: gaussian_doc(&m.prior.mean, &m.prior.cov),
            transitions: StepList::compact(
                m.transitions
                    .iter()
                    .map(|s| TransitionDoc {
                        fx: to_rows(&s.fx),
                        fu: to_rows(&s.fu),
                        f: s.f.iter().copied().collect(),
                        qcov: to_rows(&s.qcov),
                    })
                    .collect(),
            ),
            emissions: StepList::compact(
                m.emissions
                    .iter()
                    .map(|s| EmissionDoc {
                        gx: to_rows(&s.gx),
                        gu: to_rows(&s.gu),
                        g: s.g.iter().copied().collect(),
                        rcov: to_rows(&s.rcov),
                    })
                    .collect(),
            ),
            prior_policy: StepList::compact(m.prior_policy.steps.iter().map(policy_step_doc).collect()),
        }
    }

    pub fn to_model(&self) -> Result<ChmmModel> {
        ensure_schema(&self.schema, MODEL_SCHEMA)?;
        let DimsDoc { n_x, n_u, n_z, steps, dt } = self.dims;
        let dims = Dims { n_x, n_u, n_z, steps, dt };
        let prior = GaussianPrior {
            mean: vec_len(&self.prior.mean, n_x, "prior.mean")?,
            cov: mat_shape(&self.prior.cov, n_x, n_x, "prior.cov")?,
        };
        let transitions = self
            .transitions
            .expand(steps.saturating_sub(1), "transitions")?
            .iter()
            .map(|s| {
                Ok(TransitionStep::new(
                    mat_shape(&s.fx, n_x, n_x, "Fx")?,
                    mat_shape(&s.fu, n_x, n_u, "Fu")?,
                    vec_len(&s.f, n_x, "f")?,
                    mat_shape(&s.qcov, n_x, n_x, "Qcov")?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let emissions = self
            .emissions
            .expand(steps, "emissions")?
            .iter()
            .map(|s| {
                Ok(EmissionStep::new(
                    mat_shape(&s.gx, n_z, n_x, "Gx")?,
                    mat_shape(&s.gu, n_z, n_u, "Gu")?,
                    vec_len(&s.g, n_z, "g")?,
                    mat_shape(&s.rcov, n_z, n_z, "Rcov")?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let policy = self
            .prior_policy
            .expand(steps, "prior_policy")?
            .iter()
            .map(|s| policy_step_from_doc(s, n_x, n_u))
            .collect::<Result<Vec<_>>>()?;
        ChmmModel::new(dims, prior, transitions, emissions, LinearPolicy::new(policy))
    }
}

pub fn write_model(path: &Path, model: &ChmmModel) -> Result<()> {
    write_json(path, &ModelDoc::from_model(model))
}

pub fn read_model(path: &Path) -> Result<ChmmModel> {
    read_json::<ModelDoc>(path)?.to_model()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ComponentDoc {
    pub steps: Vec<PolicyStepDoc>,
    pub weight_marginals: Vec<GaussianDoc>,
}

/// Serialized extracted or synthesized policy.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PolicyDocument {
    pub schema: String,
    /// `linear` or `mixture`.
    pub kind: String,
    /// Producing algorithm, e.g. `vanilla`, `natural`, `lqer`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    pub n_x: usize,
    pub n_u: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<PolicyStepDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<ComponentDoc>,
}

impl PolicyDocument {
    pub fn from_linear(p: &LinearPolicy) -> Self {
        let (n_u, n_x) = p.steps.first().map(|s| s.gain.shape()).unwrap_or((0, 0));
        Self {
            schema: POLICY_SCHEMA.into(),
            kind: "linear".into(),
            method: None,
            n_x,
            n_u,
            steps: p.steps.iter().map(policy_step_doc).collect(),
            components: Vec::new(),
        }
    }

    pub fn from_mixture(m: &MixturePolicy) -> Self {
        let (n_u, n_x) = m.components[0].steps[0].gain.shape();
        Self {
            schema: POLICY_SCHEMA.into(),
            kind: "mixture".into(),
            method: None,
            n_x,
            n_u,
            steps: Vec::new(),
            components: m
                .components
                .iter()
                .zip(&m.weight_marginals)
                .map(|(c, w)| ComponentDoc {
                    steps: c.steps.iter().map(policy_step_doc).collect(),
                    weight_marginals: w.iter().map(|g| gaussian_doc(&g.mean, &g.cov)).collect(),
                })
                .collect(),
        }
    }

    pub fn with_method(mut self, method: &str) -> Self {
        self.method = Some(method.to_string());
        self
    }

    fn linear_from(&self, steps: &[PolicyStepDoc]) -> Result<LinearPolicy> {
        Ok(LinearPolicy::new(
            steps
                .iter()
                .map(|s| policy_step_from_doc(s, self.n_x, self.n_u))
                .collect::<Result<_>>()?,
        ))
    }

    pub fn to_linear(&self) -> Result<LinearPolicy> {
        ensure_schema(&self.schema, POLICY_SCHEMA)?;
        if self.kind != "linear" {
            return Err(ApcdError::Config(format!("expected a linear policy, found '{}'", self.kind)));
        }
        self.linear_from(&self.steps)
    }

    pub fn to_mixture(&self) -> Result<MixturePolicy> {
        ensure_schema(&self.schema, POLICY_SCHEMA)?;
        if self.kind != "mixture" {
            return Err(ApcdError::Config(format!("expected a mixture policy, found '{}'", self.kind)));
        }
        let mut comps = Vec::new();
        let mut weights = Vec::new();
        for c in &self.components {
            comps.push(self.linear_from(&c.steps)?);
            weights.push(
                c.weight_marginals
                    .iter()
                    .map(|g| {
                        Ok(GaussianMarginal::new(
                            vec_len(&g.mean, self.n_x, "weight mean")?,
                            mat_shape(&g.cov, self.n_x, self.n_x, "weight cov")?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        MixturePolicy::new(comps, weights)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| ApcdError::io(format!("creating {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    use std::io::Write;
    w.write_all(b"\n").map_err(|e| ApcdError::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| ApcdError::io(format!("reading {}", path.display()), e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{random_model, RandomModelSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn model_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = random_model(&mut rng, RandomModelSpec { n_x: 3, n_u: 2, n_z: 2, steps: 5, qcov_scale: None });
        let text = serde_json::to_string(&ModelDoc::from_model(&model)).unwrap();
        let back: ModelDoc = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_model().unwrap(), model);
    }

    #[test]
    fn time_invariant_steps_broadcast() {
        let model = crate::model::tests::scalar_model(6);
        let doc = ModelDoc::from_model(&model);
        assert!(doc.transitions.broadcast && doc.transitions.steps.len() == 1);
        assert!(doc.emissions.broadcast);
        assert_eq!(doc.to_model().unwrap(), model);
    }

    #[test]
    fn wrong_schema_is_rejected() {
        let model = crate::model::tests::scalar_model(3);
        let mut doc = ModelDoc::from_model(&model);
        doc.schema = "chmm-model/v0".into();
        assert!(doc.to_model().is_err());
    }

    #[test]
    fn linear_policy_round_trip() {
        let p = LinearPolicy::isotropic(4, 2, 1, 3.0);
        let doc = PolicyDocument::from_linear(&p).with_method("natural");
        let text = serde_json::to_string(&doc).unwrap();
        let back: PolicyDocument = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_linear().unwrap(), p);
        assert!(back.to_mixture().is_err());
    }
}
