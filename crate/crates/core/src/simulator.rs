//! Planar point-mass tracking benchmark and seeded closed-loop simulation.
//!
//! All randomness is drawn up front into a [`NoiseBank`] of standard normal
//! variates, one independent ChaCha stream per run. Covariances only color
//! the draws at simulation time, so every policy evaluated on the same bank
//! sees bit-identical noise realizations.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ApcdError, Result};
use crate::linalg::{cholesky, psd_factor};
use crate::lqer::LqerCost;
use crate::model::{
    ChmmModel, Dims, EmissionStep, GaussianPrior, LinearPolicy, MeasurementSequence, PolicyStep, TransitionStep,
    Trajectory,
};
use crate::policy::ControlPolicy;
use crate::schema::{read_model, write_model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceKind {
    Lissajous,
    Circle,
    Line,
}

impl FromStr for ReferenceKind {
    type Err = ApcdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lissajous" => Ok(Self::Lissajous),
            "circle" => Ok(Self::Circle),
            "line" => Ok(Self::Line),
            other => Err(ApcdError::Unknown { kind: "reference path", name: other.to_string() }),
        }
    }
}

impl fmt::Display for ReferenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lissajous => "lissajous",
            Self::Circle => "circle",
            Self::Line => "line",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceSpec {
    pub kind: ReferenceKind,
    /// Amplitude, radius or length in meters.
    pub size: f64,
    /// Period of the periodic paths in seconds.
    pub period: f64,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        Self { kind: ReferenceKind::Lissajous, size: 1.0, period: 2.0 }
    }
}

/// Planar reference positions starting at the origin.
pub fn generate_reference_path(spec: &ReferenceSpec, steps: usize, dt: f64) -> Vec<DVector<f64>> {
    let horizon = dt * steps.saturating_sub(1) as f64;
    let w = 2.0 * std::f64::consts::PI / spec.period;
    let r = spec.size;
    (0..steps)
        .map(|i| {
            let t = i as f64 * dt;
            let (a, b) = match spec.kind {
                ReferenceKind::Lissajous => (r * (w * t).sin(), 0.5 * r * (2.0 * w * t).sin()),
                ReferenceKind::Circle => (r * (w * t).sin(), r * (1.0 - (w * t).cos())),
                ReferenceKind::Line => (r * t / horizon, 0.0),
            };
            DVector::from_column_slice(&[a, b])
        })
        .collect()
}

/// How the random force covariance `Sigma` enters the velocity block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForceNoise {
    /// Noise added to the applied force: `Fu Sigma Fu^T = (dt/m)^2 Sigma`.
    Input,
    /// Wiener increment of the force: `dt Sigma / m^2`.
    Brownian,
}

/// Benchmark parameters. Defaults are the full-scale experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub dt: f64,
    pub steps: usize,
    pub mass: f64,
    /// Scalar multiples of the identity.
    pub rp: f64,
    pub rv: f64,
    pub ru: f64,
    pub lambda: f64,
    pub sigma0_sq: f64,
    /// Prior policy covariance magnitude stored in the model.
    pub sigma_sq: f64,
    pub reference: ReferenceSpec,
    /// Per-axis standard deviation multipliers of the force noise.
    pub force_noise_scales: [f64; 2],
    /// Per-axis standard deviation multipliers of the position measurement noise.
    pub meas_noise_scales: [f64; 2],
    pub force_noise: ForceNoise,
    /// Seed of the random covariance construction.
    pub noise_seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            dt: 2e-3,
            steps: 1001,
            mass: 1.0,
            rp: 1e4,
            rv: 1.0,
            ru: 1.0,
            lambda: 1e-4,
            sigma0_sq: 1e-1,
            sigma_sq: 1e4,
            reference: ReferenceSpec::default(),
            force_noise_scales: [10f64.sqrt(), 10.0],
            meas_noise_scales: [0.1f64.sqrt(), 0.1f64.sqrt()],
            force_noise: ForceNoise::Input,
            noise_seed: 1,
        }
    }
}

impl BenchmarkSpec {
    /// Shortened horizon (0.5 s) for quick runs.
    pub fn desk() -> Self {
        Self { steps: 251, ..Self::default() }
    }

    pub fn horizon(&self) -> f64 {
        self.dt * (self.steps - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ApcdError::Config(m.to_string()));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.steps < 2 {
            return bad("steps must be at least 2");
        }
        if !(self.mass > 0.0) {
            return bad("mass must be positive");
        }
        if !(self.rp >= 0.0 && self.rv >= 0.0 && self.ru > 0.0) {
            return bad("cost weights must be nonnegative (Ru positive)");
        }
        if !(self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if !(self.sigma0_sq > 0.0 && self.sigma_sq > 0.0) {
            return bad("variances must be positive");
        }
        if self.force_noise_scales.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("force noise scales must be nonnegative");
        }
        if self.meas_noise_scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("measurement noise scales must be positive");
        }
        if !(self.reference.size.is_finite() && self.reference.period > 0.0) {
            return bad("reference size must be finite and period positive");
        }
        Ok(())
    }
}

/// `D C D` with `C = L L^T + 1e-3 I`, `L` standard normal and `D = diag(scales)`.
pub fn make_random_spd<R: Rng + ?Sized>(dim: usize, scales: &[f64], rng: &mut R) -> DMatrix<f64> {
    assert_eq!(scales.len(), dim, "one scale per dimension");
    let l = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let c = &l * l.transpose() + DMatrix::identity(dim, dim) * 1e-3;
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(scales));
    crate::linalg::symmetrize(&(&d * c * &d))
}

/// Euler-discretized planar double integrator driven by random force noise,
/// with position-only measurements.
pub fn build_tracking_model<R: Rng + ?Sized>(spec: &BenchmarkSpec, rng: &mut R) -> Result<(ChmmModel, LqerCost)> {
    spec.validate()?;
    let dt = spec.dt;
    let i2 = DMatrix::<f64>::identity(2, 2);
    let force_cov = make_random_spd(2, &spec.force_noise_scales, rng);
    let meas_cov = make_random_spd(2, &spec.meas_noise_scales, rng);

    let mut fx = DMatrix::identity(4, 4);
    fx.view_mut((0, 2), (2, 2)).copy_from(&(&i2 * dt));
    let mut fu = DMatrix::zeros(4, 2);
    fu.view_mut((2, 0), (2, 2)).copy_from(&(&i2 * (dt / spec.mass)));
    let gain = match spec.force_noise {
        ForceNoise::Input => dt * dt,
        ForceNoise::Brownian => dt,
    } / (spec.mass * spec.mass);
    // the position block is regularized so the covariance stays PD
    let mut qcov = DMatrix::identity(4, 4) * 1e-12;
    qcov.view_mut((2, 2), (2, 2)).copy_from(&(&force_cov * gain));
    let mut gx = DMatrix::zeros(2, 4);
    gx.view_mut((0, 0), (2, 2)).copy_from(&i2);

    let dims = Dims { n_x: 4, n_u: 2, n_z: 2, steps: spec.steps, dt };
    let model = ChmmModel::time_invariant(
        dims,
        GaussianPrior { mean: DVector::zeros(4), cov: DMatrix::identity(4, 4) * spec.sigma0_sq },
        TransitionStep::new(fx, fu, DVector::zeros(4), qcov),
        EmissionStep::new(gx, DMatrix::zeros(2, 2), DVector::zeros(2), meas_cov),
        PolicyStep::zero_mean(4, 2, &i2 * spec.sigma_sq),
    )?;
    let cost = LqerCost {
        rp: &i2 * spec.rp,
        rv: &i2 * spec.rv,
        ru: &i2 * spec.ru,
        lambda: spec.lambda,
        reference: generate_reference_path(&spec.reference, spec.steps, dt),
    };
    Ok((model, cost))
}

/// Standard normal draws of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunNoise {
    pub x0: DVector<f64>,
    pub process: Vec<DVector<f64>>,
    pub policy: Vec<DVector<f64>>,
    pub measurement: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBank {
    pub seed: u64,
    pub dims: Dims,
    pub runs: Vec<RunNoise>,
}

impl NoiseBank {
    /// Run `i` is drawn from stream `i` of a ChaCha generator seeded with `seed`,
    /// so runs are independent of how many others are generated.
    pub fn new(dims: Dims, runs: usize, seed: u64) -> Self {
        let runs = (0..runs)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let mut draw = |n: usize| DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let x0 = draw(dims.n_x);
                let process = (0..dims.steps - 1).map(|_| draw(dims.n_x)).collect();
                let policy = (0..dims.steps).map(|_| draw(dims.n_u)).collect();
                let measurement = (0..dims.steps).map(|_| draw(dims.n_z)).collect();
                RunNoise { x0, process, policy, measurement }
            })
            .collect();
        Self { seed, dims, runs }
    }

    /// All-zero draws: the deterministic recursion.
    pub fn zeros(dims: Dims, runs: usize) -> Self {
        let run = RunNoise {
            x0: DVector::zeros(dims.n_x),
            process: vec![DVector::zeros(dims.n_x); dims.steps - 1],
            policy: vec![DVector::zeros(dims.n_u); dims.steps],
            measurement: vec![DVector::zeros(dims.n_z); dims.steps],
        };
        Self { seed: 0, dims, runs: vec![run; runs] }
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }
}

/// Model with its noise factors precomputed for repeated rollouts.
pub struct Simulator<'a> {
    model: &'a ChmmModel,
    prior_factor: DMatrix<f64>,
    process_factors: Vec<DMatrix<f64>>,
    meas_factors: Vec<DMatrix<f64>>,
}

impl<'a> Simulator<'a> {
    pub fn new(model: &'a ChmmModel) -> Self {
        Self {
            model,
            prior_factor: psd_factor(&model.prior.cov),
            process_factors: model.transitions.iter().map(|t| psd_factor(&t.qcov)).collect(),
            meas_factors: model.emissions.iter().map(|e| psd_factor(&e.rcov)).collect(),
        }
    }

    /// Rollout where the policy acts on the true state and measurements are
    /// only recorded.
    pub fn simulate(
        &self,
        policy: &dyn ControlPolicy,
        bank: &NoiseBank,
        run: usize,
    ) -> Result<(Trajectory, MeasurementSequence)> {
        let d = self.model.dims;
        if bank.dims != d {
            return Err(ApcdError::Shape("noise bank dimensions differ from the model".into()));
        }
        let noise = bank
            .runs
            .get(run)
            .ok_or_else(|| ApcdError::Config(format!("noise bank has no run {run}")))?;
        if policy.steps() != d.steps {
            return Err(ApcdError::Shape(format!(
                "policy covers {} steps, model has {}",
                policy.steps(),
                d.steps
            )));
        }
        let mut x = &self.model.prior.mean + &self.prior_factor * &noise.x0;
        let mut states = Vec::with_capacity(d.steps);
        let mut controls = Vec::with_capacity(d.steps);
        let mut zs = Vec::with_capacity(d.steps);
        for t in 0..d.steps {
            if !x.iter().all(|v| v.is_finite()) {
                return Err(ApcdError::Diverged { t });
            }
            let mut u = policy.mean_control(t, &x)?;
            if let Some(cov) = policy.noise_cov(t) {
                let l = cholesky(cov)
                    .map(|c| c.l())
                    .unwrap_or_else(|| psd_factor(cov));
                u += l * &noise.policy[t];
            }
            let e = &self.model.emissions[t];
            zs.push(&e.gx * &x + &e.gu * &u + &e.g + &self.meas_factors[t] * &noise.measurement[t]);
            let next = if t + 1 < d.steps {
                let tr = &self.model.transitions[t];
                &tr.fx * &x + &tr.fu * &u + &tr.f + &self.process_factors[t] * &noise.process[t]
            } else {
                x.clone()
            };
            states.push(std::mem::replace(&mut x, next));
            controls.push(u);
        }
        Ok((Trajectory { states, controls }, MeasurementSequence::new(zs)))
    }
}

pub fn simulate(
    model: &ChmmModel,
    policy: &dyn ControlPolicy,
    bank: &NoiseBank,
    run: usize,
) -> Result<(Trajectory, MeasurementSequence)> {
    Simulator::new(model).simulate(policy, bank, run)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub measurements: Vec<MeasurementSequence>,
    pub bank: NoiseBank,
}

/// `runs` closed-loop demonstrations under `demo`, one bank stream per run.
pub fn generate_dataset(model: &ChmmModel, demo: &LinearPolicy, runs: usize, seed: u64) -> Result<Dataset> {
    if runs == 0 {
        return Err(ApcdError::Config("at least one run is required".into()));
    }
    let bank = NoiseBank::new(model.dims, runs, seed);
    let sim = Simulator::new(model);
    let out: Vec<_> = (0..runs)
        .into_par_iter()
        .map(|i| sim.simulate(demo, &bank, i))
        .collect::<Result<_>>()?;
    let (trajectories, measurements) = out.into_iter().unzip();
    Ok(Dataset { trajectories, measurements, bank })
}

fn write_series(path: &Path, prefix: &str, rows: &[DVector<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("{prefix}{i}")));
    w.write_record(&header)?;
    for (t, r) in rows.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(r.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| ApcdError::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

fn read_series(path: &Path) -> Result<Vec<DVector<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| ApcdError::Config(format!("{}: row {}: {e}", path.display(), line + 2)))?;
        out.push(DVector::from_vec(vals));
    }
    Ok(out)
}

pub const MODEL_FILE: &str = "model.json";
pub const SEED_FILE: &str = "bank-seed.txt";

pub fn states_file(run: usize) -> String {
    format!("run_{run}_states.csv")
}

pub fn measurements_file(run: usize) -> String {
    format!("run_{run}_measurements.csv")
}

/// Writes `model.json`, `bank-seed.txt` and one states and one measurements
/// CSV per run.
pub fn write_dataset(dir: &Path, model: &ChmmModel, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ApcdError::io(format!("creating {}", dir.display()), e))?;
    write_model(&dir.join(MODEL_FILE), model)?;
    let seed_path = dir.join(SEED_FILE);
    let mut f = std::fs::File::create(&seed_path)
        .map_err(|e| ApcdError::io(format!("creating {}", seed_path.display()), e))?;
    writeln!(f, "{}", data.bank.seed).map_err(|e| ApcdError::io("writing bank seed", e))?;
    data.trajectories
        .par_iter()
        .zip(&data.measurements)
        .enumerate()
        .try_for_each(|(i, (tr, z))| {
            write_series(&dir.join(states_file(i)), "x", &tr.states)?;
            write_series(&dir.join(measurements_file(i)), "z", &z.z)
        })
}

/// A dataset as stored on disk: the model, the bank seed and the measurements.
pub struct StoredDataset {
    pub model: ChmmModel,
    pub seed: u64,
    pub measurements: Vec<MeasurementSequence>,
}

impl StoredDataset {
    /// Regenerates the noise bank the dataset was drawn from.
    pub fn bank(&self) -> NoiseBank {
        NoiseBank::new(self.model.dims, self.measurements.len(), self.seed)
    }
}

pub fn read_dataset(dir: &Path) -> Result<StoredDataset> {
    let model = read_model(&dir.join(MODEL_FILE))?;
    let seed_path = dir.join(SEED_FILE);
    let seed = std::fs::read_to_string(&seed_path)
        .map_err(|e| ApcdError::io(format!("reading {}", seed_path.display()), e))?
        .trim()
        .parse::<u64>()
        .map_err(|e| ApcdError::Config(format!("{}: {e}", seed_path.display())))?;
    let mut measurements = Vec::new();
    while dir.join(measurements_file(measurements.len())).exists() {
        let z = read_series(&dir.join(measurements_file(measurements.len())))?;
        if z.len() != model.dims.steps || z.iter().any(|v| v.len() != model.dims.n_z) {
            return Err(ApcdError::Shape(format!("run {} measurements do not match the model", measurements.len())));
        }
        measurements.push(MeasurementSequence::new(z));
    }
    if measurements.is_empty() {
        return Err(ApcdError::Config(format!("no measurement files in {}", dir.display())));
    }
    Ok(StoredDataset { model, seed, measurements })
}
