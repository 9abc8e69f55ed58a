//! Benchmark sweep over prior-policy variance and number of sequences.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ApcdError, Result};
use crate::lqer::LqerCost;
use crate::model::{ChmmModel, LinearPolicy, MeasurementSequence};
use crate::policy::{ControlPolicy, MeanOnly};
use crate::registry::{extractors, synthesizers};
use crate::simulator::{build_tracking_model, generate_dataset, BenchmarkSpec, Dataset, NoiseBank, Simulator};

fn ln_binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum()
}

/// `ln(exp(a) - p)` for `exp(a) > p >= 0`.
fn ln_minus(a: f64, p: f64) -> f64 {
    if p == 0.0 {
        a
    } else {
        a + (-(p.ln() - a).exp()).ln_1p()
    }
}

/// Smallest `P >= 1` with `prod_{p=1..P} (A - p) / (B - p) <= f_bar`, where
/// `A = C(pool - 1, n)` counts the subsets that miss a given sequence and
/// `B = C(pool, n)` counts all subsets.
pub fn required_permutations(pool: usize, n: usize, f_bar: f64) -> usize {
    assert!(1 <= n && n <= pool, "need 1 <= N <= pool");
    if n == pool || f_bar >= 1.0 {
        return 1;
    }
    let ln_a = ln_binomial(pool - 1, n);
    let ln_b = ln_binomial(pool, n);
    let ln_bar = f_bar.ln();
    let mut ln_f = 0.0;
    let mut p = 1usize;
    loop {
        let pf = p as f64;
        if ln_a <= pf.ln() {
            // the factor (A - p) reached zero
            return p;
        }
        ln_f += ln_minus(ln_a, pf) - ln_minus(ln_b, pf);
        if ln_f <= ln_bar {
            return p;
        }
        p += 1;
    }
}

/// `count` pairwise distinct `n`-subsets of `0..pool`, each sorted.
pub fn sample_subsets(pool: usize, n: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let total = ln_binomial(pool, n).exp();
    if (count as f64) > total + 0.5 {
        return Err(ApcdError::Config(format!(
            "cannot draw {count} distinct subsets of size {n} from {pool}"
        )));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut s = sample(rng, pool, n).into_vec();
        s.sort_unstable();
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    Ok(out)
}

/// Result of evaluating one policy on a noise bank.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// `(1/lambda) ln mean_i exp(lambda J_i)`; infinite when any run diverged.
    pub objective: f64,
    /// `mean_i J_i`
    pub quad_cost: f64,
    /// Mean over runs of the time-mean position error to the reference.
    pub mean_position_error: f64,
    pub diverged: bool,
}

/// `ln mean exp(v)` with max-subtraction.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (s / values.len() as f64).ln()
}

/// Rolls out the policy's mean control on every run of the bank.
pub fn evaluate_objective(
    model: &ChmmModel,
    cost: &LqerCost,
    policy: &dyn ControlPolicy,
    bank: &NoiseBank,
    runs: usize,
) -> Result<Evaluation> {
    if runs == 0 || runs > bank.len() {
        return Err(ApcdError::Config(format!("bank has {} runs, {runs} requested", bank.len())));
    }
    let sim = Simulator::new(model);
    let proxy = MeanOnly(policy);
    let n_p = cost.rp.nrows();
    let per_run: Vec<Option<(f64, f64)>> = (0..runs)
        .into_par_iter()
        .map(|i| match sim.simulate(&proxy, bank, i) {
            Ok((tr, _)) => {
                let mut j = 0.0;
                let mut err = 0.0;
                for (t, (x, u)) in tr.states.iter().zip(&tr.controls).enumerate() {
                    j += cost.stage_cost(t, x, u);
                    err += (x.rows(0, n_p) - &cost.reference[t]).norm();
                }
                let ok = j.is_finite();
                Ok(ok.then(|| (j, err / tr.states.len() as f64)))
            }
            Err(ApcdError::Diverged { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let diverged = per_run.iter().any(Option::is_none);
    if diverged {
        return Ok(Evaluation {
            objective: f64::INFINITY,
            quad_cost: f64::INFINITY,
            mean_position_error: f64::INFINITY,
            diverged,
        });
    }
    let (js, errs): (Vec<f64>, Vec<f64>) = per_run.into_iter().flatten().unzip();
    let n = js.len() as f64;
    let scaled: Vec<f64> = js.iter().map(|j| cost.lambda * j).collect();
    Ok(Evaluation {
        objective: log_mean_exp(&scaled) / cost.lambda,
        quad_cost: js.iter().sum::<f64>() / n,
        mean_position_error: errs.iter().sum::<f64>() / n,
        diverged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub sigma_sq: Vec<f64>,
    pub n: Vec<usize>,
    /// Sequences available for extraction: runs `0..pool` of the dataset.
    pub pool: usize,
    pub f_bar: f64,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self { sigma_sq: vec![1e4], n: vec![1, 2, 4, 8], pool: 20, f_bar: 0.01 }
    }
}

/// The single reproducibility artifact: benchmark, dataset size, sweep, seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkSpec,
    /// Total experiments `M`, used for demonstrations and validation.
    pub runs: usize,
    pub seed: u64,
    pub demonstrator: String,
    pub sweep: SweepGrid,
    /// Fill the `runtime_ms` column. Off by default so outputs are reproducible.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// 0.5 s horizon, 40 runs, pool of 20.
    pub fn desk() -> Self {
        Self {
            benchmark: BenchmarkSpec::desk(),
            runs: 40,
            seed: 7,
            demonstrator: "lqer".into(),
            sweep: SweepGrid::default(),
            timing: false,
        }
    }

    /// 2 s horizon, 100 runs, pool of 50.
    pub fn full_scale() -> Self {
        Self {
            benchmark: BenchmarkSpec::default(),
            runs: 100,
            sweep: SweepGrid { sigma_sq: vec![1e2, 1e4, 1e6], n: vec![1, 2, 4, 8, 16], pool: 50, f_bar: 0.01 },
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        let g = &self.sweep;
        if self.runs == 0 {
            return Err(ApcdError::Config("runs must be at least 1".into()));
        }
        if g.pool == 0 || g.pool > self.runs {
            return Err(ApcdError::Config(format!("pool {} must be in 1..={}", g.pool, self.runs)));
        }
        if let Some(n) = g.n.iter().find(|n| **n == 0 || **n > g.pool) {
            return Err(ApcdError::Config(format!("N = {n} must be in 1..=pool ({})", g.pool)));
        }
        if !(g.f_bar > 0.0 && g.f_bar < 1.0) {
            return Err(ApcdError::Config(format!("f_bar must be in (0, 1), got {}", g.f_bar)));
        }
        if let Some(s) = g.sigma_sq.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(ApcdError::Config(format!("sigma_sq must be positive, got {s}")));
        }
        synthesizers().get(&self.demonstrator)?;
        Ok(())
    }
}

/// Model, cost, demonstrator and demonstration dataset of one configuration.
pub struct Experiment {
    pub model: ChmmModel,
    pub cost: LqerCost,
    pub demo: LinearPolicy,
    pub data: Dataset,
}

pub fn prepare_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.benchmark.noise_seed);
    let (model, cost) = build_tracking_model(&cfg.benchmark, &mut rng)?;
    let started = Instant::now();
    let demo = synthesizers().get(&cfg.demonstrator)?.synthesize(&model.transitions, &cost)?;
    log::info!("stage=synthesize demonstrator={} ms={}", cfg.demonstrator, started.elapsed().as_millis());
    let started = Instant::now();
    let data = generate_dataset(&model, &demo, cfg.runs, cfg.seed)?;
    log::info!("stage=generate runs={} ms={}", cfg.runs, started.elapsed().as_millis());
    Ok(Experiment { model, cost, demo, data })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma_sq: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub perm: usize,
    pub method: String,
    pub objective: f64,
    pub quad_cost: f64,
    pub runtime_ms: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

pub const METHODS: [&str; 3] = ["vanilla", "natural", "lqer"];

fn method_rank(m: &str) -> usize {
    METHODS.iter().position(|x| *x == m).unwrap_or(METHODS.len())
}

fn sort_rows(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| {
        a.sigma_sq
            .total_cmp(&b.sigma_sq)
            .then(a.n.cmp(&b.n))
            .then(a.perm.cmp(&b.perm))
            .then(method_rank(&a.method).cmp(&method_rank(&b.method)))
    });
}

struct Job {
    sigma_idx: usize,
    n: usize,
    perm: usize,
    subset: Vec<usize>,
}

fn row_from(sigma_sq: f64, job: &Job, method: &str, ev: &Evaluation, ms: Option<f64>) -> SweepRow {
    SweepRow {
        sigma_sq,
        n: job.n,
        perm: job.perm,
        method: method.to_string(),
        objective: ev.objective,
        quad_cost: ev.quad_cost,
        runtime_ms: ms,
        diverged: ev.diverged,
    }
}

fn diverged_eval() -> Evaluation {
    Evaluation {
        objective: f64::INFINITY,
        quad_cost: f64::INFINITY,
        mean_position_error: f64::INFINITY,
        diverged: true,
    }
}

/// Subsets for every `N` of the grid. They depend only on `(seed, N)`, so
/// every variance sees the same sequence combinations.
pub fn sweep_subsets(cfg: &ExperimentConfig) -> Result<Vec<(usize, Vec<Vec<usize>>)>> {
    cfg.sweep
        .n
        .iter()
        .map(|&n| {
            let p = required_permutations(cfg.sweep.pool, n, cfg.sweep.f_bar);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1 + n as u64);
            Ok((n, sample_subsets(cfg.sweep.pool, n, p, &mut rng)?))
        })
        .collect()
}

pub const RESULTS_FILE: &str = "results.csv";
pub const PARTIAL_FILE: &str = "results.partial.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Runs every `(sigma_sq, N, permutation)` cell on the rayon pool. With an
/// output directory, finished rows are streamed to `results.partial.csv`,
/// which is replaced by the sorted `results.csv` at the end.
pub fn run_sweep(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<SweepResult> {
    let exp = prepare_experiment(cfg)?;
    run_sweep_on(cfg, &exp, out_dir)
}

pub fn run_sweep_on(cfg: &ExperimentConfig, exp: &Experiment, out_dir: Option<&Path>) -> Result<SweepResult> {
    let bank = &exp.data.bank;
    let pool: Vec<MeasurementSequence> = exp.data.measurements[..cfg.sweep.pool].to_vec();
    let baseline = evaluate_objective(&exp.model, &exp.cost, &exp.demo, bank, cfg.runs)?;
    log::info!("stage=baseline objective={}", baseline.objective);

    let mut jobs = Vec::new();
    for (sigma_idx, _) in cfg.sweep.sigma_sq.iter().enumerate() {
        for (n, subsets) in sweep_subsets(cfg)? {
            for (perm, subset) in subsets.into_iter().enumerate() {
                jobs.push(Job { sigma_idx, n, perm, subset });
            }
        }
    }
    let models: Vec<ChmmModel> = cfg
        .sweep
        .sigma_sq
        .iter()
        .map(|s| {
            let d = exp.model.dims;
            exp.model.with_prior_policy(LinearPolicy::isotropic(d.steps, d.n_x, d.n_u, *s))
        })
        .collect();

    let partial_path = out_dir.map(|d| d.join(PARTIAL_FILE));
    let writer = match &partial_path {
        Some(p) => Some(Mutex::new(csv::Writer::from_path(p)?)),
        None => None,
    };
    let registry = extractors();
    let started = Instant::now();
    let rows: Vec<Vec<SweepRow>> = jobs
        .par_iter()
        .map(|job| {
            let sigma_sq = cfg.sweep.sigma_sq[job.sigma_idx];
            let model = &models[job.sigma_idx];
            let seqs: Vec<MeasurementSequence> = job.subset.iter().map(|i| pool[*i].clone()).collect();
            let mut rows = Vec::with_capacity(3);
            for method in ["vanilla", "natural"] {
                let t0 = Instant::now();
                let ev = match registry.get(method)?.extract(model, &seqs) {
                    Ok(policy) => evaluate_objective(model, &exp.cost, policy.as_ref(), bank, cfg.runs)?,
                    Err(e) if e.is_numerical() => {
                        log::warn!("sigma_sq={sigma_sq} N={} perm={} method={method}: {e}", job.n, job.perm);
                        diverged_eval()
                    }
                    Err(e) => return Err(e),
                };
                let ms = cfg.timing.then(|| t0.elapsed().as_secs_f64() * 1e3);
                rows.push(row_from(sigma_sq, job, method, &ev, ms));
            }
            rows.push(row_from(sigma_sq, job, "lqer", &baseline, cfg.timing.then_some(0.0)));
            if let Some(w) = &writer {
                let mut w = w.lock().expect("result writer poisoned");
                for r in &rows {
                    w.serialize(r)?;
                }
                w.flush().map_err(|e| ApcdError::io("flushing partial results", e))?;
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    log::info!("stage=sweep jobs={} ms={}", jobs.len(), started.elapsed().as_millis());

    let mut rows: Vec<SweepRow> = rows.into_iter().flatten().collect();
    sort_rows(&mut rows);
    let result = SweepResult { rows };
    if let Some(dir) = out_dir {
        write_results(&dir.join(RESULTS_FILE), &result.rows)?;
        write_summary(&dir.join(SUMMARY_FILE), &summarize(&result.rows))?;
        write_plot_data(dir, &summarize(&result.rows))?;
        if let Some(p) = partial_path {
            drop(writer);
            std::fs::remove_file(&p).map_err(|e| ApcdError::io(format!("removing {}", p.display()), e))?;
        }
    }
    Ok(result)
}

pub fn write_results(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| ApcdError::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi || sorted[lo] == sorted[hi] {
        return sorted[lo];
    }
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sigma_sq: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub method: String,
    pub count: usize,
    pub diverged: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

/// Median and interquartile range of the objective per `(sigma_sq, N, method)`.
pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<((f64, usize, String), Vec<f64>, usize)> = Vec::new();
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    for r in &sorted {
        let key = (r.sigma_sq, r.n, r.method.clone());
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => {
                g.1.push(r.objective);
                g.2 += r.diverged as usize;
            }
            None => groups.push((key, vec![r.objective], r.diverged as usize)),
        }
    }
    let mut out: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((sigma_sq, n, method), mut v, diverged)| {
            v.sort_by(f64::total_cmp);
            let (q1, q3) = (quantile(&v, 0.25), quantile(&v, 0.75));
            SummaryRow {
                sigma_sq,
                n,
                method,
                count: v.len(),
                diverged,
                median: quantile(&v, 0.5),
                q1,
                q3,
                iqr: q3 - q1,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        a.sigma_sq
            .total_cmp(&b.sigma_sq)
            .then(method_rank(&a.method).cmp(&method_rank(&b.method)))
            .then(a.n.cmp(&b.n))
    });
    out
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| ApcdError::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

pub fn plot_file_name(sigma_sq: f64) -> String {
    format!("objective_vs_N_sigma_sq_{sigma_sq:e}.csv")
}

/// One file per variance with columns `N, <method>_median, <method>_q1, <method>_q3`.
pub fn write_plot_data(dir: &Path, summary: &[SummaryRow]) -> Result<Vec<PathBuf>> {
    let mut sigmas: Vec<f64> = summary.iter().map(|r| r.sigma_sq).collect();
    sigmas.dedup();
    let mut paths = Vec::new();
    for s in sigmas {
        let rows: Vec<&SummaryRow> = summary.iter().filter(|r| r.sigma_sq == s).collect();
        let mut ns: Vec<usize> = rows.iter().map(|r| r.n).collect();
        ns.sort_unstable();
        ns.dedup();
        let path = dir.join(plot_file_name(s));
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["N".to_string()];
        for m in METHODS {
            header.extend([format!("{m}_median"), format!("{m}_q1"), format!("{m}_q3")]);
        }
        w.write_record(&header)?;
        for n in ns {
            let mut rec = vec![n.to_string()];
            for m in METHODS {
                match rows.iter().find(|r| r.n == n && r.method == m) {
                    Some(r) => rec.extend([r.median.to_string(), r.q1.to_string(), r.q3.to_string()]),
                    None => rec.extend([String::new(), String::new(), String::new()]),
                }
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| ApcdError::io(format!("writing {}", path.display()), e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Extracts with both methods from the given runs and reports each policy's
/// evaluation next to the demonstrator's, all on the experiment's bank.
pub fn evaluate_cell(
    exp: &Experiment,
    sigma_sq: f64,
    subset: &[usize],
    runs: usize,
) -> Result<Vec<(&'static str, Evaluation)>> {
    let d = exp.model.dims;
    let model = exp.model.with_prior_policy(LinearPolicy::isotropic(d.steps, d.n_x, d.n_u, sigma_sq));
    let seqs: Vec<MeasurementSequence> = subset.iter().map(|i| exp.data.measurements[*i].clone()).collect();
    let registry = extractors();
    let mut out = Vec::new();
    for method in ["vanilla", "natural"] {
        let policy = registry.get(method)?.extract(&model, &seqs)?;
        out.push((method, evaluate_objective(&model, &exp.cost, policy.as_ref(), &exp.data.bank, runs)?));
    }
    out.push(("lqer", evaluate_objective(&model, &exp.cost, &exp.demo, &exp.data.bank, runs)?));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::{One, Zero};
    use proptest::prelude::*;

    fn binom(n: usize, k: usize) -> BigInt {
        let mut r = BigInt::one();
        for i in 0..k {
            r = r * BigInt::from(n - i) / BigInt::from(i + 1);
        }
        r
    }

    /// Exact exclusion product in rationals.
    fn exact_f(pool: usize, n: usize, p_max: usize) -> BigRational {
        let a = binom(pool - 1, n);
        let b = binom(pool, n);
        let mut f = BigRational::one();
        for p in 1..=p_max {
            let p = BigInt::from(p);
            f *= BigRational::new(&a - &p, &b - &p);
        }
        f
    }

    #[test]
    fn fifty_choose_twenty_five_needs_seven() {
        assert_eq!(required_permutations(50, 25, 0.01), 7);
        let bar = BigRational::new(BigInt::from(1), BigInt::from(100));
        assert!(exact_f(50, 25, 7) <= bar);
        assert!(exact_f(50, 25, 6) > bar);
    }

    #[test]
    fn trivial_cases() {
        assert_eq!(required_permutations(50, 50, 0.01), 1);
        assert_eq!(required_permutations(7, 7, 0.5), 1);
        assert_eq!(required_permutations(50, 25, 1.0), 1);
    }

    #[test]
    fn matches_exact_rational_evaluation() {
        let bar = BigRational::new(BigInt::from(1), BigInt::from(100));
        for (pool, n) in [(20, 1), (20, 2), (20, 4), (20, 8), (10, 3), (50, 1), (30, 29)] {
            let p = required_permutations(pool, n, 0.01);
            assert!(exact_f(pool, n, p) <= bar, "pool={pool} n={n} p={p}");
            if p > 1 {
                assert!(exact_f(pool, n, p - 1) > bar, "pool={pool} n={n} p={p}");
            }
            assert!(!exact_f(pool, n, p).is_zero() || p == pool - n);
        }
    }

    #[test]
    fn subsets_are_distinct_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_subsets(8, 3, 56, &mut rng).unwrap();
        let set: BTreeSet<_> = s.iter().cloned().collect();
        assert_eq!(set.len(), 56);
        assert!(sample_subsets(8, 3, 57, &mut rng).is_err());
    }

    /// Probability that a fixed index is in none of the `P` subsets.
    fn exclusion_rate(pool: usize, n: usize, trials: usize) -> (f64, f64) {
        let p = required_permutations(pool, n, 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let missed = (0..trials)
            .filter(|_| {
                sample_subsets(pool, n, p, &mut rng)
                    .unwrap()
                    .iter()
                    .all(|s| !s.contains(&0))
            })
            .count();
        let rate = missed as f64 / trials as f64;
        let sigma = (0.01 * 0.99 / trials as f64).sqrt();
        (rate, sigma)
    }

    #[test]
    fn exclusion_probability_is_bounded() {
        for (pool, n) in [(50, 25), (20, 4)] {
            let (rate, sigma) = exclusion_rate(pool, n, 10_000);
            assert!(rate <= 0.01 + 3.0 * sigma, "pool={pool} n={n} rate={rate}");
        }
    }

    #[test]
    fn log_mean_exp_is_stable() {
        assert!((log_mean_exp(&[0.0, 0.0]) - 0.0).abs() < 1e-15);
        assert!((log_mean_exp(&[1000.0, 1000.0]) - 1000.0).abs() < 1e-12);
        let v = log_mean_exp(&[1.0, 2.0, 3.0]);
        assert!((v - ((1f64.exp() + 2f64.exp() + 3f64.exp()) / 3.0).ln()).abs() < 1e-14);
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&[f64::INFINITY, f64::INFINITY], 0.5), f64::INFINITY);
    }

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk();
        cfg.benchmark.steps = 41;
        cfg.runs = 6;
        cfg.sweep = SweepGrid { sigma_sq: vec![1e4], n: vec![1, 2], pool: 4, f_bar: 0.2 };
        cfg
    }

    #[test]
    fn zero_weights_give_zero_objective() {
        let exp = prepare_experiment(&tiny_config()).unwrap();
        let mut cost = exp.cost.clone();
        cost.rp *= 0.0;
        cost.rv *= 0.0;
        cost.ru *= 0.0;
        let ev = evaluate_objective(&exp.model, &cost, &exp.demo, &exp.data.bank, 6).unwrap();
        assert_eq!(ev.objective, 0.0);
        assert_eq!(ev.quad_cost, 0.0);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let exp = prepare_experiment(&tiny_config()).unwrap();
        let a = evaluate_objective(&exp.model, &exp.cost, &exp.demo, &exp.data.bank, 6).unwrap();
        let b = evaluate_objective(&exp.model, &exp.cost, &exp.demo, &exp.data.bank, 6).unwrap();
        assert_eq!(a, b);
        assert!(a.objective.is_finite() && a.objective >= a.quad_cost);
    }

    #[test]
    fn sweep_row_count_and_files() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let res = run_sweep(&cfg, Some(dir.path())).unwrap();
        let p1 = required_permutations(4, 1, 0.2);
        let p2 = required_permutations(4, 2, 0.2);
        assert_eq!(res.rows.len(), (p1 + p2) * 3);
        assert_eq!(read_results(&dir.path().join(RESULTS_FILE)).unwrap(), res.rows);
        assert!(!dir.path().join(PARTIAL_FILE).exists());
        assert!(dir.path().join(SUMMARY_FILE).exists());
        assert!(dir.path().join(plot_file_name(1e4)).exists());
        assert!(res.rows.iter().all(|r| r.runtime_ms.is_none()));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_config();
        cfg.sweep.n = vec![5];
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.sweep.f_bar = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.demonstrator = "pid".into();
        assert!(cfg.validate().is_err());
    }

    fn finite_or_inf() -> impl Strategy<Value = f64> {
        prop_oneof![any::<f64>().prop_filter("not nan", |v| !v.is_nan()), Just(f64::INFINITY)]
    }

    proptest! {
        #[test]
        fn results_csv_round_trips(
            rows in proptest::collection::vec(
                (finite_or_inf(), 1usize..100, 0usize..50, 0usize..3, finite_or_inf(), finite_or_inf(),
                 proptest::option::of(0f64..1e6), any::<bool>()),
                0..20,
            )
        ) {
            let rows: Vec<SweepRow> = rows
                .into_iter()
                .map(|(s, n, perm, m, o, q, rt, d)| SweepRow {
                    sigma_sq: s, n, perm, method: METHODS[m].to_string(),
                    objective: o, quad_cost: q, runtime_ms: rt, diverged: d,
                })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.csv");
            write_results(&path, &rows).unwrap();
            prop_assert_eq!(read_results(&path).unwrap(), rows);
        }
    }
}
