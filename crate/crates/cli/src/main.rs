use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use apcd_core::checks::{run_suite, SuiteConfig};
use apcd_core::harness::{
    evaluate_objective, read_results, run_sweep, sample_subsets, summarize, write_plot_data, write_summary,
    ExperimentConfig, Evaluation, SUMMARY_FILE,
};
use apcd_core::model::{LinearPolicy, MeasurementSequence};
use apcd_core::policy::policy_from_document;
use apcd_core::registry::{extractors, synthesizers};
use apcd_core::schema::{read_json, write_json, PolicyDocument};
use apcd_core::simulator::{build_tracking_model, generate_dataset, read_dataset, write_dataset};
use apcd_core::ApcdError;

const CONFIG_FILE: &str = "config.json";
const MANIFEST_FILE: &str = "manifest.json";
const DEMONSTRATOR_FILE: &str = "demonstrator.policy.json";

#[derive(Parser)]
#[command(name = "apcd", version, about = "Extract feedback policies from partial observation sequences")]
struct Cli {
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a demonstration dataset from the tracking benchmark.
    Gen(GenArgs),
    /// Extract a policy from sequences of a dataset.
    Extract(ExtractArgs),
    /// Evaluate policies on a dataset's noise bank.
    Evaluate(EvaluateArgs),
    /// Run the variance by sequence-count sweep.
    Sweep(SweepArgs),
    /// Run the oracle-equivalence and projection-optimality suites.
    OracleCheck(OracleArgs),
    /// Rebuild summary and plot series from a results file.
    PlotData(PlotArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (JSON). Flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Horizon step count.
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    steps: Option<u64>,
    /// Number of experiments M.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    runs: Option<u64>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Use the desk-scale defaults instead of the full 2 s, 100-run benchmark.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "vanilla")]
    method: String,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long, default_value_t = 1e4)]
    sigma_sq: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sequences available for extraction (the first `pool` runs).
    #[arg(long)]
    pool: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Policy files; the dataset's demonstrator is always evaluated too.
    #[arg(long, num_args = 1..)]
    policy: Vec<PathBuf>,
    /// Validation runs; defaults to all runs of the dataset.
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Use the 2 s, 100-run benchmark instead of the desk-scale defaults.
    #[arg(long)]
    full_scale: bool,
    #[arg(long)]
    pool: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    sigma_sq: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long)]
    f_bar: Option<f64>,
    /// Record per-row runtimes (makes results.csv non-reproducible).
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(2..=10))]
    steps: u64,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_digest: String,
    seed: u64,
    version: &'static str,
    started_unix: f64,
    finished_unix: f64,
    outputs: Vec<String>,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// SHA-256 of the config's JSON with sorted keys.
fn digest<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_string(&serde_json::to_value(value)?)?;
    Ok(Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
}

fn write_manifest<T: Serialize>(path: &Path, command: &str, config: &T, seed: u64, started: f64, outputs: Vec<PathBuf>) -> Result<()> {
    let m = RunManifest {
        command: command.into(),
        config_digest: digest(config)?,
        seed,
        version: env!("CARGO_PKG_VERSION"),
        started_unix: started,
        finished_unix: unix_now(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    write_json(path, &m)?;
    Ok(())
}

fn load_config(args: &ConfigArgs, base: ExperimentConfig) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => base,
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(s) = args.steps {
        cfg.benchmark.steps = s as usize;
    }
    if let Some(r) = args.runs {
        cfg.runs = r as usize;
    }
    Ok(cfg)
}

/// Error that maps to the usage exit code.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: String) -> anyhow::Error {
    Usage(msg).into()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let started = unix_now();
    let base = if args.desk { ExperimentConfig::desk() } else { ExperimentConfig::full_scale() };
    let cfg = load_config(&args.cfg, base)?;
    cfg.validate()?;
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.benchmark.noise_seed);
    let (model, cost) = build_tracking_model(&cfg.benchmark, &mut rng)?;
    let demo = synthesizers().get(&cfg.demonstrator)?.synthesize(&model.transitions, &cost)?;
    log::info!("stage=synthesize ms={}", t0.elapsed().as_millis());
    let t0 = Instant::now();
    let data = generate_dataset(&model, &demo, cfg.runs, cfg.seed)?;
    log::info!("stage=simulate runs={} ms={}", cfg.runs, t0.elapsed().as_millis());
    let t0 = Instant::now();
    write_dataset(&args.out, &model, &data)?;
    write_json(&args.out.join(CONFIG_FILE), &cfg)?;
    write_json(&args.out.join(DEMONSTRATOR_FILE), &PolicyDocument::from_linear(&demo).with_method(&cfg.demonstrator))?;
    log::info!("stage=write dir={} ms={}", args.out.display(), t0.elapsed().as_millis());
    write_manifest(&args.out.join(MANIFEST_FILE), "gen", &cfg, cfg.seed, started, vec![args.out.clone()])?;
    println!("wrote {} runs of {} steps to {}", cfg.runs, cfg.benchmark.steps, args.out.display());
    Ok(())
}

fn read_config(dir: &Path) -> Result<ExperimentConfig> {
    read_json(&dir.join(CONFIG_FILE)).with_context(|| format!("{} is not a dataset directory", dir.display()))
}

#[derive(Serialize)]
struct ExtractRecord<'a> {
    data: String,
    method: &'a str,
    n: u64,
    sigma_sq: f64,
    pool: usize,
    subset: &'a [usize],
}

fn cmd_extract(args: ExtractArgs) -> Result<()> {
    let started = unix_now();
    let extractor = extractors().get(&args.method).map_err(|e| usage(e.to_string()))?;
    if !(args.sigma_sq > 0.0 && args.sigma_sq.is_finite()) {
        return Err(usage(format!("--sigma-sq must be positive, got {}", args.sigma_sq)));
    }
    let cfg = read_config(&args.data)?;
    let stored = read_dataset(&args.data)?;
    let pool = args.pool.unwrap_or(cfg.sweep.pool.min(stored.measurements.len()));
    if pool == 0 || pool > stored.measurements.len() {
        return Err(usage(format!("--pool {pool} exceeds the {} runs of the dataset", stored.measurements.len())));
    }
    let n = args.n as usize;
    if n > pool {
        return Err(usage(format!("--n {n} exceeds the pool of {pool} sequences")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let subset = sample_subsets(pool, n, 1, &mut rng)?.remove(0);
    let d = stored.model.dims;
    let model = stored.model.with_prior_policy(LinearPolicy::isotropic(d.steps, d.n_x, d.n_u, args.sigma_sq));
    let seqs: Vec<MeasurementSequence> = subset.iter().map(|i| stored.measurements[*i].clone()).collect();
    let t0 = Instant::now();
    let policy = extractor.extract(&model, &seqs)?;
    log::info!("stage=extract method={} n={n} ms={}", args.method, t0.elapsed().as_millis());
    write_json(&args.out, &policy.to_document().with_method(&args.method))?;
    let record = ExtractRecord {
        data: args.data.display().to_string(),
        method: &args.method,
        n: args.n,
        sigma_sq: args.sigma_sq,
        pool,
        subset: &subset,
    };
    let manifest = args.out.with_extension("manifest.json");
    write_manifest(&manifest, "extract", &(&cfg, &record), args.seed, started, vec![args.out.clone()])?;
    println!("{} policy from runs {:?} written to {}", policy.kind(), subset, args.out.display());
    Ok(())
}

fn evaluation_record(w: &mut csv::Writer<std::fs::File>, name: &str, method: &str, ev: &Evaluation) -> Result<()> {
    w.write_record([
        name,
        method,
        &ev.objective.to_string(),
        &ev.quad_cost.to_string(),
        &ev.mean_position_error.to_string(),
        &ev.diverged.to_string(),
    ])?;
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let started = unix_now();
    let cfg = read_config(&args.data)?;
    let stored = read_dataset(&args.data)?;
    let runs = args.runs.unwrap_or(stored.measurements.len());
    if runs == 0 || runs > stored.measurements.len() {
        return Err(usage(format!("--runs must be in 1..={}", stored.measurements.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.benchmark.noise_seed);
    let (_, cost) = build_tracking_model(&cfg.benchmark, &mut rng)?;
    let bank = stored.bank();
    let mut w = csv::Writer::from_path(&args.out)?;
    w.write_record(["policy", "method", "objective", "quad_cost", "mean_position_error", "diverged"])?;
    let mut files = vec![args.data.join(DEMONSTRATOR_FILE)];
    files.extend(args.policy.iter().cloned());
    for file in &files {
        let doc: PolicyDocument = read_json(file)?;
        let policy = policy_from_document(&doc)?;
        let t0 = Instant::now();
        let ev = evaluate_objective(&stored.model, &cost, policy.as_ref(), &bank, runs)?;
        log::info!("stage=evaluate policy={} ms={}", file.display(), t0.elapsed().as_millis());
        let name = file.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let method = doc.method.clone().unwrap_or_else(|| doc.kind.clone());
        evaluation_record(&mut w, &name, &method, &ev)?;
        println!("{name} ({method}): objective {} quad_cost {} diverged {}", ev.objective, ev.quad_cost, ev.diverged);
    }
    w.flush()?;
    let manifest = args.out.with_extension("manifest.json");
    let names: Vec<String> = files.iter().map(|p| p.display().to_string()).collect();
    write_manifest(&manifest, "evaluate", &(&cfg, &names, runs), cfg.seed, started, vec![args.out.clone()])?;
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let started = unix_now();
    let base = if args.full_scale { ExperimentConfig::full_scale() } else { ExperimentConfig::desk() };
    let mut cfg = load_config(&args.cfg, base)?;
    if let Some(p) = args.pool {
        cfg.sweep.pool = p;
    }
    if let Some(s) = args.sigma_sq {
        cfg.sweep.sigma_sq = s;
    }
    if let Some(n) = args.n {
        cfg.sweep.n = n;
    }
    if let Some(f) = args.f_bar {
        cfg.sweep.f_bar = f;
    }
    cfg.timing |= args.timing;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    create_dir(&args.out)?;
    write_json(&args.out.join(CONFIG_FILE), &cfg)?;
    let t0 = Instant::now();
    let result = run_sweep(&cfg, Some(&args.out))?;
    log::info!("stage=total rows={} ms={}", result.rows.len(), t0.elapsed().as_millis());
    write_manifest(&args.out.join(MANIFEST_FILE), "sweep", &cfg, cfg.seed, started, vec![args.out.clone()])?;
    for s in summarize(&result.rows) {
        println!(
            "sigma_sq={:e} N={} {}: median {:.6e} IQR {:.3e} ({} diverged of {})",
            s.sigma_sq, s.n, s.method, s.median, s.iqr, s.diverged, s.count
        );
    }
    Ok(())
}

fn cmd_oracle_check(args: OracleArgs) -> Result<()> {
    let cfg = SuiteConfig { trials: args.trials, max_steps: args.steps as usize, seed: args.seed };
    let t0 = Instant::now();
    let results = run_suite(cfg)?;
    log::info!("stage=oracle-check ms={}", t0.elapsed().as_millis());
    let mut failed = 0;
    for r in &results {
        println!("{r}");
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        bail!(ApcdError::Config(format!("{failed} of {} checks failed", results.len())));
    }
    Ok(())
}

fn cmd_plot_data(args: PlotArgs) -> Result<()> {
    let rows = read_results(&args.results)?;
    create_dir(&args.out)?;
    let summary = summarize(&rows);
    write_summary(&args.out.join(SUMMARY_FILE), &summary)?;
    for p in write_plot_data(&args.out, &summary)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ApcdError>() {
            return if e.is_numerical() { 2 } else { 1 };
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global()?;
    }
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::OracleCheck(a) => cmd_oracle_check(a),
        Command::PlotData(a) => cmd_plot_data(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
