//! Command-line front end: `simulate`, `estimate`, `experiment` and `report`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::em::EmTrace;
use crate::experiments::{
    metrics_from_csv, metrics_to_csv, q_metrics, repetition_inputs, run_estimator, run_experiment,
    shared_truth, summarize, summary_to_csv, timing_to_csv, Algorithm, ExperimentConfig,
    ExperimentError,
};
use crate::models::TwinData;
use crate::numerics::SpdMatrix;

/// Environment variable read when `--threads` is absent.
pub const THREADS_ENV: &str = "SSMCOVEST_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "ssmcovest",
    version,
    about = "Estimate model error covariances of state-space models by EM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, replacing `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Number of repetitions, replacing `run.repetitions`.
    #[arg(long, global = true)]
    reps: Option<usize>,
    /// Worker threads; 1 runs everything on the calling thread.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Comma-separated algorithms, replacing `algorithm`.
    #[arg(long, global = true)]
    algorithm: Option<String>,
    /// Apply the `desk.` overrides of the configuration.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Desk,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the truth and observations of one repetition to `twin.csv`.
    Simulate {
        #[arg(long, default_value_t = 0)]
        rep: usize,
    },
    /// Run the first configured algorithm once and write `em_trace.csv` and `q_full.csv`.
    Estimate {
        /// Twin data written by `simulate`; generated from the configuration if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        rep: usize,
    },
    /// Run all repetitions and write `metrics.csv`, `summary.csv` and `timing.csv`.
    Experiment,
    /// Recompute `summary.csv` from a metrics table.
    Report {
        /// Metrics table; defaults to `<out>/metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    /// Configuration, usage or file problems.
    Setup(String),
    /// The estimator itself failed.
    Estimator(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Setup(_) => 1,
            Failure::Estimator(_) => 2,
        }
    }
}

fn setup<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> Failure {
    move |e| Failure::Setup(format!("{context}: {e}"))
}

/// Runs the command line `args` (program name first) and returns the exit status.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(f) => {
            match &f {
                Failure::Setup(m) | Failure::Estimator(m) => eprintln!("error: {m}"),
            }
            f.code()
        }
    }
}

fn thread_count(cli: &Cli) -> Result<Option<usize>, Failure> {
    if let Some(n) = cli.threads {
        return if n == 0 {
            Err(Failure::Setup("--threads must be at least 1".into()))
        } else {
            Ok(Some(n))
        };
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Failure::Setup(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(None),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Setup("--config is required".into()))?;
    let text = fs::read_to_string(path)
        .map_err(setup(format!("cannot read config {}", path.display())))?;
    let mut cfg = ExperimentConfig::parse(&text, cli.preset == Some(Preset::Desk))
        .map_err(setup(format!("invalid config {}", path.display())))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(reps) = cli.reps {
        if reps == 0 {
            return Err(Failure::Setup("--reps must be at least 1".into()));
        }
        cfg.repetitions = reps;
    }
    if let Some(list) = &cli.algorithm {
        cfg.algorithms = list
            .split(',')
            .map(|s| s.trim().parse::<Algorithm>())
            .collect::<Result<_, _>>()
            .map_err(setup("--algorithm"))?;
    }
    cfg.validate()
        .map_err(setup(format!("invalid config {}", path.display())))?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(setup(format!("cannot write {}", path.display())))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let pool = match thread_count(cli)? {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    }
    .map_err(setup("cannot start worker threads"))?;
    if let Command::Report { metrics } = &cli.command {
        return report(cli, metrics.as_deref());
    }
    let cfg = load_config(cli)?;
    fs::create_dir_all(&cli.out).map_err(setup(format!("cannot create {}", cli.out.display())))?;
    write(&cli.out, "resolved.cfg", &cfg.to_text())?;
    match &cli.command {
        Command::Simulate { rep } => {
            let inputs = inputs_for(&cfg, cfg.algorithms[0], *rep)?;
            write(&cli.out, "twin.csv", &inputs.data.to_csv())
        }
        Command::Estimate { data, rep } => estimate(cli, &cfg, data.as_deref(), *rep),
        Command::Experiment => {
            let out = pool
                .install(|| run_experiment(&cfg))
                .map_err(setup("experiment set-up failed"))?;
            for f in &out.failures {
                eprintln!(
                    "warning: {} (r = {}) repetition {} failed: {}",
                    f.algorithm.name(),
                    f.r_variance,
                    f.rep,
                    f.message
                );
            }
            write(&cli.out, "metrics.csv", &metrics_to_csv(&out.metrics))?;
            write(
                &cli.out,
                "summary.csv",
                &summary_to_csv(&summarize(&out.metrics)),
            )?;
            write(&cli.out, "timing.csv", &timing_to_csv(&out.timing))
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
}

fn inputs_for(
    cfg: &ExperimentConfig,
    alg: Algorithm,
    rep: usize,
) -> Result<crate::experiments::RepetitionInputs, Failure> {
    let truth = if cfg.truth_shared {
        shared_truth(cfg).map_err(setup("truth simulation failed"))?
    } else {
        Vec::new()
    };
    repetition_inputs(cfg, &truth, alg, cfg.r_variances[0], rep)
        .map_err(setup("data generation failed"))
}

fn estimate(
    cli: &Cli,
    cfg: &ExperimentConfig,
    data: Option<&Path>,
    rep: usize,
) -> Result<(), Failure> {
    let alg = cfg.algorithms[0];
    let mut inputs = inputs_for(cfg, alg, rep)?;
    if let Some(path) = data {
        let text = fs::read_to_string(path)
            .map_err(setup(format!("cannot read data {}", path.display())))?;
        let twin =
            TwinData::from_csv(&text).map_err(setup(format!("invalid data {}", path.display())))?;
        let n = cfg.model.state_dim();
        if twin.states.first().map(|x| x.len()) != Some(n) {
            return Err(Failure::Setup(format!(
                "{} needs an initial state with {n} variables",
                path.display()
            )));
        }
        if twin.observations.is_empty() || twin.observations[0].len() != inputs.r.dim() {
            return Err(Failure::Setup(format!(
                "{} has no observations of the configured size",
                path.display()
            )));
        }
        inputs.data = twin;
    }
    let trace = run_estimator(cfg, alg, &inputs).map_err(|e| match e {
        ExperimentError::Em(_) | ExperimentError::Filter(_) => {
            Failure::Estimator(format!("{} failed: {e}", alg.name()))
        }
        other => Failure::Setup(other.to_string()),
    })?;
    let q_true = SpdMatrix::new(&cfg.q_true_matrix(), 0.0).map_err(setup("true Q"))?;
    write(&cli.out, "em_trace.csv", &trace_csv(&trace, rep, &q_true)?)?;
    write(&cli.out, "q_full.csv", &q_full_csv(&trace))
}

/// One row per EM iteration: `em_iter` then the entries of `Q` in row-major order.
fn q_full_csv(trace: &EmTrace) -> String {
    let n = trace.final_q().dim();
    let mut out = String::from("em_iter");
    for i in 1..=n {
        for j in 1..=n {
            let _ = write!(out, ",q_{i}_{j}");
        }
    }
    out.push('\n');
    for r in &trace.records {
        let _ = write!(out, "{}", r.iteration);
        let q = r.q.values();
        for i in 0..n {
            for j in 0..n {
                let _ = write!(out, ",{}", q[(i, j)]);
            }
        }
        out.push('\n');
    }
    out
}

fn trace_csv(trace: &EmTrace, rep: usize, q_true: &SpdMatrix) -> Result<String, Failure> {
    let mut out = String::from(
        "rep,em_iter,fp_iters,stop_em,stop_fp_last,q_diag_mean,q_offdiag_absmean,frob_to_true,loglik_proxy,wallclock_s\n",
    );
    for r in &trace.records {
        let m = q_metrics(&r.q, q_true).map_err(setup("metrics"))?;
        let _ = writeln!(
            out,
            "{rep},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.fp_iterations,
            r.stop_em,
            r.stop_fp_last(),
            m.diag_mean,
            m.offdiag_absmean,
            m.frob_to_true,
            r.loglik_proxy,
            r.wallclock_s
        );
    }
    Ok(out)
}

fn report(cli: &Cli, metrics: Option<&Path>) -> Result<(), Failure> {
    let path = metrics.map_or_else(|| cli.out.join("metrics.csv"), Path::to_path_buf);
    let text = fs::read_to_string(&path)
        .map_err(setup(format!("cannot read metrics {}", path.display())))?;
    let rows =
        metrics_from_csv(&text).map_err(setup(format!("invalid metrics {}", path.display())))?;
    fs::create_dir_all(&cli.out).map_err(setup(format!("cannot create {}", cli.out.display())))?;
    write(&cli.out, "summary.csv", &summary_to_csv(&summarize(&rows)))
}
