//! Twin-experiment harness: truth and observation generation, repetitions of
//! the configured estimators, per-iteration metrics and their summaries.
//!
//! Random streams derive from the master seed only through
//! `(master, repetition)`: the shared truth uses child 0 of the root stream
//! and repetition `r` uses child `1 + r`, within which observations, `Q₀`,
//! the initial ensemble, the estimator and (when not shared) the truth use
//! children 0 to 4. A repetition's results therefore do not depend on how
//! many repetitions are requested.

mod config;
mod report;

pub use config::{Algorithm, ConfigError, ExperimentConfig, ModelSpec, Q0Sampler, QTrueSpec};
pub use report::{
    describe, metrics_from_csv, metrics_to_csv, summarize, summary_to_csv, timing_to_csv, Describe,
    SummaryRow, SUMMARY_METRICS,
};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::em::{em_enkf_enks, em_estimate_q, em_kf_ks, EmError, EmTrace};
use crate::filters::{Ensemble, FilterError, FilterKind, GaussianStateSpace};
use crate::models::{
    observe_truth, simulate_truth, Ar1Config, Lorenz96, ModelError, StateSpaceModel, TwinData,
};
use crate::numerics::{frobenius_norm_diff, mvn_sample, NumericsError, RngStream, SpdMatrix};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Em(#[from] EmError),
    #[error("could not draw a positive definite Q0 in {0} attempts")]
    Q0Rejected(usize),
}

/// Summary statistics of one covariance estimate against the truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QMetrics {
    pub diag_mean: f64,
    /// Mean absolute value over the strict off-diagonal entries (0 for 1×1).
    pub offdiag_absmean: f64,
    /// Mean over the first sub- and super-diagonal entries (0 for 1×1).
    pub subdiag_mean: f64,
    pub frob_to_true: f64,
}

pub fn q_metrics(q_hat: &SpdMatrix, q_true: &SpdMatrix) -> Result<QMetrics, NumericsError> {
    let (a, b) = (q_hat.values(), q_true.values());
    let frob_to_true = frobenius_norm_diff(a, b)?;
    let n = a.nrows();
    let off: f64 = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|ij| a[ij].abs())
        .sum();
    let sub: f64 = (1..n).map(|i| a[(i, i - 1)] + a[(i - 1, i)]).sum();
    Ok(QMetrics {
        diag_mean: a.diagonal().mean(),
        offdiag_absmean: if n > 1 {
            off / (n * (n - 1)) as f64
        } else {
            0.0
        },
        subdiag_mean: if n > 1 {
            sub / (2 * (n - 1)) as f64
        } else {
            0.0
        },
        frob_to_true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowStatus {
    Ok,
    /// Last row of a repetition that met the EM stopping rule.
    Converged,
    /// The estimator failed; the row holds the `Q₀` metrics only.
    Failed,
}

impl RowStatus {
    pub fn name(&self) -> &'static str {
        match self {
            RowStatus::Ok => "ok",
            RowStatus::Converged => "converged",
            RowStatus::Failed => "failed",
        }
    }
}

/// One EM iterate of one repetition of one experiment arm.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub algorithm: Algorithm,
    pub r_variance: f64,
    pub rep: usize,
    pub em_iter: usize,
    pub status: RowStatus,
    pub fp_iters: usize,
    pub stop_em: f64,
    pub stop_fp_last: f64,
    pub metrics: QMetrics,
    pub loglik_proxy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub algorithm: Algorithm,
    pub r_variance: f64,
    pub rep: usize,
    pub em_iter: usize,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone)]
pub struct Failure {
    pub algorithm: Algorithm,
    pub r_variance: f64,
    pub rep: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    /// Sorted by arm, repetition and EM iteration.
    pub metrics: Vec<MetricsRow>,
    pub timing: Vec<TimingRow>,
    pub failures: Vec<Failure>,
}

pub fn build_model(spec: &ModelSpec) -> Result<Box<dyn StateSpaceModel>, ModelError> {
    Ok(match spec {
        ModelSpec::Ar1 { nu } => Box::new(Ar1Config { nu: *nu }.model()),
        ModelSpec::Lorenz96(c) => Box::new(Lorenz96::new(*c)?),
    })
}

/// `x_{0:K}`. AR(1) starts from its stationary law when `|ν| < 1` (else
/// from 0); Lorenz-96 starts from a spun-up state `F·1 + 0.01 e₁`.
pub fn simulate_experiment_truth(
    cfg: &ExperimentConfig,
    model: &dyn StateSpaceModel,
    q_true: &SpdMatrix,
    rng: &mut RngStream,
) -> Result<Vec<DVector<f64>>, ExperimentError> {
    let x0: Vec<f64> = match &cfg.model {
        ModelSpec::Ar1 { nu } if nu.abs() < 1.0 => {
            let stationary = q_true.scaled(1.0 / (1.0 - nu * nu));
            mvn_sample(&DVector::zeros(1), &stationary, rng, 1)?[0]
                .as_slice()
                .to_vec()
        }
        ModelSpec::Ar1 { .. } => vec![0.0],
        ModelSpec::Lorenz96(c) => Lorenz96::new(*c)?.spin_up(cfg.spinup_cycles),
    };
    Ok(simulate_truth(model, q_true, &x0, cfg.cycles, rng)?)
}

/// Initial guess with the structure of the true `Q`: `σ² I`, or a tridiagonal
/// Toeplitz matrix redrawn until positive definite.
pub fn sample_q0(
    cfg: &ExperimentConfig,
    rng: &mut RngStream,
) -> Result<SpdMatrix, ExperimentError> {
    let n = cfg.model.state_dim();
    let (lo, hi) = cfg.q0.diag;
    match cfg.q_true {
        QTrueSpec::IsotropicTridiagonal { .. } => {
            const ATTEMPTS: usize = 1000;
            let (slo, shi) = cfg.q0.subdiag;
            for _ in 0..ATTEMPTS {
                let d = rng.uniform_range(lo, hi);
                let sd = rng.uniform_range(slo, shi);
                if let Ok(q) = SpdMatrix::new(&config::tridiagonal(n, d, sd), 0.0) {
                    return Ok(q);
                }
            }
            Err(ExperimentError::Q0Rejected(ATTEMPTS))
        }
        _ => Ok(SpdMatrix::scaled_identity(n, rng.uniform_range(lo, hi))),
    }
}

/// Everything one repetition needs before estimation.
#[derive(Debug, Clone)]
pub struct RepetitionInputs {
    pub data: TwinData,
    pub q0: SpdMatrix,
    pub r: SpdMatrix,
    /// Initial members drawn from `N(x_0, Q_true)`.
    pub initial: Vec<DVector<f64>>,
    pub estimator_rng: RngStream,
}

/// Root stream of the experiment.
fn root(cfg: &ExperimentConfig) -> RngStream {
    RngStream::new(cfg.seed, 0)
}

pub fn shared_truth(cfg: &ExperimentConfig) -> Result<Vec<DVector<f64>>, ExperimentError> {
    let model = build_model(&cfg.model)?;
    let q_true = SpdMatrix::new(&cfg.q_true_matrix(), 0.0)?;
    simulate_experiment_truth(cfg, model.as_ref(), &q_true, &mut root(cfg).child(0))
}

/// Inputs of repetition `rep` for one algorithm and observation variance.
/// `truth` is the shared truth and is ignored when `truth.shared = false`.
pub fn repetition_inputs(
    cfg: &ExperimentConfig,
    truth: &[DVector<f64>],
    alg: Algorithm,
    r_variance: f64,
    rep: usize,
) -> Result<RepetitionInputs, ExperimentError> {
    let model = build_model(&cfg.model)?;
    let q_true = SpdMatrix::new(&cfg.q_true_matrix(), 0.0)?;
    let rep_rng = root(cfg).child(1 + rep as u64);
    let states = if cfg.truth_shared {
        truth.to_vec()
    } else {
        simulate_experiment_truth(cfg, model.as_ref(), &q_true, &mut rep_rng.child(4))?
    };
    let r = SpdMatrix::scaled_identity(model.obs_dim(), r_variance);
    let observations = observe_truth(model.as_ref(), &states, &r, &mut rep_rng.child(0))?;
    let q0 = sample_q0(cfg, &mut rep_rng.child(1))?;
    let initial = mvn_sample(
        &states[0],
        &q_true,
        &mut rep_rng.child(2),
        cfg.particles_for(alg),
    )?;
    Ok(RepetitionInputs {
        data: TwinData {
            states,
            observations,
        },
        q0,
        r,
        initial,
        estimator_rng: rep_rng.child(3),
    })
}

/// Runs one estimator on given data. The Kalman prior is `N(x_0, Q_true)`
/// with `x_0` the first state of `inputs.data`.
pub fn run_estimator(
    cfg: &ExperimentConfig,
    alg: Algorithm,
    inputs: &RepetitionInputs,
) -> Result<EmTrace, ExperimentError> {
    let model = build_model(&cfg.model)?;
    let ys = &inputs.data.observations;
    let q_true = SpdMatrix::new(&cfg.q_true_matrix(), 0.0)?;
    let trace = match alg {
        Algorithm::EmVmpf | Algorithm::EmSir => {
            let mut opts = cfg.em;
            opts.filter.kind = if alg == Algorithm::EmVmpf {
                FilterKind::Vmpf
            } else {
                FilterKind::Sir
            };
            let initial = Ensemble::from_vectors(&inputs.initial, 0)?;
            em_estimate_q(
                model.as_ref(),
                ys,
                &inputs.q0,
                &inputs.r,
                &initial,
                &opts,
                &inputs.estimator_rng,
            )?
        }
        Algorithm::EmKfKs => {
            let ModelSpec::Ar1 { nu } = cfg.model else {
                return Err(ConfigError::Invalid("em-kf-ks needs a linear model".into()).into());
            };
            let x0 = inputs
                .data
                .states
                .first()
                .ok_or(ModelError::Malformed("no initial state".into()))?;
            let gss = GaussianStateSpace::new(
                Ar1Config { nu }.model(),
                q_true.clone(),
                inputs.r.clone(),
                x0.clone(),
                q_true.values().clone(),
            )?;
            em_kf_ks(&gss, ys, &inputs.q0, &cfg.em)?
        }
        Algorithm::EmEnkfEnks => {
            let initial = DMatrix::from_columns(&inputs.initial);
            em_enkf_enks(
                model.as_ref(),
                ys,
                &inputs.q0,
                &inputs.r,
                &initial,
                &cfg.em,
                &cfg.enks,
                &inputs.estimator_rng,
            )?
        }
    };
    Ok(trace)
}

struct Task {
    algorithm: Algorithm,
    r_variance: f64,
    rep: usize,
}

fn run_task(
    cfg: &ExperimentConfig,
    truth: &[DVector<f64>],
    q_true: &SpdMatrix,
    task: &Task,
) -> Result<(Vec<MetricsRow>, Vec<TimingRow>, Option<Failure>), ExperimentError> {
    let inputs = repetition_inputs(cfg, truth, task.algorithm, task.r_variance, task.rep)?;
    let row = |em_iter, status, q: &SpdMatrix| -> Result<MetricsRow, ExperimentError> {
        Ok(MetricsRow {
            algorithm: task.algorithm,
            r_variance: task.r_variance,
            rep: task.rep,
            em_iter,
            status,
            fp_iters: 0,
            stop_em: f64::NAN,
            stop_fp_last: f64::NAN,
            metrics: q_metrics(q, q_true)?,
            loglik_proxy: f64::NAN,
        })
    };
    match run_estimator(cfg, task.algorithm, &inputs) {
        Ok(trace) => {
            let last = trace.records.len() - 1;
            let mut metrics = Vec::with_capacity(trace.records.len());
            let mut timing = Vec::with_capacity(trace.records.len());
            for (i, rec) in trace.records.iter().enumerate() {
                let status = if i == last && trace.converged {
                    RowStatus::Converged
                } else {
                    RowStatus::Ok
                };
                metrics.push(MetricsRow {
                    fp_iters: rec.fp_iterations,
                    stop_em: rec.stop_em,
                    stop_fp_last: rec.stop_fp_last(),
                    loglik_proxy: rec.loglik_proxy,
                    ..row(rec.iteration, status, &rec.q)?
                });
                timing.push(TimingRow {
                    algorithm: task.algorithm,
                    r_variance: task.r_variance,
                    rep: task.rep,
                    em_iter: rec.iteration,
                    wallclock_s: rec.wallclock_s,
                });
            }
            Ok((metrics, timing, None))
        }
        Err(e) => {
            let failure = Failure {
                algorithm: task.algorithm,
                r_variance: task.r_variance,
                rep: task.rep,
                message: e.to_string(),
            };
            Ok((
                vec![row(0, RowStatus::Failed, &inputs.q0)?],
                Vec::new(),
                Some(failure),
            ))
        }
    }
}

/// Runs every (algorithm, observation variance, repetition) combination.
/// Estimator failures are recorded per repetition; set-up errors abort.
/// Work is spread over the current rayon pool and the output does not
/// depend on its size.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    cfg.validate()?;
    let q_true = SpdMatrix::new(&cfg.q_true_matrix(), 0.0)?;
    let truth = if cfg.truth_shared {
        shared_truth(cfg)?
    } else {
        Vec::new()
    };
    let mut tasks = Vec::new();
    for &algorithm in &cfg.algorithms {
        for &r_variance in &cfg.r_variances {
            for rep in 0..cfg.repetitions {
                tasks.push(Task {
                    algorithm,
                    r_variance,
                    rep,
                });
            }
        }
    }
    let results: Vec<_> = tasks
        .par_iter()
        .map(|t| run_task(cfg, &truth, &q_true, t))
        .collect();
    let mut out = ExperimentOutput::default();
    for res in results {
        let (m, t, f) = res?;
        out.metrics.extend(m);
        out.timing.extend(t);
        out.failures.extend(f);
    }
    Ok(out)
}
