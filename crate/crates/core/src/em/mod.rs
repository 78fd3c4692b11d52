//! EM estimation of the model error covariance `Q`: the particle-filter
//! scheme with a fixed-point M-step, and the Kalman-smoother and
//! ensemble-smoother baselines.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::filters::{run_particle_filter, Ensemble, FilterError, ParticleFilterConfig};
use crate::models::StateSpaceModel;
use crate::numerics::{frobenius_rel_diff, NumericsError, RngStream, SpdMatrix};

mod ensemble;
mod fixed_point;
mod linear;

pub use crate::filters::FilterRun;
pub use ensemble::{em_enkf_enks, EnksOptions};
pub use fixed_point::{fixed_point_matrix, fixed_point_update, intermediate_g, QStructure};
pub use linear::{em_kf_ks, incomplete_loglik_linear, shumway_stoffer_q_update};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmError {
    #[error("filter failed in EM iteration {s}, fixed-point iteration {fp_iteration}: {source}")]
    Filter {
        s: usize,
        fp_iteration: usize,
        #[source]
        source: FilterError,
    },
    #[error("every mixture term underflows for particle {j} at cycle {k}")]
    NonFinite { k: usize, j: usize },
    #[error("updated Q is not positive definite even with jitter")]
    DegenerateResiduals,
    #[error("filter runs are not aligned: {0}")]
    Misaligned(String),
    #[error("invalid EM options: {0}")]
    InvalidOptions(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no observations")]
    NoObservations,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub max_em_iterations: usize,
    pub em_tolerance: f64,
    pub max_fp_iterations: usize,
    pub fp_tolerance: f64,
    pub filter: ParticleFilterConfig,
    pub structure: QStructure,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_em_iterations: 25,
            em_tolerance: 1e-3,
            max_fp_iterations: 6,
            fp_tolerance: 1e-3,
            filter: ParticleFilterConfig::default(),
            structure: QStructure::Full,
        }
    }
}

impl EmOptions {
    pub fn validate(&self) -> Result<(), EmError> {
        if !(self.em_tolerance > 0.0) || !(self.fp_tolerance > 0.0) {
            return Err(EmError::InvalidOptions(
                "tolerances must be positive".into(),
            ));
        }
        if self.max_fp_iterations == 0 {
            return Err(EmError::InvalidOptions(
                "at least one fixed-point iteration is needed".into(),
            ));
        }
        self.filter
            .vmpf
            .validate()
            .map_err(|e| EmError::InvalidOptions(e.to_string()))
    }
}

/// State of the estimate after EM iteration `iteration` (0 holds `Q₀`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmRecord {
    pub iteration: usize,
    pub q: SpdMatrix,
    /// `‖Q_s − Q_{s−1}‖_F / ‖Q_s‖_F`; NaN for the initial guess.
    pub stop_em: f64,
    pub fp_iterations: usize,
    /// Relative change of each fixed-point evaluation.
    pub fp_stops: Vec<f64>,
    /// Log-evidence of the observations under this iterate, as estimated by
    /// the filter of the method (exact for the Kalman filter).
    pub loglik_proxy: f64,
    /// Wall-clock time spent producing this iterate.
    pub wallclock_s: f64,
}

impl EmRecord {
    fn initial(q: SpdMatrix) -> Self {
        Self {
            iteration: 0,
            q,
            stop_em: f64::NAN,
            fp_iterations: 0,
            fp_stops: Vec::new(),
            loglik_proxy: f64::NAN,
            wallclock_s: 0.0,
        }
    }

    pub fn stop_fp_last(&self) -> f64 {
        self.fp_stops.last().copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmTrace {
    pub records: Vec<EmRecord>,
    /// Whether the EM stopping rule was met before the iteration cap.
    pub converged: bool,
}

impl EmTrace {
    pub fn final_q(&self) -> &SpdMatrix {
        &self.records.last().expect("trace holds at least Q0").q
    }
}

pub(crate) fn check_problem(
    state_dim: usize,
    ys: &[DVector<f64>],
    q0: &SpdMatrix,
) -> Result<(), EmError> {
    if ys.is_empty() {
        return Err(EmError::NoObservations);
    }
    if q0.dim() != state_dim {
        return Err(EmError::DimensionMismatch {
            expected: state_dim,
            found: q0.dim(),
        });
    }
    Ok(())
}

pub(crate) fn project_and_validate(
    m: &DMatrix<f64>,
    structure: QStructure,
) -> Result<SpdMatrix, EmError> {
    SpdMatrix::with_fallback_jitter(&structure.project(m)).map_err(|_| EmError::DegenerateResiduals)
}

/// EM with a particle-filter E-step and a fixed-point M-step.
///
/// Iteration `s` draws every filter pass from `rng.child(s)`: the E-step run
/// and all fixed-point reruns share those random numbers, so the fixed-point
/// map is a deterministic function of `Q`. The log-evidence reported for
/// iterate `s` comes from the pass under `Q_s` on stream `s + 1`.
pub fn em_estimate_q(
    model: &dyn StateSpaceModel,
    ys: &[DVector<f64>],
    q0: &SpdMatrix,
    r: &SpdMatrix,
    initial: &Ensemble,
    opts: &EmOptions,
    rng: &RngStream,
) -> Result<EmTrace, EmError> {
    opts.validate()?;
    check_problem(model.state_dim(), ys, q0)?;
    let pf = |q: &SpdMatrix, s: usize, fp_iteration: usize| {
        run_particle_filter(model, ys, q, r, initial, &opts.filter, &rng.child(s as u64)).map_err(
            |source| EmError::Filter {
                s,
                fp_iteration,
                source,
            },
        )
    };
    let mut records = vec![EmRecord::initial(q0.clone())];
    let mut q_em = q0.clone();
    let mut converged = false;
    let mut s = 0;
    while s < opts.max_em_iterations {
        s += 1;
        let start = Instant::now();
        let estep = pf(&q_em, s, 0)?;
        records[s - 1].loglik_proxy = estep.loglik();
        let mut q_fp0 = q_em.clone();
        let mut mstep: Option<FilterRun> = None;
        let mut fp_stops = Vec::new();
        let q_fp = loop {
            let fp_iteration = fp_stops.len() + 1;
            let m = fixed_point_matrix(&estep, mstep.as_ref().unwrap_or(&estep), &q_fp0)?;
            let q_fp = project_and_validate(&m, opts.structure)?;
            let stop = frobenius_rel_diff(q_fp.values(), q_fp0.values())?;
            fp_stops.push(stop);
            if stop <= opts.fp_tolerance || fp_iteration >= opts.max_fp_iterations {
                break q_fp;
            }
            mstep = Some(pf(&q_fp, s, fp_iteration)?);
            q_fp0 = q_fp;
        };
        let stop_em = frobenius_rel_diff(q_fp.values(), q_em.values())?;
        q_em = q_fp;
        records.push(EmRecord {
            iteration: s,
            q: q_em.clone(),
            stop_em,
            fp_iterations: fp_stops.len(),
            fp_stops,
            loglik_proxy: f64::NAN,
            wallclock_s: start.elapsed().as_secs_f64(),
        });
        if stop_em <= opts.em_tolerance {
            converged = true;
            break;
        }
    }
    let last = pf(&q_em, s + 1, 0)?;
    records[s].loglik_proxy = last.loglik();
    Ok(EmTrace { records, converged })
}
