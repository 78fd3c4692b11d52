//! Assimilation engines: the variational mapping particle filter (VMPF), a
//! bootstrap SIR filter, the Kalman filter with RTS smoother, and a stochastic
//! EnKF with its fixed-interval smoother.

use thiserror::Error;

use crate::models::ModelError;
use crate::numerics::NumericsError;

pub mod enkf;
mod ensemble;
pub mod kalman;
pub mod run;
pub mod sir;
pub mod vmpf;

pub use enkf::{enkf_pass, enkf_step, enks, EnkfOptions, EnkfRun};
pub use ensemble::Ensemble;
pub use kalman::{
    kalman_filter, kf_step, rts_smoother, GaussianStateSpace, KalmanPass, KfStep, Smoothed,
};
pub use run::{run_particle_filter, CycleDiagnostics, FilterKind, FilterRun, ParticleFilterConfig};
pub use sir::{sir_step, systematic_resample, systematic_resample_with_offset};
pub use vmpf::{
    vmpf_assimilate, vmpf_kernel_and_grad, vmpf_log_posterior_gradient, FlowNormalization,
    KernelBandwidth, VmpfOptions,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("all particle weights vanished at cycle {k}")]
    AllWeightsZero { k: usize },
    #[error("non-finite particle state at cycle {k}")]
    NonFiniteState { k: usize },
    #[error("innovation covariance is singular at cycle {k}")]
    SingularInnovationCovariance { k: usize },
    #[error("ensemble of {0} member(s) is too small for sample covariances")]
    InsufficientEnsemble(usize),
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),
    #[error("invalid filter options: {0}")]
    InvalidOptions(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<(), FilterError> {
    if expected != found {
        return Err(FilterError::DimensionMismatch { expected, found });
    }
    Ok(())
}
