//! Particle filter passes over a whole observation window.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use super::sir::sir_cycle;
use super::vmpf::{vmpf_cycle, VmpfOptions};
use super::{check_dim, Ensemble, FilterError};
use crate::models::StateSpaceModel;
use crate::numerics::{RngStream, SpdMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Vmpf,
    Sir,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleFilterConfig {
    pub kind: FilterKind,
    pub vmpf: VmpfOptions,
}

impl Default for ParticleFilterConfig {
    fn default() -> Self {
        Self {
            kind: FilterKind::Vmpf,
            vmpf: VmpfOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleDiagnostics {
    pub k: usize,
    pub ess: f64,
    /// Mean displacement of the last accepted map (NaN for SIR).
    pub mean_update_norm: f64,
    pub map_iterations: usize,
}

/// Everything a particle filter pass leaves behind for the EM updates.
#[derive(Debug, Clone)]
pub struct FilterRun {
    /// Weighted posterior ensembles for `k = 0..K`. For SIR these are the
    /// importance-weighted particles before resampling.
    pub ensembles: Vec<Ensemble>,
    /// Entry `k − 1` holds `M(x_{k−1}^{(i)})` for the ensemble the filter
    /// carried out of cycle `k − 1`, as an `N_x × N_p` matrix.
    pub images: Vec<DMatrix<f64>>,
    /// Weights of the carried ensemble matching `images`.
    pub image_weights: Vec<Vec<f64>>,
    /// Per-cycle estimates of `log p(y_k | y_{1:k−1})`.
    pub log_evidence: Vec<f64>,
    pub diagnostics: Vec<CycleDiagnostics>,
}

impl FilterRun {
    pub fn cycles(&self) -> usize {
        self.images.len()
    }

    pub fn loglik(&self) -> f64 {
        self.log_evidence.iter().sum()
    }

    pub fn analysis_means(&self) -> Vec<DVector<f64>> {
        self.ensembles.iter().map(Ensemble::mean).collect()
    }

    /// CSV with columns `k, ess, mean_update_norm, map_iterations`, plus
    /// `analysis_rmse` when the true states `x_{0:K}` are supplied.
    pub fn diagnostics_csv(&self, truth: Option<&[DVector<f64>]>) -> String {
        let mut out = String::from("k,ess,mean_update_norm,map_iterations");
        if truth.is_some() {
            out.push_str(",analysis_rmse");
        }
        out.push('\n');
        for d in &self.diagnostics {
            let _ = write!(
                out,
                "{},{},{},{}",
                d.k, d.ess, d.mean_update_norm, d.map_iterations
            );
            if let Some(states) = truth {
                let rmse = states.get(d.k).map_or(f64::NAN, |x| {
                    let e = self.ensembles[d.k].mean() - x;
                    (e.norm_squared() / e.len() as f64).sqrt()
                });
                let _ = write!(out, ",{rmse}");
            }
            out.push('\n');
        }
        out
    }
}

/// Runs VMPF or SIR from `initial` over `y_{1:K}`. Cycle `k` draws from
/// `rng.child(k)`, so a pass is reproducible from the stream identity alone.
pub fn run_particle_filter(
    model: &dyn StateSpaceModel,
    ys: &[DVector<f64>],
    q: &SpdMatrix,
    r: &SpdMatrix,
    initial: &Ensemble,
    cfg: &ParticleFilterConfig,
    rng: &RngStream,
) -> Result<FilterRun, FilterError> {
    check_dim(model.state_dim(), initial.dim())?;
    let kk = ys.len();
    let mut run = FilterRun {
        ensembles: Vec::with_capacity(kk + 1),
        images: Vec::with_capacity(kk),
        image_weights: Vec::with_capacity(kk),
        log_evidence: Vec::with_capacity(kk),
        diagnostics: Vec::with_capacity(kk),
    };
    run.ensembles.push(initial.clone());
    let mut carried = initial.clone();
    for (i, y) in ys.iter().enumerate() {
        let k = i + 1;
        let mut cycle_rng = rng.child(k as u64);
        match cfg.kind {
            FilterKind::Vmpf => {
                let c = vmpf_cycle(
                    &carried,
                    y.as_slice(),
                    model,
                    q,
                    r,
                    &cfg.vmpf,
                    &mut cycle_rng,
                )?;
                run.image_weights.push(carried.weights().to_vec());
                run.images.push(c.images);
                run.log_evidence.push(c.log_evidence);
                run.diagnostics.push(CycleDiagnostics {
                    k,
                    ess: c.analysis.ess(),
                    mean_update_norm: c.stats.mean_update_norm,
                    map_iterations: c.stats.iterations,
                });
                run.ensembles.push(c.analysis.clone());
                carried = c.analysis;
            }
            FilterKind::Sir => {
                let c = sir_cycle(&carried, y.as_slice(), model, q, r, &mut cycle_rng)?;
                run.image_weights.push(carried.weights().to_vec());
                run.images.push(c.images);
                run.log_evidence.push(c.log_evidence);
                run.diagnostics.push(CycleDiagnostics {
                    k,
                    ess: c.ess,
                    mean_update_norm: f64::NAN,
                    map_iterations: 0,
                });
                run.ensembles.push(c.weighted);
                carried = c.resampled;
            }
        }
    }
    Ok(run)
}
