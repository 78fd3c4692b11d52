//! Bootstrap sampling-importance-resampling filter.

use nalgebra::DMatrix;

use super::{check_dim, Ensemble, FilterError};
use crate::models::StateSpaceModel;
use crate::numerics::{
    add_mvn_noise, gaussian_logpdf_unchecked, log_sum_exp, RngStream, SpdMatrix,
};

/// Systematic resampling with an explicit offset `u ∈ [0, 1/N)`.
pub fn systematic_resample_with_offset(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cum = weights.first().copied().unwrap_or(0.0);
    let mut i = 0;
    for m in 0..n {
        let pos = u + m as f64 / n as f64;
        while pos >= cum && i + 1 < n {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
    }
    out
}

/// Ancestor indices from a single uniform draw; particle `j` is copied
/// `N w_j` times in expectation.
pub fn systematic_resample(weights: &[f64], rng: &mut RngStream) -> Vec<usize> {
    let u = rng.uniform() / weights.len().max(1) as f64;
    systematic_resample_with_offset(weights, u)
}

/// Everything one SIR cycle produces.
#[derive(Debug, Clone)]
pub struct SirCycle {
    /// `M(x_{k−1}^{(i)})` for the input particles.
    pub images: DMatrix<f64>,
    /// Propagated particles with their normalized importance weights.
    pub weighted: Ensemble,
    /// Systematically resampled, uniformly weighted ensemble.
    pub resampled: Ensemble,
    /// `log Σ_j w_{k−1}^{(j)} p(y_k | x_k^{(j)})`
    pub log_evidence: f64,
    pub ess: f64,
}

pub fn sir_cycle(
    ens: &Ensemble,
    y: &[f64],
    model: &dyn StateSpaceModel,
    q: &SpdMatrix,
    r: &SpdMatrix,
    rng: &mut RngStream,
) -> Result<SirCycle, FilterError> {
    check_dim(model.state_dim(), ens.dim())?;
    check_dim(model.state_dim(), q.dim())?;
    check_dim(model.obs_dim(), y.len())?;
    check_dim(model.obs_dim(), r.dim())?;
    let k = ens.cycle() + 1;
    let (nx, np) = (ens.dim(), ens.len());
    let mut images = DMatrix::<f64>::zeros(nx, np);
    let mut forecast = DMatrix::<f64>::zeros(nx, np);
    let mut logw = Vec::with_capacity(np);
    for j in 0..np {
        let image = model.propagate(ens.particle(j));
        let mut x = image.clone();
        add_mvn_noise(&mut x, q, rng);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FilterError::NonFiniteState { k });
        }
        let hx = model.observe(&x);
        logw.push(ens.weights()[j].ln() + gaussian_logpdf_unchecked(y, &hx, r));
        images.column_mut(j).copy_from_slice(&image);
        forecast.column_mut(j).copy_from_slice(&x);
    }
    let lse = log_sum_exp(&logw);
    if !lse.is_finite() {
        return Err(FilterError::AllWeightsZero { k });
    }
    let weights: Vec<f64> = logw.iter().map(|v| (v - lse).exp()).collect();
    let weighted = Ensemble::from_normalized(forecast, weights, k);
    let ancestors = systematic_resample(weighted.weights(), rng);
    let mut resampled = DMatrix::<f64>::zeros(nx, np);
    for (j, &a) in ancestors.iter().enumerate() {
        resampled
            .column_mut(j)
            .copy_from(&weighted.particles().column(a));
    }
    let ess = weighted.ess();
    Ok(SirCycle {
        images,
        weighted,
        resampled: Ensemble::uniform(resampled, k)?,
        log_evidence: lse,
        ess,
    })
}

/// Propagate with model noise, weight by the observation likelihood and
/// resample. The returned ensemble carries uniform weights.
pub fn sir_step(
    ens: &Ensemble,
    y: &[f64],
    model: &dyn StateSpaceModel,
    q: &SpdMatrix,
    r: &SpdMatrix,
    rng: &mut RngStream,
) -> Result<Ensemble, FilterError> {
    sir_cycle(ens, y, model, q, r, rng).map(|c| c.resampled)
}
