//! Stochastic ensemble Kalman filter with perturbed observations and the
//! matching ensemble Kalman smoother.

use nalgebra::{DMatrix, DVector};

use super::{check_dim, Ensemble, FilterError};
use crate::models::StateSpaceModel;
use crate::numerics::{add_mvn_noise, gaussian_logpdf_unchecked, RngStream, SpdMatrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnkfOptions {
    /// Multiplicative inflation of the forecast anomalies (1 disables it).
    pub inflation: f64,
}

impl Default for EnkfOptions {
    fn default() -> Self {
        Self { inflation: 1.0 }
    }
}

impl EnkfOptions {
    pub fn validate(&self) -> Result<(), FilterError> {
        if !(self.inflation >= 1.0) || !self.inflation.is_finite() {
            return Err(FilterError::InvalidOptions(
                "inflation must be a finite factor >= 1".into(),
            ));
        }
        Ok(())
    }
}

fn anomalies(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.ncols() as f64;
    let mean = x.column_sum() / n;
    let mut a = x.clone();
    for mut col in a.column_iter_mut() {
        col -= &mean;
    }
    a
}

/// `A (HA)ᵀ W / (N − 1)` with `A` the anomalies of `x`.
fn regression_increment(x: &DMatrix<f64>, ha: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    let gain = anomalies(x) * ha.transpose() / (x.ncols() - 1) as f64;
    gain * w
}

/// Output of one EnKF cycle.
#[derive(Debug, Clone)]
pub struct EnkfCycle {
    pub forecast: DMatrix<f64>,
    pub analysis: DMatrix<f64>,
    /// Forecast anomalies in observation space, `HXᶠ − mean`.
    pub obs_anomalies: DMatrix<f64>,
    /// `S⁻¹ (D − HXᶠ)` for the perturbed observations `D`. The analysis is
    /// `Xᶠ + Aᶠ (HAᶠ)ᵀ innovations / (N − 1)`; the smoother applies the same
    /// regression to past anomalies.
    pub innovations: DMatrix<f64>,
    /// `log N(y; mean(HXᶠ), S)` with the sample innovation covariance `S`.
    pub log_evidence: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn enkf_cycle(
    ens: &DMatrix<f64>,
    k: usize,
    y: &[f64],
    model: &dyn StateSpaceModel,
    q: &SpdMatrix,
    r: &SpdMatrix,
    opts: &EnkfOptions,
    rng: &mut RngStream,
) -> Result<EnkfCycle, FilterError> {
    opts.validate()?;
    let (nx, np) = ens.shape();
    if np < 2 {
        return Err(FilterError::InsufficientEnsemble(np));
    }
    check_dim(model.state_dim(), nx)?;
    check_dim(model.state_dim(), q.dim())?;
    check_dim(model.obs_dim(), y.len())?;
    check_dim(model.obs_dim(), r.dim())?;
    let m = y.len();
    let mut forecast = DMatrix::<f64>::zeros(nx, np);
    for j in 0..np {
        let mut x = model.propagate(&ens.as_slice()[j * nx..(j + 1) * nx]);
        add_mvn_noise(&mut x, q, rng);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FilterError::NonFiniteState { k });
        }
        forecast.column_mut(j).copy_from_slice(&x);
    }
    if opts.inflation != 1.0 {
        let mean = forecast.column_sum() / np as f64;
        let a = anomalies(&forecast) * opts.inflation;
        for (j, mut col) in forecast.column_iter_mut().enumerate() {
            col.copy_from(&(&mean + a.column(j)));
        }
    }
    let mut hx = DMatrix::<f64>::zeros(m, np);
    for j in 0..np {
        hx.column_mut(j)
            .copy_from_slice(&model.observe(&forecast.as_slice()[j * nx..(j + 1) * nx]));
    }
    let ha = anomalies(&hx);
    let denom = (np - 1) as f64;
    let s = (&ha * ha.transpose()) / denom + r.values();
    let s = SpdMatrix::new(&((&s + s.transpose()) * 0.5), 0.0)
        .map_err(|_| FilterError::SingularInnovationCovariance { k })?;
    let hx_mean = hx.column_sum() / np as f64;
    let log_evidence = gaussian_logpdf_unchecked(y, hx_mean.as_slice(), &s);
    // perturbed observations minus predicted observations, solved against S
    let mut w = DMatrix::<f64>::zeros(m, np);
    for j in 0..np {
        let mut d = y.to_vec();
        add_mvn_noise(&mut d, r, rng);
        for (i, v) in d.iter_mut().enumerate() {
            *v -= hx[(i, j)];
        }
        s.solve_in_place(&mut d);
        w.column_mut(j).copy_from_slice(&d);
    }
    let analysis = &forecast + regression_increment(&forecast, &ha, &w);
    if analysis.iter().any(|v| !v.is_finite()) {
        return Err(FilterError::NonFiniteState { k });
    }
    Ok(EnkfCycle {
        forecast,
        analysis,
        obs_anomalies: ha,
        innovations: w,
        log_evidence,
    })
}

/// One stochastic EnKF cycle with default options; `N_p ≥ 2` is required.
pub fn enkf_step(
    ens: &Ensemble,
    y: &[f64],
    model: &dyn StateSpaceModel,
    q: &SpdMatrix,
    r: &SpdMatrix,
    rng: &mut RngStream,
) -> Result<Ensemble, FilterError> {
    let k = ens.cycle() + 1;
    let c = enkf_cycle(
        ens.particles(),
        k,
        y,
        model,
        q,
        r,
        &EnkfOptions::default(),
        rng,
    )?;
    Ensemble::uniform(c.analysis, k)
}

/// Complete EnKF pass over `y_{1:K}`.
#[derive(Debug, Clone)]
pub struct EnkfRun {
    /// Analysis ensembles for `k = 0..K` (`k = 0` is the initial ensemble).
    pub analyses: Vec<DMatrix<f64>>,
    /// Entry `k − 1` holds the observation-space anomalies of cycle `k`.
    pub obs_anomalies: Vec<DMatrix<f64>>,
    /// Entry `k − 1` holds the solved innovations of cycle `k`.
    pub innovations: Vec<DMatrix<f64>>,
    pub log_evidence: Vec<f64>,
}

impl EnkfRun {
    pub fn loglik(&self) -> f64 {
        self.log_evidence.iter().sum()
    }
}

/// Runs the EnKF from `initial`; cycle `k` draws from `rng.child(k)`.
pub fn enkf_pass(
    model: &dyn StateSpaceModel,
    ys: &[DVector<f64>],
    q: &SpdMatrix,
    r: &SpdMatrix,
    initial: &DMatrix<f64>,
    opts: &EnkfOptions,
    rng: &RngStream,
) -> Result<EnkfRun, FilterError> {
    let mut analyses = Vec::with_capacity(ys.len() + 1);
    let mut obs_anomalies = Vec::with_capacity(ys.len());
    let mut innovations = Vec::with_capacity(ys.len());
    let mut log_evidence = Vec::with_capacity(ys.len());
    analyses.push(initial.clone());
    for (i, y) in ys.iter().enumerate() {
        let k = i + 1;
        let mut cycle_rng = rng.child(k as u64);
        let c = enkf_cycle(
            &analyses[i],
            k,
            y.as_slice(),
            model,
            q,
            r,
            opts,
            &mut cycle_rng,
        )?;
        analyses.push(c.analysis);
        obs_anomalies.push(c.obs_anomalies);
        innovations.push(c.innovations);
        log_evidence.push(c.log_evidence);
    }
    Ok(EnkfRun {
        analyses,
        obs_anomalies,
        innovations,
        log_evidence,
    })
}

/// Ensemble Kalman smoother: the update of cycle `k` is applied to the
/// ensembles at `max(0, k − lag) .. k − 1` in order. `None` smooths over the
/// whole window; `Some(0)` returns the filter ensembles.
pub fn enks(run: &EnkfRun, lag: Option<usize>) -> Vec<DMatrix<f64>> {
    let mut smoothed = run.analyses.clone();
    let kk = run.innovations.len();
    for k in 1..=kk {
        let first = match lag {
            Some(l) => k.saturating_sub(l),
            None => 0,
        };
        for l in first..k {
            let inc = regression_increment(
                &smoothed[l],
                &run.obs_anomalies[k - 1],
                &run.innovations[k - 1],
            );
            smoothed[l] += inc;
        }
    }
    smoothed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::kalman::{kalman_filter, kf_step, rts_smoother, GaussianStateSpace};
    use crate::models::{Ar1Config, LinearModel};
    use crate::numerics::mvn_sample;
    use nalgebra::dmatrix;

    fn prior(m0: f64, p0: f64, np: usize, rng: &mut RngStream) -> DMatrix<f64> {
        let v = mvn_sample(
            &DVector::from_element(1, m0),
            &SpdMatrix::scaled_identity(1, p0),
            rng,
            np,
        )
        .unwrap();
        DMatrix::from_columns(&v)
    }

    fn mean_var(x: &DMatrix<f64>) -> (f64, f64) {
        let n = x.ncols() as f64;
        let m = x.row(0).sum() / n;
        let v = x.row(0).iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn single_member_is_rejected() {
        let m = Ar1Config { nu: 0.8 }.model();
        let q = SpdMatrix::identity(1);
        let e = Ensemble::uniform(DMatrix::from_element(1, 1, 0.0), 0).unwrap();
        let err = enkf_step(&e, &[0.0], &m, &q, &q, &mut RngStream::new(0, 0)).unwrap_err();
        assert_eq!(err, FilterError::InsufficientEnsemble(1));
    }

    #[test]
    fn uninformative_observation_keeps_forecast() {
        let m = Ar1Config { nu: 0.8 }.model();
        let q = SpdMatrix::identity(1);
        let r = SpdMatrix::scaled_identity(1, 1e12);
        let mut rng = RngStream::new(4, 0);
        let x = prior(0.0, 1.0, 30, &mut rng);
        let c = enkf_cycle(&x, 1, &[3.0], &m, &q, &r, &EnkfOptions::default(), &mut rng).unwrap();
        assert!((&c.analysis - &c.forecast).abs().max() < 1e-4);
    }

    #[test]
    fn agrees_with_kalman_filter() {
        let model = Ar1Config { nu: 0.8 }.model();
        let q = SpdMatrix::identity(1);
        let r = SpdMatrix::scaled_identity(1, 0.5);
        let (m0, p0, y) = (0.3, 0.8, 1.4);
        let np = 10_000;
        let mut rng = RngStream::new(5, 0);
        let x = prior(m0, p0, np, &mut rng);
        let c = enkf_cycle(
            &x,
            1,
            &[y],
            &model,
            &q,
            &r,
            &EnkfOptions::default(),
            &mut rng,
        )
        .unwrap();
        let gss = GaussianStateSpace::new(model, q, r, DVector::from_element(1, m0), dmatrix![p0])
            .unwrap();
        let kf = kf_step(&gss.m0, &gss.p0, &DVector::from_element(1, y), &gss).unwrap();
        let (mean, var) = mean_var(&c.analysis);
        let se = (kf.cov[(0, 0)] / np as f64).sqrt();
        assert!(
            (mean - kf.mean[0]).abs() < 3.0 * se,
            "{mean} vs {}",
            kf.mean[0]
        );
        assert!((var / kf.cov[(0, 0)] - 1.0).abs() < 0.06);
    }

    fn linear_problem() -> (LinearModel, SpdMatrix, SpdMatrix, Vec<DVector<f64>>) {
        let model = Ar1Config { nu: 0.8 }.model();
        let ys = [0.5, 1.2, -0.4, 0.9, 2.0, 1.1]
            .iter()
            .map(|v| DVector::from_element(1, *v))
            .collect();
        (model, SpdMatrix::identity(1), SpdMatrix::identity(1), ys)
    }

    #[test]
    fn zero_lag_returns_filter_ensembles() {
        let (model, q, r, ys) = linear_problem();
        let mut rng = RngStream::new(6, 0);
        let x0 = prior(0.0, 1.0, 20, &mut rng);
        let run = enkf_pass(&model, &ys, &q, &r, &x0, &EnkfOptions::default(), &rng).unwrap();
        assert_eq!(enks(&run, Some(0)), run.analyses);
        assert_eq!(run.analyses.len(), ys.len() + 1);
    }

    #[test]
    fn smoother_agrees_with_rts() {
        let (model, q, r, ys) = linear_problem();
        let np = 10_000;
        let mut rng = RngStream::new(7, 0);
        let x0 = prior(0.0, 1.0, np, &mut rng);
        let run = enkf_pass(&model, &ys, &q, &r, &x0, &EnkfOptions::default(), &rng).unwrap();
        let smoothed = enks(&run, None);
        let gss = GaussianStateSpace::new(model, q, r, DVector::zeros(1), dmatrix![1.0]).unwrap();
        let s = rts_smoother(&kalman_filter(&gss, &ys).unwrap(), &gss);
        for k in 0..=ys.len() {
            let (mean, _) = mean_var(&smoothed[k]);
            let se = (s.covs[k][(0, 0)] / np as f64).sqrt();
            // sampling error of the prior and filter adds to the member spread
            assert!(
                (mean - s.means[k][0]).abs() < 4.0 * se,
                "k={k}: {mean} vs {}",
                s.means[k][0]
            );
        }
    }

    #[test]
    fn uninformative_future_leaves_past_unchanged() {
        let model = LinearModel::new(dmatrix![0.8], dmatrix![1.0]).unwrap();
        let q = SpdMatrix::identity(1);
        let r = SpdMatrix::identity(1);
        let loose = SpdMatrix::scaled_identity(1, 1e12);
        let mut rng = RngStream::new(8, 0);
        let x0 = prior(0.0, 1.0, 50, &mut rng);
        let opts = EnkfOptions::default();
        // two informative cycles, then three uninformative ones
        let mut analyses = vec![x0];
        let mut obs_anomalies = Vec::new();
        let mut innovations = Vec::new();
        let mut log_evidence = Vec::new();
        for k in 1..=5 {
            let rk = if k <= 2 { &r } else { &loose };
            let mut c_rng = rng.child(k as u64);
            let c = enkf_cycle(
                &analyses[k - 1],
                k,
                &[1.0],
                &model,
                &q,
                rk,
                &opts,
                &mut c_rng,
            )
            .unwrap();
            analyses.push(c.analysis);
            obs_anomalies.push(c.obs_anomalies);
            innovations.push(c.innovations);
            log_evidence.push(c.log_evidence);
        }
        let run = EnkfRun {
            analyses,
            obs_anomalies,
            innovations,
            log_evidence,
        };
        let smoothed = enks(&run, None);
        assert!((&smoothed[2] - &run.analyses[2]).abs().max() < 1e-4);
    }

    #[test]
    fn inflation_validation() {
        assert!(EnkfOptions { inflation: 0.9 }.validate().is_err());
        assert!(EnkfOptions { inflation: 1.1 }.validate().is_ok());
    }
}
