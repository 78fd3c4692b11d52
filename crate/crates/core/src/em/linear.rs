//! EM with Kalman filter and RTS smoother for linear-Gaussian models.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::{check_problem, project_and_validate, EmError, EmOptions, EmRecord, EmTrace};
use crate::filters::{kalman_filter, rts_smoother, FilterError, GaussianStateSpace, Smoothed};
use crate::numerics::{frobenius_rel_diff, SpdMatrix};

/// `(1/K) Σ_k E[(x_k − A x_{k−1})(x_k − A x_{k−1})ᵀ | y_{1:K}]` from smoothed
/// moments and lag-one covariances. The result is symmetric but not
/// validated; it tends to zero for noise-free data.
pub fn shumway_stoffer_q_update(smoothed: &Smoothed, gss: &GaussianStateSpace) -> DMatrix<f64> {
    let a = gss.a();
    let kk = smoothed.lag_one.len();
    let n = a.nrows();
    let mut acc = DMatrix::<f64>::zeros(n, n);
    for k in 1..=kk {
        let r = &smoothed.means[k] - a * &smoothed.means[k - 1];
        let c = &smoothed.lag_one[k - 1] * a.transpose();
        acc += &r * r.transpose() + &smoothed.covs[k] - &c - c.transpose()
            + a * &smoothed.covs[k - 1] * a.transpose();
    }
    acc /= kk.max(1) as f64;
    (&acc + acc.transpose()) * 0.5
}

/// `Σ_k log p(y_k | y_{1:k−1})` under `q`.
pub fn incomplete_loglik_linear(
    gss: &GaussianStateSpace,
    ys: &[DVector<f64>],
    q: &SpdMatrix,
) -> Result<f64, FilterError> {
    Ok(kalman_filter(&gss.with_q(q.clone()), ys)?.loglik())
}

/// Classical EM for `Q`: Kalman filter and RTS smoother in the E-step, the
/// closed-form smoothed residual covariance in the M-step. `gss.q` is ignored
/// in favour of `q0`; the fixed-point and filter settings of `opts` are unused.
pub fn em_kf_ks(
    gss: &GaussianStateSpace,
    ys: &[DVector<f64>],
    q0: &SpdMatrix,
    opts: &EmOptions,
) -> Result<EmTrace, EmError> {
    opts.validate()?;
    check_problem(gss.a().nrows(), ys, q0)?;
    let filter_err = |s: usize| {
        move |source| EmError::Filter {
            s,
            fp_iteration: 0,
            source,
        }
    };
    let mut records = vec![EmRecord {
        iteration: 0,
        q: q0.clone(),
        stop_em: f64::NAN,
        fp_iterations: 0,
        fp_stops: Vec::new(),
        loglik_proxy: f64::NAN,
        wallclock_s: 0.0,
    }];
    let mut current = gss.with_q(q0.clone());
    let mut converged = false;
    let mut s = 0;
    while s < opts.max_em_iterations {
        s += 1;
        let start = Instant::now();
        let pass = kalman_filter(&current, ys).map_err(filter_err(s))?;
        records[s - 1].loglik_proxy = pass.loglik();
        let smoothed = rts_smoother(&pass, &current);
        let q_new = project_and_validate(
            &shumway_stoffer_q_update(&smoothed, &current),
            opts.structure,
        )?;
        let stop_em = frobenius_rel_diff(q_new.values(), current.q.values())?;
        current = current.with_q(q_new.clone());
        records.push(EmRecord {
            iteration: s,
            q: q_new,
            stop_em,
            fp_iterations: 0,
            fp_stops: Vec::new(),
            loglik_proxy: f64::NAN,
            wallclock_s: start.elapsed().as_secs_f64(),
        });
        if stop_em <= opts.em_tolerance {
            converged = true;
            break;
        }
    }
    records[s].loglik_proxy = kalman_filter(&current, ys)
        .map_err(filter_err(s + 1))?
        .loglik();
    Ok(EmTrace { records, converged })
}
