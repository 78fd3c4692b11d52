//! EM with a stochastic EnKF and ensemble Kalman smoother in the E-step.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::{check_problem, project_and_validate, EmError, EmOptions, EmRecord, EmTrace};
use crate::filters::{enkf_pass, enks, EnkfOptions};
use crate::models::StateSpaceModel;
use crate::numerics::{frobenius_rel_diff, RngStream, SpdMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnksOptions {
    pub enkf: EnkfOptions,
    /// Smoother lag in cycles; `None` smooths over the whole window.
    pub lag: Option<usize>,
}

/// `(1/(K N)) Σ_k Σ_n r rᵀ` with `r = x_k^{(n)} − M(x_{k−1}^{(n)})` over the
/// smoothed members.
fn smoothed_residual_covariance(
    model: &dyn StateSpaceModel,
    smoothed: &[DMatrix<f64>],
) -> DMatrix<f64> {
    let nx = model.state_dim();
    let kk = smoothed.len() - 1;
    let np = smoothed[0].ncols();
    let mut acc = DMatrix::<f64>::zeros(nx, nx);
    let mut resid = DMatrix::<f64>::zeros(nx, np);
    for k in 1..=kk {
        for n in 0..np {
            let image = model.propagate(&smoothed[k - 1].as_slice()[n * nx..(n + 1) * nx]);
            for d in 0..nx {
                resid[(d, n)] = smoothed[k][(d, n)] - image[d];
            }
        }
        acc += &resid * resid.transpose();
    }
    acc /= (kk * np) as f64;
    (&acc + acc.transpose()) * 0.5
}

/// EM baseline: EnKF forward pass and EnKS backward regression in the E-step,
/// the ensemble residual covariance in the M-step. Iteration `s` draws from
/// `rng.child(s)`; `initial` holds the members as columns.
#[allow(clippy::too_many_arguments)]
pub fn em_enkf_enks(
    model: &dyn StateSpaceModel,
    ys: &[DVector<f64>],
    q0: &SpdMatrix,
    r: &SpdMatrix,
    initial: &DMatrix<f64>,
    opts: &EmOptions,
    smoother: &EnksOptions,
    rng: &RngStream,
) -> Result<EmTrace, EmError> {
    opts.validate()?;
    check_problem(model.state_dim(), ys, q0)?;
    let pass = |q: &SpdMatrix, s: usize| {
        enkf_pass(
            model,
            ys,
            q,
            r,
            initial,
            &smoother.enkf,
            &rng.child(s as u64),
        )
        .map_err(|source| EmError::Filter {
            s,
            fp_iteration: 0,
            source,
        })
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
    let mut q_em = q0.clone();
    let mut converged = false;
    let mut s = 0;
    while s < opts.max_em_iterations {
        s += 1;
        let start = Instant::now();
        let run = pass(&q_em, s)?;
        records[s - 1].loglik_proxy = run.loglik();
        let smoothed = enks(&run, smoother.lag);
        let q_new = project_and_validate(
            &smoothed_residual_covariance(model, &smoothed),
            opts.structure,
        )?;
        let stop_em = frobenius_rel_diff(q_new.values(), q_em.values())?;
        q_em = q_new;
        records.push(EmRecord {
            iteration: s,
            q: q_em.clone(),
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
    records[s].loglik_proxy = pass(&q_em, s + 1)?.loglik();
    Ok(EmTrace { records, converged })
}
