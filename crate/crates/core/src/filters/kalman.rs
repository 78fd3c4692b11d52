//! Kalman filter and Rauch–Tung–Striebel smoother for linear-Gaussian models.

use nalgebra::{DMatrix, DVector};

use super::{check_dim, FilterError};
use crate::models::{LinearModel, StateSpaceModel};
use crate::numerics::{gaussian_logpdf, SpdMatrix};

/// Linear-Gaussian state-space model with a Gaussian prior on `x_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStateSpace {
    pub model: LinearModel,
    pub q: SpdMatrix,
    pub r: SpdMatrix,
    pub m0: DVector<f64>,
    pub p0: DMatrix<f64>,
}

impl GaussianStateSpace {
    pub fn new(
        model: LinearModel,
        q: SpdMatrix,
        r: SpdMatrix,
        m0: DVector<f64>,
        p0: DMatrix<f64>,
    ) -> Result<Self, FilterError> {
        let n = model.state_dim();
        check_dim(n, q.dim())?;
        check_dim(model.obs_dim(), r.dim())?;
        check_dim(n, m0.len())?;
        check_dim(n, p0.nrows())?;
        check_dim(n, p0.ncols())?;
        Ok(Self {
            model,
            q,
            r,
            m0,
            p0,
        })
    }

    pub fn with_q(&self, q: SpdMatrix) -> Self {
        Self { q, ..self.clone() }
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.model.a
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.model.h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KfStep {
    pub forecast_mean: DVector<f64>,
    pub forecast_cov: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `log p(y_k | y_{1:k−1})`
    pub loglik: f64,
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn kf_step_at(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    y: &DVector<f64>,
    gss: &GaussianStateSpace,
    k: usize,
) -> Result<KfStep, FilterError> {
    let (a, h) = (gss.a(), gss.h());
    check_dim(a.ncols(), mean.len())?;
    check_dim(h.nrows(), y.len())?;
    let forecast_mean = a * mean;
    let forecast_cov = symmetrize(a * cov * a.transpose() + gss.q.values());
    let s = symmetrize(h * &forecast_cov * h.transpose() + gss.r.values());
    let s = SpdMatrix::new(&s, 0.0).map_err(|_| FilterError::SingularInnovationCovariance { k })?;
    let predicted = h * &forecast_mean;
    let loglik = gaussian_logpdf(y, &predicted, &s)?;
    // K = P Hᵀ S⁻¹, computed column-wise through the factor of S
    let pht = &forecast_cov * h.transpose();
    let mut gain = DMatrix::<f64>::zeros(pht.nrows(), pht.ncols());
    for i in 0..pht.nrows() {
        let mut row: Vec<f64> = pht.row(i).iter().cloned().collect();
        s.solve_in_place(&mut row);
        for (j, v) in row.into_iter().enumerate() {
            gain[(i, j)] = v;
        }
    }
    let innov = y - &predicted;
    let mean = &forecast_mean + &gain * innov;
    let n = mean.len();
    let ikh = DMatrix::<f64>::identity(n, n) - &gain * h;
    let cov = symmetrize(
        &ikh * &forecast_cov * ikh.transpose() + &gain * gss.r.values() * gain.transpose(),
    );
    Ok(KfStep {
        forecast_mean,
        forecast_cov,
        mean,
        cov,
        loglik,
    })
}

/// Predict with `A`, `Q`, then update with `H`, `R` (Joseph form).
pub fn kf_step(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    y: &DVector<f64>,
    gss: &GaussianStateSpace,
) -> Result<KfStep, FilterError> {
    kf_step_at(mean, cov, y, gss, 1)
}

/// Full forward pass over `y_{1:K}`.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanPass {
    pub m0: DVector<f64>,
    pub p0: DMatrix<f64>,
    /// Entry `k − 1` holds cycle `k`.
    pub steps: Vec<KfStep>,
}

impl KalmanPass {
    pub fn loglik(&self) -> f64 {
        self.steps.iter().map(|s| s.loglik).sum()
    }
}

pub fn kalman_filter(
    gss: &GaussianStateSpace,
    ys: &[DVector<f64>],
) -> Result<KalmanPass, FilterError> {
    let mut steps: Vec<KfStep> = Vec::with_capacity(ys.len());
    for (i, y) in ys.iter().enumerate() {
        let (m, p) = match steps.last() {
            Some(s) => (&s.mean, &s.cov),
            None => (&gss.m0, &gss.p0),
        };
        let step = kf_step_at(m, p, y, gss, i + 1)?;
        steps.push(step);
    }
    Ok(KalmanPass {
        m0: gss.m0.clone(),
        p0: gss.p0.clone(),
        steps,
    })
}

/// Smoothed moments over `k = 0..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    /// Entry `k − 1` holds `Cov(x_k, x_{k−1} | y_{1:K})`.
    pub lag_one: Vec<DMatrix<f64>>,
}

/// RTS backward recursion with lag-one covariances `P_{k,k−1} = P_k^s J_{k−1}ᵀ`.
pub fn rts_smoother(pass: &KalmanPass, gss: &GaussianStateSpace) -> Smoothed {
    let kk = pass.steps.len();
    let n = pass.m0.len();
    let filt_mean = |k: usize| {
        if k == 0 {
            &pass.m0
        } else {
            &pass.steps[k - 1].mean
        }
    };
    let filt_cov = |k: usize| {
        if k == 0 {
            &pass.p0
        } else {
            &pass.steps[k - 1].cov
        }
    };
    let mut means = vec![DVector::<f64>::zeros(n); kk + 1];
    let mut covs = vec![DMatrix::<f64>::zeros(n, n); kk + 1];
    let mut lag_one = vec![DMatrix::<f64>::zeros(n, n); kk];
    means[kk] = filt_mean(kk).clone();
    covs[kk] = filt_cov(kk).clone();
    let a = gss.a();
    for k in (0..kk).rev() {
        let next = &pass.steps[k];
        // J = P_k Aᵀ (P^f_{k+1})⁻¹, i.e. Jᵀ solves P^f Jᵀ = A P_k
        let rhs = a * filt_cov(k);
        let jt = next
            .forecast_cov
            .clone()
            .lu()
            .solve(&rhs)
            .unwrap_or_else(|| DMatrix::zeros(n, n));
        let j = jt.transpose();
        means[k] = filt_mean(k) + &j * (&means[k + 1] - &next.forecast_mean);
        covs[k] = symmetrize(filt_cov(k) + &j * (&covs[k + 1] - &next.forecast_cov) * &jt);
        lag_one[k] = &covs[k + 1] * &jt;
    }
    Smoothed {
        means,
        covs,
        lag_one,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use nalgebra::dmatrix;

    fn scalar(a: f64, q: f64, h: f64, r: f64, m0: f64, p0: f64) -> GaussianStateSpace {
        GaussianStateSpace::new(
            LinearModel::new(dmatrix![a], dmatrix![h]).unwrap(),
            SpdMatrix::scaled_identity(1, q),
            SpdMatrix::scaled_identity(1, r),
            DVector::from_element(1, m0),
            dmatrix![p0],
        )
        .unwrap()
    }

    #[test]
    fn hand_computed_step() {
        let g = scalar(0.0, 1.0, 1.0, 1.0, 0.0, 1.0);
        let y = 1.3;
        let s = kf_step(&g.m0, &g.p0, &DVector::from_element(1, y), &g).unwrap();
        assert_eq!(s.forecast_mean[0], 0.0);
        assert_eq!(s.forecast_cov[(0, 0)], 1.0);
        assert!((s.mean[0] - y / 2.0).abs() < 1e-15);
        assert!((s.cov[(0, 0)] - 0.5).abs() < 1e-15);
        let expected = -0.5 * (2.0 * std::f64::consts::PI * 2.0).ln() - y * y / 4.0;
        assert!((s.loglik - expected).abs() < 1e-12);
    }

    #[test]
    fn limits_of_observation_noise() {
        let loose = scalar(0.8, 1.0, 1.0, 1e12, 0.5, 1.0);
        let s = kf_step(&loose.m0, &loose.p0, &DVector::from_element(1, 9.0), &loose).unwrap();
        assert!((s.mean[0] - s.forecast_mean[0]).abs() < 1e-9);
        assert!((s.cov[(0, 0)] - s.forecast_cov[(0, 0)]).abs() < 1e-9);
        let tight = scalar(0.8, 1.0, 1.0, 1e-12, 0.5, 1.0);
        let s = kf_step(&tight.m0, &tight.p0, &DVector::from_element(1, 9.0), &tight).unwrap();
        assert!((s.mean[0] - 9.0).abs() < 1e-9);
    }

    #[test]
    fn singular_innovation_is_reported() {
        let g = scalar(1.0, 1.0, 1.0, 1.0, 0.0, f64::NAN);
        let err = kf_step(&g.m0, &g.p0, &DVector::from_element(1, 0.0), &g).unwrap_err();
        assert_eq!(err, FilterError::SingularInnovationCovariance { k: 1 });
    }

    #[test]
    fn single_cycle_smoother_equals_filter() {
        let g = scalar(0.8, 1.0, 1.0, 1.0, 0.0, 1.0);
        let pass = kalman_filter(&g, &[DVector::from_element(1, 0.7)]).unwrap();
        let s = rts_smoother(&pass, &g);
        assert_eq!(s.means[1], pass.steps[0].mean);
        assert_eq!(s.covs[1], pass.steps[0].cov);
    }

    #[test]
    fn deterministic_dynamics_limit() {
        let g = scalar(0.9, 1e-10, 1.0, 1.0, 0.0, 4.0);
        let ys: Vec<_> = [1.0, -0.3, 2.2, 0.4, 1.1]
            .iter()
            .map(|v| DVector::from_element(1, *v))
            .collect();
        let s = rts_smoother(&kalman_filter(&g, &ys).unwrap(), &g);
        for k in 1..s.means.len() {
            assert!((s.means[k][0] - 0.9 * s.means[k - 1][0]).abs() < 1e-4);
        }
    }

    /// Smoothed means and covariances by conditioning the explicit joint
    /// Gaussian of `(x_0..x_K, y_1..y_K)`.
    fn brute_force(
        g: &GaussianStateSpace,
        ys: &[DVector<f64>],
    ) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let n = g.m0.len();
        let m = g.h().nrows();
        let kk = ys.len();
        let dx = (kk + 1) * n;
        let dim = dx + kk * m;
        // linear map from (x0, β1..βK, ε1..εK) to (x, y)
        let nz = n + kk * n + kk * m;
        let mut t = DMatrix::<f64>::zeros(dim, nz);
        let mut mean = DVector::<f64>::zeros(dim);
        let a = g.a();
        let mut apow = vec![DMatrix::<f64>::identity(n, n)];
        for i in 1..=kk {
            apow.push(a * &apow[i - 1]);
        }
        for k in 0..=kk {
            // x_k = A^k x0 + Σ_{l=1..k} A^{k−l} β_l
            t.view_mut((k * n, 0), (n, n)).copy_from(&apow[k]);
            mean.rows_mut(k * n, n).copy_from(&(&apow[k] * &g.m0));
            for l in 1..=k {
                t.view_mut((k * n, n + (l - 1) * n), (n, n))
                    .copy_from(&apow[k - l]);
            }
        }
        for k in 1..=kk {
            let xrows = t.view((k * n, 0), (n, nz)).clone_owned();
            let hx = g.h() * xrows;
            t.view_mut((dx + (k - 1) * m, 0), (m, nz)).copy_from(&hx);
            t.view_mut((dx + (k - 1) * m, n + kk * n + (k - 1) * m), (m, m))
                .copy_from(&DMatrix::identity(m, m));
            let my = g.h() * mean.rows(k * n, n).clone_owned();
            mean.rows_mut(dx + (k - 1) * m, m).copy_from(&my);
        }
        let mut zc = DMatrix::<f64>::zeros(nz, nz);
        zc.view_mut((0, 0), (n, n)).copy_from(&g.p0);
        for l in 0..kk {
            zc.view_mut((n + l * n, n + l * n), (n, n))
                .copy_from(g.q.values());
            zc.view_mut((n + kk * n + l * m, n + kk * n + l * m), (m, m))
                .copy_from(g.r.values());
        }
        let c = &t * zc * t.transpose();
        let cxx = c.view((0, 0), (dx, dx)).clone_owned();
        let cxy = c.view((0, dx), (dx, kk * m)).clone_owned();
        let cyy = c.view((dx, dx), (kk * m, kk * m)).clone_owned();
        let yv = DVector::from_iterator(kk * m, ys.iter().flat_map(|y| y.iter().cloned()));
        let cyy_inv = cyy.try_inverse().unwrap();
        let post_mean =
            mean.rows(0, dx).clone_owned() + &cxy * &cyy_inv * (yv - mean.rows(dx, kk * m));
        let post_cov = cxx - &cxy * cyy_inv * cxy.transpose();
        let means = (0..=kk)
            .map(|k| post_mean.rows(k * n, n).clone_owned())
            .collect();
        let covs = (0..=kk)
            .map(|k| post_cov.view((k * n, k * n), (n, n)).clone_owned())
            .collect();
        let lag = (1..=kk)
            .map(|k| post_cov.view((k * n, (k - 1) * n), (n, n)).clone_owned())
            .collect();
        (means, covs, lag)
    }

    #[test]
    fn smoother_matches_joint_gaussian_conditioning() {
        let mut rng = RngStream::new(31, 0);
        let a = DMatrix::from_fn(2, 2, |_, _| 0.5 * rng.standard_normal());
        let h = DMatrix::from_fn(1, 2, |_, _| rng.standard_normal());
        let g = GaussianStateSpace::new(
            LinearModel::new(a, h).unwrap(),
            SpdMatrix::new(&dmatrix![0.7, 0.2; 0.2, 0.4], 0.0).unwrap(),
            SpdMatrix::scaled_identity(1, 0.3),
            DVector::from_vec(vec![0.3, -0.2]),
            dmatrix![1.0, 0.1; 0.1, 0.5],
        )
        .unwrap();
        let ys: Vec<_> = (0..3)
            .map(|_| DVector::from_element(1, rng.standard_normal()))
            .collect();
        let s = rts_smoother(&kalman_filter(&g, &ys).unwrap(), &g);
        let (means, covs, lag) = brute_force(&g, &ys);
        for k in 0..=3 {
            assert!((&s.means[k] - &means[k]).norm() < 1e-8);
            assert!((&s.covs[k] - &covs[k]).norm() < 1e-8);
        }
        for k in 0..3 {
            assert!((&s.lag_one[k] - &lag[k]).norm() < 1e-8, "lag {k}");
        }
    }
}
