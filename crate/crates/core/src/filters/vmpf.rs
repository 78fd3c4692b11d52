//! Variational mapping particle filter.
//!
//! The forecast sample is transported towards the posterior by a sequence of
//! maps `x ← x + ε v(x)`, where `v` is the kernelized steepest-descent
//! direction of the KL divergence between the particle density and the
//! posterior (the interacting-particle form of the flow in an RKHS with a
//! Gaussian kernel). The prior at cycle `k` is the Gaussian mixture
//! `Σ_i w_{k−1}^{(i)} N(x; M(x_{k−1}^{(i)}), Q)`.

use nalgebra::DMatrix;

use super::{check_dim, Ensemble, FilterError};
use crate::models::StateSpaceModel;
use crate::numerics::{add_mvn_noise, log_sum_exp, RngStream, SpdMatrix, LN_2PI};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelBandwidth {
    /// `B = c I` with `c = med²/(2 ln N_p)` over Euclidean pairwise distances.
    MedianHeuristic,
    /// `B = c Q` with `c = med²/(2 ln N_p)` over Q-Mahalanobis pairwise distances.
    ScaledIdentity,
    /// `B = Q`.
    ModelError,
}

/// Scalar that divides the kernel sums of the flow at each particle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowNormalization {
    /// `1/N_p`: the plain Monte Carlo average over particles.
    ParticleCount,
    /// `1/Σ_s K(x_s, x_t)`, per target particle. This rescales the flow at
    /// each particle by a positive factor, so the stationary configurations
    /// are those of the plain average, but the rate no longer shrinks with
    /// the number of particles inside the kernel.
    KernelSum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VmpfOptions {
    /// Initial mapping step `ε`.
    pub step_size: f64,
    /// Smallest step reached by halving before the mapping stops.
    pub min_step_size: f64,
    pub max_iterations: usize,
    /// Mapping stops once the mean particle displacement falls below this.
    pub tolerance: f64,
    pub kernel: KernelBandwidth,
    pub normalization: FlowNormalization,
}

impl Default for VmpfOptions {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            min_step_size: 1e-4,
            max_iterations: 100,
            tolerance: 1e-3,
            kernel: KernelBandwidth::ScaledIdentity,
            normalization: FlowNormalization::KernelSum,
        }
    }
}

impl VmpfOptions {
    pub fn validate(&self) -> Result<(), FilterError> {
        if !(self.step_size > 0.0)
            || !(self.min_step_size > 0.0)
            || self.min_step_size > self.step_size
        {
            return Err(FilterError::InvalidOptions(
                "need 0 < min step <= step size".into(),
            ));
        }
        if !(self.tolerance > 0.0) {
            return Err(FilterError::InvalidOptions(
                "tolerance must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Gaussian-mixture prior times Gaussian likelihood, with cached whitened
/// mixture centres.
pub(crate) struct LogPosterior<'a> {
    model: &'a dyn StateSpaceModel,
    y: &'a [f64],
    q: &'a SpdMatrix,
    r: &'a SpdMatrix,
    images: &'a DMatrix<f64>,
    log_weights: Vec<f64>,
    whitened_images: DMatrix<f64>,
    prior_const: f64,
    lik_const: f64,
}

impl<'a> LogPosterior<'a> {
    pub(crate) fn new(
        model: &'a dyn StateSpaceModel,
        y: &'a [f64],
        q: &'a SpdMatrix,
        r: &'a SpdMatrix,
        images: &'a DMatrix<f64>,
        weights: &[f64],
    ) -> Self {
        let mut whitened_images = images.clone();
        for mut col in whitened_images.column_iter_mut() {
            q.whiten_in_place(col.as_mut_slice());
        }
        let nx = q.dim() as f64;
        let m = r.dim() as f64;
        Self {
            model,
            y,
            q,
            r,
            images,
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            whitened_images,
            prior_const: -0.5 * (nx * LN_2PI + q.log_det()),
            lik_const: -0.5 * (m * LN_2PI + r.log_det()),
        }
    }

    /// Log posterior (up to the evidence) and its gradient at `x`.
    pub(crate) fn eval(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let nx = x.len();
        let np = self.images.ncols();
        let mut z = x.to_vec();
        self.q.whiten_in_place(&mut z);
        let wimg = self.whitened_images.as_slice();
        let mut a: Vec<f64> = (0..np)
            .map(|i| {
                let c = &wimg[i * nx..(i + 1) * nx];
                let d2: f64 = z.iter().zip(c).map(|(p, q)| (p - q) * (p - q)).sum();
                self.log_weights[i] - 0.5 * d2
            })
            .collect();
        let lse = log_sum_exp(&a);
        let log_prior = lse + self.prior_const;
        // mixture responsibilities and their weighted centre
        let img = self.images.as_slice();
        let mut resid = x.to_vec();
        for (i, ai) in a.iter_mut().enumerate() {
            let b = (*ai - lse).exp();
            if b > 0.0 {
                for (d, c) in resid.iter_mut().zip(&img[i * nx..(i + 1) * nx]) {
                    *d -= b * c;
                }
            }
        }
        self.q.solve_in_place(&mut resid);

        let hx = self.model.observe(x);
        let mut innov: Vec<f64> = self.y.iter().zip(&hx).map(|(a, b)| a - b).collect();
        let mut white = innov.clone();
        self.r.whiten_in_place(&mut white);
        let log_lik = self.lik_const - 0.5 * white.iter().map(|v| v * v).sum::<f64>();
        self.r.solve_in_place(&mut innov);
        let lik_grad = self.model.observe_adjoint(x, &innov);

        let grad = lik_grad.iter().zip(&resid).map(|(l, p)| l - p).collect();
        (log_lik + log_prior, grad)
    }
}

fn check_inputs(
    prev: &Ensemble,
    y: &[f64],
    model: &dyn StateSpaceModel,
    q: &SpdMatrix,
    r: &SpdMatrix,
) -> Result<(), FilterError> {
    check_dim(model.state_dim(), prev.dim())?;
    check_dim(model.state_dim(), q.dim())?;
    check_dim(model.obs_dim(), y.len())?;
    check_dim(model.obs_dim(), r.dim())
}

fn propagate_images(prev: &Ensemble, model: &dyn StateSpaceModel) -> DMatrix<f64> {
    let mut images = DMatrix::<f64>::zeros(prev.dim(), prev.len());
    for j in 0..prev.len() {
        images
            .column_mut(j)
            .copy_from_slice(&model.propagate(prev.particle(j)));
    }
    images
}

/// Log posterior at `x` for the mixture prior built from `prev_ens`.
pub fn log_posterior(
    x: &[f64],
    prev_ens: &Ensemble,
    y: &[f64],
    model: &dyn StateSpaceModel,
    q: &SpdMatrix,
    r: &SpdMatrix,
) -> Result<f64, FilterError> {
    check_inputs(prev_ens, y, model, q, r)?;
    check_dim(model.state_dim(), x.len())?;
    let images = propagate_images(prev_ens, model);
    Ok(
        LogPosterior::new(model, y, q, r, &images, prev_ens.weights())
            .eval(x)
            .0,
    )
}

/// `Hᵀ R⁻¹ (y − H(x)) − Q⁻¹ [x − Σ_j β̂_j M(x_{k−1}^{(j)})]`, where the
/// responsibilities `β̂_j ∝ w_j exp(−½ ‖x − M(x_{k−1}^{(j)})‖²_Q)`.
pub fn vmpf_log_posterior_gradient(
    x: &[f64],
    prev_ens: &Ensemble,
    y: &[f64],
    model: &dyn StateSpaceModel,
    q: &SpdMatrix,
    r: &SpdMatrix,
) -> Result<Vec<f64>, FilterError> {
    check_inputs(prev_ens, y, model, q, r)?;
    check_dim(model.state_dim(), x.len())?;
    let images = propagate_images(prev_ens, model);
    Ok(
        LogPosterior::new(model, y, q, r, &images, prev_ens.weights())
            .eval(x)
            .1,
    )
}

/// Gaussian kernel `K = exp(−½ dᵀB⁻¹d)`, `d = x_src − x_dst`, and its gradient
/// with respect to `x_src`, `−K B⁻¹ d`.
pub fn vmpf_kernel_and_grad(
    x_src: &[f64],
    x_dst: &[f64],
    bandwidth: &SpdMatrix,
) -> (f64, Vec<f64>) {
    let d: Vec<f64> = x_src.iter().zip(x_dst).map(|(a, b)| a - b).collect();
    let k = (-0.5 * bandwidth.mahalanobis_sq(&d)).exp();
    let mut g = d;
    bandwidth.solve_in_place(&mut g);
    for v in g.iter_mut() {
        *v *= -k;
    }
    (k, g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapStats {
    pub iterations: usize,
    /// Mean particle displacement of the last accepted map.
    pub mean_update_norm: f64,
    pub final_step_size: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pairwise squared distances between columns.
fn pairwise_sq(cols: &DMatrix<f64>) -> DMatrix<f64> {
    let (nx, np) = cols.shape();
    let s = cols.as_slice();
    let mut d = DMatrix::<f64>::zeros(np, np);
    for a in 0..np {
        for b in (a + 1)..np {
            let v: f64 = (0..nx)
                .map(|i| (s[a * nx + i] - s[b * nx + i]).powi(2))
                .sum();
            d[(a, b)] = v;
            d[(b, a)] = v;
        }
    }
    d
}

/// Bandwidth scale `med²/(2 ln N_p)`, falling back to 1 when undefined.
fn bandwidth_scale(d2: &DMatrix<f64>) -> f64 {
    let np = d2.nrows();
    if np < 2 {
        return 1.0;
    }
    let mut dists = Vec::with_capacity(np * (np - 1) / 2);
    for a in 0..np {
        for b in (a + 1)..np {
            dists.push(d2[(a, b)].sqrt());
        }
    }
    let med = median(dists);
    let c = med * med / (2.0 * (np as f64).ln());
    if c > 0.0 && c.is_finite() {
        c
    } else {
        1.0
    }
}

/// Kernelized flow `v(x_t) = (1/Z_t) Σ_s [K(x_s, x_t) ∇log p(x_s) + ∇_{x_s} K(x_s, x_t)]`
/// with `Z_t = N` or `Z_t = Σ_s K(x_s, x_t)`.
fn flow_field(
    x: &DMatrix<f64>,
    grads: &DMatrix<f64>,
    q: &SpdMatrix,
    opts: &VmpfOptions,
) -> DMatrix<f64> {
    let (nx, np) = x.shape();
    let (d2, is_q_metric) = match opts.kernel {
        KernelBandwidth::ScaledIdentity | KernelBandwidth::ModelError => {
            let mut z = x.clone();
            for mut col in z.column_iter_mut() {
                q.whiten_in_place(col.as_mut_slice());
            }
            (pairwise_sq(&z), true)
        }
        KernelBandwidth::MedianHeuristic => (pairwise_sq(x), false),
    };
    let c = match opts.kernel {
        KernelBandwidth::ModelError => 1.0,
        _ => bandwidth_scale(&d2),
    };
    let kmat = d2.map(|v| (-0.5 * v / c).exp());
    let mut v = grads * &kmat;
    let xs = x.as_slice();
    for t in 0..np {
        let mut rep = vec![0.0; nx];
        for s in 0..np {
            let kst = kmat[(s, t)];
            if s == t || kst == 0.0 {
                continue;
            }
            for i in 0..nx {
                rep[i] += kst * (xs[t * nx + i] - xs[s * nx + i]);
            }
        }
        if is_q_metric {
            q.solve_in_place(&mut rep);
        }
        let z = match opts.normalization {
            FlowNormalization::ParticleCount => np as f64,
            FlowNormalization::KernelSum => kmat.column(t).sum(),
        };
        for i in 0..nx {
            v[(i, t)] = (v[(i, t)] + rep[i] / c) / z;
        }
    }
    v
}

fn eval_all(target: &LogPosterior, x: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (nx, np) = x.shape();
    let mut logp = Vec::with_capacity(np);
    let mut grads = DMatrix::<f64>::zeros(nx, np);
    for j in 0..np {
        let (lp, g) = target.eval(&x.as_slice()[j * nx..(j + 1) * nx]);
        logp.push(lp);
        grads.column_mut(j).copy_from_slice(&g);
    }
    (logp, grads)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Transports `particles` towards `target`. Steps that produce non-finite
/// states or lower the mean log posterior are retried with half the step
/// size; the mapping stops once the step would drop below the minimum.
pub(crate) fn transport(
    mut particles: DMatrix<f64>,
    target: &LogPosterior,
    q: &SpdMatrix,
    opts: &VmpfOptions,
    k: usize,
) -> Result<(DMatrix<f64>, MapStats), FilterError> {
    if particles.iter().any(|v| !v.is_finite()) {
        return Err(FilterError::NonFiniteState { k });
    }
    let np = particles.ncols();
    let (mut logp, mut grads) = eval_all(target, &particles);
    let mut current = mean(&logp);
    if !current.is_finite() {
        return Err(FilterError::NonFiniteState { k });
    }
    let mut eps = opts.step_size;
    let mut stats = MapStats {
        iterations: 0,
        mean_update_norm: f64::INFINITY,
        final_step_size: eps,
    };
    'outer: while stats.iterations < opts.max_iterations {
        stats.iterations += 1;
        let v = flow_field(&particles, &grads, q, opts);
        loop {
            let proposal = &particles + &v * eps;
            if proposal.iter().all(|x| x.is_finite()) {
                let (lp, g) = eval_all(target, &proposal);
                let m = mean(&lp);
                if m.is_finite() && m >= current {
                    let norm: f64 =
                        v.column_iter().map(|c| c.norm()).sum::<f64>() * eps / np as f64;
                    particles = proposal;
                    logp = lp;
                    grads = g;
                    current = m;
                    stats.mean_update_norm = norm;
                    if norm < opts.tolerance {
                        break 'outer;
                    }
                    break;
                }
            }
            eps *= 0.5;
            if eps < opts.min_step_size {
                break 'outer;
            }
        }
    }
    stats.final_step_size = eps;
    debug_assert_eq!(logp.len(), np);
    Ok((particles, stats))
}

/// Output of one VMPF assimilation cycle.
#[derive(Debug, Clone)]
pub struct VmpfCycle {
    /// `M(x_{k−1}^{(i)})`
    pub images: DMatrix<f64>,
    /// Propagated particles before mapping.
    pub forecast: DMatrix<f64>,
    pub analysis: Ensemble,
    pub stats: MapStats,
    /// Bootstrap estimate of `log p(y_k | y_{1:k−1})` from the forecast sample.
    pub log_evidence: f64,
}

pub fn vmpf_cycle(
    prev: &Ensemble,
    y: &[f64],
    model: &dyn StateSpaceModel,
    q: &SpdMatrix,
    r: &SpdMatrix,
    opts: &VmpfOptions,
    rng: &mut RngStream,
) -> Result<VmpfCycle, FilterError> {
    opts.validate()?;
    check_inputs(prev, y, model, q, r)?;
    let k = prev.cycle() + 1;
    let images = propagate_images(prev, model);
    // forecast particles are drawn from the mixture prior
    let mut forecast = images.clone();
    let ancestors = super::systematic_resample(prev.weights(), rng);
    for (j, &a) in ancestors.iter().enumerate() {
        let mut col: Vec<f64> = images.column(a).iter().cloned().collect();
        add_mvn_noise(&mut col, q, rng);
        forecast.column_mut(j).copy_from_slice(&col);
    }
    let nx = prev.dim();
    let loglik: Vec<f64> = (0..forecast.ncols())
        .map(|j| {
            let hx = model.observe(&forecast.as_slice()[j * nx..(j + 1) * nx]);
            crate::numerics::gaussian_logpdf_unchecked(y, &hx, r)
        })
        .collect();
    let log_evidence = log_sum_exp(&loglik) - (forecast.ncols() as f64).ln();
    let target = LogPosterior::new(model, y, q, r, &images, prev.weights());
    let (mapped, stats) = transport(forecast.clone(), &target, q, opts, k)?;
    Ok(VmpfCycle {
        images,
        forecast,
        analysis: Ensemble::uniform(mapped, k)?,
        stats,
        log_evidence,
    })
}

/// One VMPF cycle: propagate with model noise, then map the sample towards
/// the posterior. The returned ensemble has uniform weights.
pub fn vmpf_assimilate(
    prev_ens: &Ensemble,
    y: &[f64],
    model: &dyn StateSpaceModel,
    q: &SpdMatrix,
    r: &SpdMatrix,
    opts: &VmpfOptions,
    rng: &mut RngStream,
) -> Result<Ensemble, FilterError> {
    vmpf_cycle(prev_ens, y, model, q, r, opts, rng).map(|c| c.analysis)
}

/// Maps a given forecast sample; the mixture prior is built from
/// `prev_ens`. Exposed so the mapping stage can be exercised on its own.
pub fn vmpf_map(
    forecast: DMatrix<f64>,
    prev_ens: &Ensemble,
    y: &[f64],
    model: &dyn StateSpaceModel,
    q: &SpdMatrix,
    r: &SpdMatrix,
    opts: &VmpfOptions,
) -> Result<(DMatrix<f64>, MapStats), FilterError> {
    opts.validate()?;
    check_inputs(prev_ens, y, model, q, r)?;
    check_dim(prev_ens.dim(), forecast.nrows())?;
    let images = propagate_images(prev_ens, model);
    let target = LogPosterior::new(model, y, q, r, &images, prev_ens.weights());
    transport(forecast, &target, q, opts, prev_ens.cycle() + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Ar1Config, LinearModel};

    #[test]
    fn kernel_examples() {
        let b = SpdMatrix::identity(1);
        let (k, g) = vmpf_kernel_and_grad(&[0.3], &[0.3], &b);
        assert_eq!((k, g[0]), (1.0, 0.0));
        let (k, g) = vmpf_kernel_and_grad(&[1.0], &[0.0], &b);
        assert!((k - 0.606_530_66).abs() < 1e-8);
        assert!((g[0] + 0.606_530_66).abs() < 1e-8);
        let b3 = SpdMatrix::new(
            &nalgebra::dmatrix![2.0, 0.3, 0.0; 0.3, 1.0, 0.1; 0.0, 0.1, 0.5],
            0.0,
        )
        .unwrap();
        let (kab, _) = vmpf_kernel_and_grad(&[1.0, -0.5, 2.0], &[0.2, 0.4, 1.0], &b3);
        let (kba, _) = vmpf_kernel_and_grad(&[0.2, 0.4, 1.0], &[1.0, -0.5, 2.0], &b3);
        assert!((kab - kba).abs() < 1e-15);
    }

    #[test]
    fn single_component_gradient() {
        let model =
            LinearModel::new(DMatrix::from_element(1, 1, 0.8), DMatrix::identity(1, 1)).unwrap();
        let q = SpdMatrix::scaled_identity(1, 0.5);
        let r = SpdMatrix::scaled_identity(1, 2.0);
        let prev = Ensemble::uniform(DMatrix::from_element(1, 1, 1.5), 0).unwrap();
        let (x, y) = (0.4, 1.1);
        let g = vmpf_log_posterior_gradient(&[x], &prev, &[y], &model, &q, &r).unwrap();
        let expected = (y - x) / 2.0 - (x - 0.8 * 1.5) / 0.5;
        assert!((g[0] - expected).abs() < 1e-12);
        // posterior mode has zero gradient
        let mode = (y / 2.0 + 1.2 / 0.5) / (1.0 / 2.0 + 1.0 / 0.5);
        let g = vmpf_log_posterior_gradient(&[mode], &prev, &[y], &model, &q, &r).unwrap();
        assert!(g[0].abs() < 1e-12);
    }

    #[test]
    fn equilibrium_is_left_unchanged() {
        let model = Ar1Config { nu: 0.8 }.model();
        let q = SpdMatrix::identity(1);
        let prev = Ensemble::uniform(DMatrix::from_element(1, 1, 1.0), 0).unwrap();
        let y = 2.0;
        let mode = (y + 0.8) / 2.0;
        let (out, stats) = vmpf_map(
            DMatrix::from_element(1, 1, mode),
            &prev,
            &[y],
            &model,
            &q,
            &q,
            &VmpfOptions::default(),
        )
        .unwrap();
        assert_eq!(out[(0, 0)], mode);
        assert_eq!(stats.iterations, 1);
    }

    #[test]
    fn non_finite_forecast_is_rejected() {
        let model = Ar1Config { nu: 0.8 }.model();
        let q = SpdMatrix::identity(1);
        let prev = Ensemble::uniform(DMatrix::from_element(1, 2, 1.0), 0).unwrap();
        let f = DMatrix::from_column_slice(1, 2, &[0.0, f64::NAN]);
        let err = vmpf_map(f, &prev, &[0.0], &model, &q, &q, &VmpfOptions::default()).unwrap_err();
        assert_eq!(err, FilterError::NonFiniteState { k: 1 });
    }

    #[test]
    fn options_validation() {
        let bad = VmpfOptions {
            step_size: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(VmpfOptions::default().validate().is_ok());
    }
}
