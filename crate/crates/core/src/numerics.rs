//! Shared numerical primitives: SPD covariance handling, Gaussian sampling and
//! log-densities, matrix distances and reproducible random streams.

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// ln(2π)
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("reference matrix has zero Frobenius norm")]
    ZeroNorm,
    #[error("negative jitter {0}")]
    NegativeJitter(f64),
}

/// Lower Cholesky factor of a symmetric matrix. Returns `None` unless every
/// pivot is strictly positive and finite.
pub fn cholesky(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

/// Symmetric positive-definite matrix with its cached lower Cholesky factor.
///
/// Immutable after construction, so it can be shared freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    values: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl SpdMatrix {
    /// Symmetrizes `m`, adds `jitter * I` and factorizes. Fails if any pivot
    /// is not strictly positive.
    pub fn new(m: &DMatrix<f64>, jitter: f64) -> Result<Self, NumericsError> {
        if !m.is_square() {
            return Err(NumericsError::NotSquare {
                rows: m.nrows(),
                cols: m.ncols(),
            });
        }
        if !(jitter >= 0.0) {
            return Err(NumericsError::NegativeJitter(jitter));
        }
        let mut values = (m + m.transpose()) * 0.5;
        for i in 0..values.nrows() {
            values[(i, i)] += jitter;
        }
        let chol = cholesky(&values).ok_or(NumericsError::NotPositiveDefinite)?;
        Ok(Self { values, chol })
    }

    /// Like [`SpdMatrix::new`] with zero jitter, but retries once with
    /// `1e-10 * max(diag)` before giving up. Used for estimator iterates that
    /// can sit on the boundary of the PD cone with finite ensembles.
    pub fn with_fallback_jitter(m: &DMatrix<f64>) -> Result<Self, NumericsError> {
        match Self::new(m, 0.0) {
            Ok(s) => Ok(s),
            Err(NumericsError::NotPositiveDefinite) => {
                let max_diag = m.diagonal().iter().cloned().fold(0.0_f64, f64::max);
                if !(max_diag > 0.0) || !max_diag.is_finite() {
                    return Err(NumericsError::NotPositiveDefinite);
                }
                Self::new(m, 1e-10 * max_diag)
            }
            Err(e) => Err(e),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    /// `s * I_n`; panics if `s <= 0`.
    pub fn scaled_identity(n: usize, s: f64) -> Self {
        assert!(s > 0.0, "scaled identity requires a positive scale");
        Self::new(&(DMatrix::identity(n, n) * s), 0.0).expect("positive diagonal is PD")
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Lower-triangular factor `L` with `L Lᵀ = values`.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// In-place forward substitution `v ← L⁻¹ v`.
    pub fn whiten_in_place(&self, v: &mut [f64]) {
        let n = self.dim();
        debug_assert_eq!(v.len(), n);
        for i in 0..n {
            let mut s = v[i];
            for k in 0..i {
                s -= self.chol[(i, k)] * v[k];
            }
            v[i] = s / self.chol[(i, i)];
        }
    }

    /// In-place back substitution `v ← L⁻ᵀ v`.
    fn unwhiten_transpose_in_place(&self, v: &mut [f64]) {
        let n = self.dim();
        for i in (0..n).rev() {
            let mut s = v[i];
            for k in (i + 1)..n {
                s -= self.chol[(k, i)] * v[k];
            }
            v[i] = s / self.chol[(i, i)];
        }
    }

    /// In-place `v ← Σ⁻¹ v`.
    pub fn solve_in_place(&self, v: &mut [f64]) {
        self.whiten_in_place(v);
        self.unwhiten_transpose_in_place(v);
    }

    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        self.solve_in_place(out.as_mut_slice());
        out
    }

    /// `vᵀ Σ⁻¹ v`
    pub fn mahalanobis_sq(&self, v: &[f64]) -> f64 {
        let mut w = v.to_vec();
        self.whiten_in_place(&mut w);
        w.iter().map(|x| x * x).sum()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut inv = DMatrix::<f64>::identity(n, n);
        for j in 0..n {
            let mut col: Vec<f64> = inv.column(j).iter().cloned().collect();
            self.solve_in_place(&mut col);
            inv.column_mut(j).copy_from_slice(&col);
        }
        (&inv + inv.transpose()) * 0.5
    }

    /// `c * Σ` for `c > 0`, reusing the factor.
    pub fn scaled(&self, c: f64) -> Self {
        assert!(c > 0.0);
        Self {
            values: &self.values * c,
            chol: &self.chol * c.sqrt(),
        }
    }
}

/// Reproducible random stream keyed by `(seed, stream id)`.
///
/// Children derived with [`RngStream::child`] depend only on the identity of
/// the parent, never on how many draws the parent has made, so each
/// repetition / cycle can own an independent sub-stream. A stream must have a
/// single consumer; parallel callers split first.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Independent sub-stream labelled `tag`.
    pub fn child(&self, tag: u64) -> RngStream {
        let derived = splitmix64(self.seed ^ splitmix64(self.stream.wrapping_add(0xA5A5_5A5A)));
        RngStream::new(derived, tag)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Draws `mean + L z` with `z ~ N(0, I)` into `out`.
pub(crate) fn add_mvn_noise(out: &mut [f64], cov: &SpdMatrix, rng: &mut RngStream) {
    let n = cov.dim();
    let z: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    let l = cov.chol();
    for i in 0..n {
        let mut s = 0.0;
        for k in 0..=i {
            s += l[(i, k)] * z[k];
        }
        out[i] += s;
    }
}

/// `n` draws from `N(mean, cov)`.
pub fn mvn_sample(
    mean: &DVector<f64>,
    cov: &SpdMatrix,
    rng: &mut RngStream,
    n: usize,
) -> Result<Vec<DVector<f64>>, NumericsError> {
    if mean.len() != cov.dim() {
        return Err(NumericsError::DimensionMismatch {
            expected: cov.dim(),
            found: mean.len(),
        });
    }
    Ok((0..n)
        .map(|_| {
            let mut x = mean.clone();
            add_mvn_noise(x.as_mut_slice(), cov, rng);
            x
        })
        .collect())
}

pub(crate) fn gaussian_logpdf_unchecked(x: &[f64], mean: &[f64], cov: &SpdMatrix) -> f64 {
    let mut d: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    cov.whiten_in_place(&mut d);
    let quad: f64 = d.iter().map(|v| v * v).sum();
    -0.5 * (x.len() as f64 * LN_2PI + cov.log_det() + quad)
}

/// Log-density of `N(mean, cov)` at `x`, evaluated through the Cholesky factor.
pub fn gaussian_logpdf(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    cov: &SpdMatrix,
) -> Result<f64, NumericsError> {
    for v in [x, mean] {
        if v.len() != cov.dim() {
            return Err(NumericsError::DimensionMismatch {
                expected: cov.dim(),
                found: v.len(),
            });
        }
    }
    Ok(gaussian_logpdf_unchecked(
        x.as_slice(),
        mean.as_slice(),
        cov,
    ))
}

/// `ln Σ exp(a_i)`; `-∞` for an empty slice or when every term is `-∞`.
pub fn log_sum_exp(a: &[f64]) -> f64 {
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if !m.is_finite() {
        return m;
    }
    m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Turns log-weights into normalized weights in place and returns their
/// log-sum-exp. Returns `None` if the normalizer is not finite.
pub fn normalize_log_weights(logw: &mut [f64]) -> Option<f64> {
    let lse = log_sum_exp(logw);
    if !lse.is_finite() {
        return None;
    }
    for v in logw.iter_mut() {
        *v = (*v - lse).exp();
    }
    Some(lse)
}

fn check_same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(), NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::DimensionMismatch {
            expected: a.nrows() * a.ncols(),
            found: b.nrows() * b.ncols(),
        });
    }
    Ok(())
}

/// `‖a − b‖_F`
pub fn frobenius_norm_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64, NumericsError> {
    check_same_shape(a, b)?;
    Ok((a - b).norm())
}

/// `‖a − b‖_F / ‖a‖_F`, where `a` is the newer iterate.
pub fn frobenius_rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64, NumericsError> {
    check_same_shape(a, b)?;
    let na = a.norm();
    if na == 0.0 {
        return Err(NumericsError::ZeroNorm);
    }
    Ok((a - b).norm() / na)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    #[test]
    fn identity_is_spd() {
        let s = SpdMatrix::new(&DMatrix::identity(3, 3), 0.0).unwrap();
        assert_eq!(s.values(), &DMatrix::<f64>::identity(3, 3));
        assert_eq!(s.chol(), &DMatrix::<f64>::identity(3, 3));
    }

    #[test]
    fn symmetrized_singular_matrix_is_rejected() {
        let m = dmatrix![1.0, 2.0; 0.0, 1.0];
        assert_eq!(
            SpdMatrix::new(&m, 0.0),
            Err(NumericsError::NotPositiveDefinite)
        );
    }

    #[test]
    fn jitter_rescues_rank_deficient_matrix() {
        let m = dmatrix![1.0, 1.0; 1.0, 1.0];
        let s = SpdMatrix::new(&m, 1e-6).unwrap();
        assert_eq!(s.values()[(0, 0)], 1.0 + 1e-6);
        assert_eq!(s.values()[(1, 1)], 1.0 + 1e-6);
        assert!(SpdMatrix::with_fallback_jitter(&m).is_ok());
        assert!(SpdMatrix::with_fallback_jitter(&DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn non_square_and_negative_jitter() {
        assert!(matches!(
            SpdMatrix::new(&DMatrix::zeros(2, 3), 0.0),
            Err(NumericsError::NotSquare { .. })
        ));
        assert!(matches!(
            SpdMatrix::new(&DMatrix::identity(2, 2), -1.0),
            Err(NumericsError::NegativeJitter(_))
        ));
    }

    #[test]
    fn logpdf_values() {
        let one = SpdMatrix::identity(1);
        let z = DVector::from_vec(vec![0.0]);
        let x = DVector::from_vec(vec![1.0]);
        assert!((gaussian_logpdf(&z, &z, &one).unwrap() + 0.918_938_5).abs() < 1e-7);
        assert!((gaussian_logpdf(&x, &z, &one).unwrap() + 1.418_938_5).abs() < 1e-7);
        let two = SpdMatrix::scaled_identity(2, 2.0);
        let m = DVector::from_vec(vec![0.3, -1.2]);
        assert!((gaussian_logpdf(&m, &m, &two).unwrap() + 2.531_024_2).abs() < 1e-7);
        assert!(matches!(
            gaussian_logpdf(&x, &m, &two),
            Err(NumericsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn logpdf_integrates_to_one() {
        let var = 2.3;
        let cov = SpdMatrix::scaled_identity(1, var);
        let mean = 0.7;
        let sd = var.sqrt();
        let (a, b) = (mean - 8.0 * sd, mean + 8.0 * sd);
        let n = 20_000;
        let h = (b - a) / n as f64;
        let mu = DVector::from_vec(vec![mean]);
        let f = |x: f64| {
            gaussian_logpdf(&DVector::from_vec(vec![x]), &mu, &cov)
                .unwrap()
                .exp()
        };
        let mut s = 0.5 * (f(a) + f(b));
        for i in 1..n {
            s += f(a + i as f64 * h);
        }
        assert!((s * h - 1.0).abs() < 1e-6);
    }

    #[test]
    fn frobenius_examples() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let z2 = DMatrix::<f64>::zeros(2, 2);
        assert_eq!(frobenius_rel_diff(&i2, &i2).unwrap(), 0.0);
        assert_eq!(
            frobenius_rel_diff(&dmatrix![2.0], &dmatrix![1.0]).unwrap(),
            0.5
        );
        assert_eq!(frobenius_rel_diff(&i2, &z2).unwrap(), 1.0);
        assert_eq!(frobenius_rel_diff(&z2, &i2), Err(NumericsError::ZeroNorm));
        assert_eq!(frobenius_norm_diff(&i2, &i2).unwrap(), 0.0);
        assert!((frobenius_norm_diff(&i2, &z2).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        let a = DMatrix::<f64>::identity(2, 2) * 0.2;
        let b = DMatrix::<f64>::identity(2, 2) * 0.1;
        assert!((frobenius_norm_diff(&a, &b).unwrap() - 0.141_421_4).abs() < 1e-7);
        assert!(frobenius_norm_diff(&i2, &DMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let cov = SpdMatrix::identity(3);
        let mean = DVector::zeros(3);
        let a = mvn_sample(&mean, &cov, &mut RngStream::new(7, 3), 5).unwrap();
        let b = mvn_sample(&mean, &cov, &mut RngStream::new(7, 3), 5).unwrap();
        let c = mvn_sample(&mean, &cov, &mut RngStream::new(7, 4), 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(mvn_sample(&DVector::zeros(2), &cov, &mut RngStream::new(1, 1), 1).is_err());
    }

    #[test]
    fn children_ignore_parent_consumption() {
        let mut p = RngStream::new(11, 2);
        let c1 = p.child(5);
        p.uniform();
        let c2 = p.child(5);
        let (mut c1, mut c2) = (c1, c2);
        assert_eq!(c1.next_u64(), c2.next_u64());
        assert_ne!(p.child(5).next_u64(), p.child(6).next_u64());
        assert_ne!(
            RngStream::new(11, 3).child(5).next_u64(),
            p.child(5).next_u64()
        );
    }

    #[test]
    fn sample_moments_two_dim() {
        let cov = SpdMatrix::identity(2);
        let xs = mvn_sample(
            &DVector::zeros(2),
            &cov,
            &mut RngStream::new(42, 0),
            100_000,
        )
        .unwrap();
        let n = xs.len() as f64;
        let mean = xs.iter().fold(DVector::zeros(2), |acc, x| acc + x) / n;
        let mut c = DMatrix::<f64>::zeros(2, 2);
        for x in &xs {
            let d = x - &mean;
            c += &d * d.transpose();
        }
        c /= n - 1.0;
        for i in 0..2 {
            assert!(mean[i].abs() < 0.05);
            for j in 0..2 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((c[(i, j)] - target).abs() < 0.05);
            }
        }
    }

    #[test]
    fn sample_variance_one_dim() {
        let cov = SpdMatrix::scaled_identity(1, 2.0);
        let xs = mvn_sample(&DVector::zeros(1), &cov, &mut RngStream::new(9, 1), 100_000).unwrap();
        let n = xs.len() as f64;
        let m = xs.iter().map(|x| x[0]).sum::<f64>() / n;
        let v = xs.iter().map(|x| (x[0] - m).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((v - 2.0).abs() < 0.05);
    }

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            f64::NEG_INFINITY
        );
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        let mut w = vec![-1e4, -1e4 - 2f64.ln()];
        normalize_log_weights(&mut w).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        let mut dead = vec![f64::NEG_INFINITY; 3];
        assert!(normalize_log_weights(&mut dead).is_none());
    }

    fn random_spd(n: usize, entries: &[f64]) -> DMatrix<f64> {
        let a = DMatrix::from_iterator(n, n, entries.iter().cloned().take(n * n));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    proptest! {
        #[test]
        fn cholesky_round_trip(n in 1usize..7, entries in prop::collection::vec(-2.0f64..2.0, 36)) {
            let m = random_spd(n, &entries);
            let s = SpdMatrix::new(&m, 0.0).unwrap();
            let rec = s.chol() * s.chol().transpose();
            prop_assert!(frobenius_rel_diff(s.values(), &rec).unwrap() < 1e-10);
            prop_assert_eq!(frobenius_rel_diff(s.values(), s.values()).unwrap(), 0.0);
            let v: Vec<f64> = entries[..n].to_vec();
            let sol = s.solve(&DVector::from_vec(v.clone()));
            let back = s.values() * sol;
            for i in 0..n {
                prop_assert!((back[i] - v[i]).abs() < 1e-8 * (1.0 + v[i].abs()));
            }
        }
    }
}
