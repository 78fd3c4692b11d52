use nalgebra::{DMatrix, DVector};

use super::FilterError;

/// Neumaier summation, so that long uniform weight vectors still sum to one
/// within rounding.
pub(crate) fn compensated_sum(v: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &x in v {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Weighted particle set at one assimilation cycle. Particles are the
/// columns of an `N_x × N_p` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    particles: DMatrix<f64>,
    weights: Vec<f64>,
    cycle: usize,
}

impl Ensemble {
    pub fn new(
        particles: DMatrix<f64>,
        weights: Vec<f64>,
        cycle: usize,
    ) -> Result<Self, FilterError> {
        if particles.ncols() == 0 {
            return Err(FilterError::InvalidEnsemble("no particles".into()));
        }
        if weights.len() != particles.ncols() {
            return Err(FilterError::InvalidEnsemble(format!(
                "{} weights for {} particles",
                weights.len(),
                particles.ncols()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(FilterError::InvalidEnsemble(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total = compensated_sum(&weights);
        if (total - 1.0).abs() > 1e-12 {
            return Err(FilterError::InvalidEnsemble(format!(
                "weights sum to {total}"
            )));
        }
        Ok(Self {
            particles,
            weights,
            cycle,
        })
    }

    pub fn uniform(particles: DMatrix<f64>, cycle: usize) -> Result<Self, FilterError> {
        let n = particles.ncols();
        Self::new(particles, vec![1.0 / n as f64; n], cycle)
    }

    /// Builds an ensemble from unnormalized weights, renormalizing them.
    pub(crate) fn from_normalized(
        particles: DMatrix<f64>,
        mut weights: Vec<f64>,
        cycle: usize,
    ) -> Self {
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
        Self {
            particles,
            weights,
            cycle,
        }
    }

    pub fn from_vectors(members: &[DVector<f64>], cycle: usize) -> Result<Self, FilterError> {
        if members.is_empty() {
            return Err(FilterError::InvalidEnsemble("no particles".into()));
        }
        Self::uniform(DMatrix::from_columns(members), cycle)
    }

    pub fn particles(&self) -> &DMatrix<f64> {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn cycle(&self) -> usize {
        self.cycle
    }

    pub fn len(&self) -> usize {
        self.particles.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.particles.nrows()
    }

    pub fn particle(&self, j: usize) -> &[f64] {
        let n = self.dim();
        &self.particles.as_slice()[j * n..(j + 1) * n]
    }

    pub fn mean(&self) -> DVector<f64> {
        &self.particles * DVector::from_column_slice(&self.weights)
    }

    /// Weighted covariance with the `1 / (1 − Σw²)` small-sample correction;
    /// reduces to the usual `1 / (N − 1)` estimator for uniform weights.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let n = self.dim();
        let mut c = DMatrix::<f64>::zeros(n, n);
        for (j, w) in self.weights.iter().enumerate() {
            let d = self.particles.column(j) - &mean;
            c += *w * &d * d.transpose();
        }
        let denom = 1.0 - self.weights.iter().map(|w| w * w).sum::<f64>();
        if denom > 0.0 {
            c / denom
        } else {
            c
        }
    }

    /// Effective sample size `1 / Σ w²`.
    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}
