//! Dynamical and observation models: linear (AR(1)) and Lorenz-96 systems,
//! RK4 integration and twin-data generation.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::numerics::{add_mvn_noise, RngStream, SpdMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("Lorenz-96 needs at least 4 variables, got {0}")]
    DimensionTooSmall(usize),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("malformed twin data: {0}")]
    Malformed(String),
}

/// State-space model `x_k = M(x_{k-1}) + β_k`, `y_k = H(x_k) + ε_k`.
///
/// Implementations are deterministic; all noise is added by callers.
pub trait StateSpaceModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    /// Advances a state by one assimilation interval.
    fn propagate(&self, x: &[f64]) -> Vec<f64>;
    fn observe(&self, x: &[f64]) -> Vec<f64>;
    /// `J_H(x)ᵀ v` for an observation-space vector `v`.
    fn observe_adjoint(&self, x: &[f64], v: &[f64]) -> Vec<f64>;
}

/// Linear model with transition `A` and observation matrix `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, h: DMatrix<f64>) -> Result<Self, ModelError> {
        if !a.is_square() || h.ncols() != a.nrows() || h.nrows() == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "inconsistent shapes A {:?}, H {:?}",
                a.shape(),
                h.shape()
            )));
        }
        Ok(Self { a, h })
    }
}

impl StateSpaceModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn obs_dim(&self) -> usize {
        self.h.nrows()
    }
    fn propagate(&self, x: &[f64]) -> Vec<f64> {
        (&self.a * DVector::from_column_slice(x)).data.into()
    }
    fn observe(&self, x: &[f64]) -> Vec<f64> {
        (&self.h * DVector::from_column_slice(x)).data.into()
    }
    fn observe_adjoint(&self, _x: &[f64], v: &[f64]) -> Vec<f64> {
        (self.h.transpose() * DVector::from_column_slice(v))
            .data
            .into()
    }
}

/// Scalar autoregressive model `x_k = ν x_{k-1}` observed directly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ar1Config {
    pub nu: f64,
}

impl Ar1Config {
    pub fn model(&self) -> LinearModel {
        LinearModel {
            a: DMatrix::from_element(1, 1, self.nu),
            h: DMatrix::from_element(1, 1, 1.0),
        }
    }
}

pub fn ar1_step(x: f64, nu: f64) -> f64 {
    nu * x
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lorenz96Config {
    pub n_vars: usize,
    pub forcing: f64,
    pub dt: f64,
    pub steps_per_cycle: usize,
}

impl Default for Lorenz96Config {
    fn default() -> Self {
        Self {
            n_vars: 40,
            forcing: 8.0,
            dt: 0.005,
            steps_per_cycle: 10,
        }
    }
}

impl Lorenz96Config {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_vars < 4 {
            return Err(ModelError::DimensionTooSmall(self.n_vars));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(ModelError::InvalidConfig(format!(
                "model step must be positive, got {}",
                self.dt
            )));
        }
        if self.steps_per_cycle == 0 {
            return Err(ModelError::InvalidConfig(
                "steps per cycle must be at least 1".into(),
            ));
        }
        if !self.forcing.is_finite() {
            return Err(ModelError::InvalidConfig("forcing must be finite".into()));
        }
        Ok(())
    }

    /// Assimilation interval `Δt = steps · δt`.
    pub fn cycle_length(&self) -> f64 {
        self.steps_per_cycle as f64 * self.dt
    }
}

/// `dX_n/dt = −X_{n−2}X_{n−1} + X_{n−1}X_{n+1} − X_n + F`, periodic in `n`.
pub fn lorenz96_tendency(x: &[f64], forcing: f64) -> Result<Vec<f64>, ModelError> {
    if x.len() < 4 {
        return Err(ModelError::DimensionTooSmall(x.len()));
    }
    let mut out = vec![0.0; x.len()];
    l96_tendency_into(x, forcing, &mut out);
    Ok(out)
}

fn l96_tendency_into(x: &[f64], forcing: f64, out: &mut [f64]) {
    let n = x.len();
    for i in 0..n {
        let m2 = x[(i + n - 2) % n];
        let m1 = x[(i + n - 1) % n];
        let p1 = x[(i + 1) % n];
        out[i] = (p1 - m2) * m1 - x[i] + forcing;
    }
}

/// One classical fourth-order Runge–Kutta step of `dx/dt = f(x)`.
pub fn rk4_step<F>(f: F, x: &[f64], dt: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = x.len();
    let k1 = f(x);
    let s: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * dt * k1[i]).collect();
    let k2 = f(&s);
    let s: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * dt * k2[i]).collect();
    let k3 = f(&s);
    let s: Vec<f64> = (0..n).map(|i| x[i] + dt * k3[i]).collect();
    let k4 = f(&s);
    (0..n)
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Lorenz-96 with identity observation operator.
#[derive(Debug, Clone, PartialEq)]
pub struct Lorenz96 {
    cfg: Lorenz96Config,
}

impl Lorenz96 {
    pub fn new(cfg: Lorenz96Config) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &Lorenz96Config {
        &self.cfg
    }

    /// Deterministic spin-up from `F·1 + 0.01 e₁` over `cycles` assimilation
    /// intervals, so that the returned state lies on the attractor.
    pub fn spin_up(&self, cycles: usize) -> Vec<f64> {
        let mut x = vec![self.cfg.forcing; self.cfg.n_vars];
        x[0] += 0.01;
        for _ in 0..cycles {
            x = self.propagate(&x);
        }
        x
    }
}

/// Integrates `steps_per_cycle` RK4 steps of size `δt`.
pub fn lorenz96_propagate(x: &[f64], cfg: &Lorenz96Config) -> Vec<f64> {
    let n = x.len();
    let (f, dt) = (cfg.forcing, cfg.dt);
    let mut x = x.to_vec();
    let mut k = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut s = vec![0.0; n];
    for _ in 0..cfg.steps_per_cycle {
        l96_tendency_into(&x, f, &mut k[0]);
        for i in 0..n {
            s[i] = x[i] + 0.5 * dt * k[0][i];
        }
        l96_tendency_into(&s, f, &mut k[1]);
        for i in 0..n {
            s[i] = x[i] + 0.5 * dt * k[1][i];
        }
        l96_tendency_into(&s, f, &mut k[2]);
        for i in 0..n {
            s[i] = x[i] + dt * k[2][i];
        }
        l96_tendency_into(&s, f, &mut k[3]);
        for i in 0..n {
            x[i] += dt / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
        }
    }
    x
}

impl StateSpaceModel for Lorenz96 {
    fn state_dim(&self) -> usize {
        self.cfg.n_vars
    }
    fn obs_dim(&self) -> usize {
        self.cfg.n_vars
    }
    fn propagate(&self, x: &[f64]) -> Vec<f64> {
        lorenz96_propagate(x, &self.cfg)
    }
    fn observe(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
    fn observe_adjoint(&self, _x: &[f64], v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }
}

/// Synthetic truth `x_{0:K}` and observations `y_{1:K}` of a twin experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinData {
    /// `x_0 .. x_K`
    pub states: Vec<DVector<f64>>,
    /// `y_1 .. y_K`
    pub observations: Vec<DVector<f64>>,
}

impl TwinData {
    pub fn cycles(&self) -> usize {
        self.observations.len()
    }

    /// CSV with columns `k, x_1..x_Nx, y_1..y_M`; the `k = 0` row leaves the
    /// observation columns empty. Missing states are written as empty cells.
    pub fn to_csv(&self) -> String {
        let nx = self.states.first().map_or(0, |s| s.len());
        let m = self.observations.first().map_or(0, |y| y.len());
        let mut out = String::from("k");
        for i in 1..=nx {
            let _ = write!(out, ",x_{i}");
        }
        for i in 1..=m {
            let _ = write!(out, ",y_{i}");
        }
        out.push('\n');
        for k in 0..=self.cycles() {
            let _ = write!(out, "{k}");
            for i in 0..nx {
                match self.states.get(k) {
                    Some(x) => {
                        let _ = write!(out, ",{}", x[i]);
                    }
                    None => out.push(','),
                }
            }
            for i in 0..m {
                if k == 0 {
                    out.push(',');
                } else {
                    let _ = write!(out, ",{}", self.observations[k - 1][i]);
                }
            }
            out.push('\n');
        }
        out
    }

    /// Parses the layout written by [`TwinData::to_csv`]. Rows with empty
    /// state cells yield no states beyond the last complete row.
    pub fn from_csv(text: &str) -> Result<Self, ModelError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| ModelError::Malformed("empty file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"k") {
            return Err(ModelError::Malformed("first column must be `k`".into()));
        }
        let nx = cols.iter().filter(|c| c.starts_with("x_")).count();
        let m = cols.iter().filter(|c| c.starts_with("y_")).count();
        if cols.len() != 1 + nx + m {
            return Err(ModelError::Malformed("unexpected columns".into()));
        }
        let mut states = Vec::new();
        let mut observations = Vec::new();
        let mut states_complete = true;
        for (row, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != cols.len() {
                return Err(ModelError::Malformed(format!(
                    "row {} has {} cells",
                    row + 1,
                    cells.len()
                )));
            }
            let k: usize = cells[0]
                .parse()
                .map_err(|_| ModelError::Malformed(format!("bad cycle index `{}`", cells[0])))?;
            if k != row {
                return Err(ModelError::Malformed(format!(
                    "expected k = {row}, found {k}"
                )));
            }
            let parse = |s: &str| -> Result<Option<f64>, ModelError> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>()
                        .map(Some)
                        .map_err(|_| ModelError::Malformed(format!("bad number `{s}` in row {k}")))
                }
            };
            let xs: Vec<Option<f64>> = cells[1..=nx]
                .iter()
                .map(|c| parse(c))
                .collect::<Result<_, _>>()?;
            if nx > 0 && xs.iter().all(Option::is_some) && states_complete {
                states.push(DVector::from_iterator(nx, xs.into_iter().flatten()));
            } else {
                states_complete = false;
            }
            if k > 0 {
                let ys: Vec<Option<f64>> = cells[1 + nx..]
                    .iter()
                    .map(|c| parse(c))
                    .collect::<Result<_, _>>()?;
                if ys.iter().any(Option::is_none) {
                    return Err(ModelError::Malformed(format!(
                        "missing observation in row {k}"
                    )));
                }
                observations.push(DVector::from_iterator(m, ys.into_iter().flatten()));
            }
        }
        Ok(Self {
            states,
            observations,
        })
    }
}

fn check_dim(expected: usize, found: usize) -> Result<(), ModelError> {
    if expected != found {
        return Err(ModelError::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// `x_k = M(x_{k−1}) + β_k`, `β_k ~ N(0, q)`, for `k = 1..K`; returns `x_{0:K}`.
pub fn simulate_truth(
    model: &dyn StateSpaceModel,
    q: &SpdMatrix,
    x0: &[f64],
    cycles: usize,
    rng: &mut RngStream,
) -> Result<Vec<DVector<f64>>, ModelError> {
    check_dim(model.state_dim(), x0.len())?;
    check_dim(model.state_dim(), q.dim())?;
    let mut states = Vec::with_capacity(cycles + 1);
    states.push(DVector::from_column_slice(x0));
    for k in 1..=cycles {
        let mut x = model.propagate(states[k - 1].as_slice());
        add_mvn_noise(&mut x, q, rng);
        states.push(DVector::from_vec(x));
    }
    Ok(states)
}

/// `y_k = H(x_k) + ε_k`, `ε_k ~ N(0, r)`, for every state after the first.
pub fn observe_truth(
    model: &dyn StateSpaceModel,
    states: &[DVector<f64>],
    r: &SpdMatrix,
    rng: &mut RngStream,
) -> Result<Vec<DVector<f64>>, ModelError> {
    check_dim(model.obs_dim(), r.dim())?;
    states
        .iter()
        .skip(1)
        .map(|x| {
            check_dim(model.state_dim(), x.len())?;
            let mut y = model.observe(x.as_slice());
            add_mvn_noise(&mut y, r, rng);
            Ok(DVector::from_vec(y))
        })
        .collect()
}

/// Truth then observations, both drawn from `rng`.
pub fn simulate_truth_and_obs(
    model: &dyn StateSpaceModel,
    q_true: &SpdMatrix,
    r_true: &SpdMatrix,
    x0: &[f64],
    cycles: usize,
    rng: &mut RngStream,
) -> Result<TwinData, ModelError> {
    if cycles == 0 {
        return Err(ModelError::InvalidConfig("need at least one cycle".into()));
    }
    let states = simulate_truth(model, q_true, x0, cycles, rng)?;
    let observations = observe_truth(model, &states, r_true, rng)?;
    Ok(TwinData {
        states,
        observations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn l8() -> Lorenz96Config {
        Lorenz96Config {
            n_vars: 8,
            forcing: 8.0,
            dt: 0.005,
            steps_per_cycle: 10,
        }
    }

    #[test]
    fn ar1_examples() {
        assert_eq!(ar1_step(1.0, 0.8), 0.8);
        assert_eq!(ar1_step(0.0, -3.0), 0.0);
        assert_eq!(ar1_step(2.5, 1.0), 2.5);
        let m = Ar1Config { nu: 0.8 }.model();
        assert_eq!(m.propagate(&[1.0]), vec![0.8]);
    }

    #[test]
    fn tendency_examples() {
        let f = 8.0;
        assert!(lorenz96_tendency(&[f; 6], f)
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
        assert_eq!(lorenz96_tendency(&[0.0; 5], f).unwrap(), vec![f; 5]);
        assert_eq!(
            lorenz96_tendency(&[1.0; 3], f),
            Err(ModelError::DimensionTooSmall(3))
        );
    }

    #[test]
    fn advection_conserves_energy() {
        let mut rng = RngStream::new(3, 0);
        for _ in 0..20 {
            let x: Vec<f64> = (0..11).map(|_| rng.standard_normal() * 3.0).collect();
            let t = lorenz96_tendency(&x, 0.0).unwrap();
            // remove the linear damping to isolate the quadratic terms
            let s: f64 = x.iter().zip(&t).map(|(xi, ti)| xi * (ti + xi)).sum();
            assert!(s.abs() < 1e-10);
        }
    }

    #[test]
    fn rk4_examples() {
        assert_eq!(
            rk4_step(|x| vec![0.0; x.len()], &[1.0, 2.0], 0.1),
            vec![1.0, 2.0]
        );
        let (a, dt, x) = (-1.3, 0.2, 0.7);
        let h: f64 = a * dt;
        let expected = x * (1.0 + h + h * h / 2.0 + h.powi(3) / 6.0 + h.powi(4) / 24.0);
        let got = rk4_step(|v| vec![a * v[0]], &[x], dt)[0];
        assert!((got - expected).abs() < 1e-15);
        let fp = vec![8.0; 8];
        assert_eq!(
            rk4_step(|v| lorenz96_tendency(v, 8.0).unwrap(), &fp, 0.005),
            fp
        );
    }

    #[test]
    fn rk4_is_fourth_order() {
        let integrate = |n: usize| {
            let dt = 1.0 / n as f64;
            let mut x = vec![1.0];
            for _ in 0..n {
                x = rk4_step(|v| vec![-v[0]], &x, dt);
            }
            (x[0] - (-1.0f64).exp()).abs()
        };
        let ratio = integrate(10) / integrate(20);
        assert!((ratio - 16.0).abs() < 1.0, "ratio {ratio}");
    }

    #[test]
    fn config_validation() {
        let mut c = l8();
        c.steps_per_cycle = 0;
        assert!(Lorenz96::new(c).is_err());
        c = l8();
        c.n_vars = 3;
        assert_eq!(Lorenz96::new(c), Err(ModelError::DimensionTooSmall(3)));
        assert!((l8().cycle_length() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn fixed_point_is_preserved() {
        let cfg = l8();
        let mut x = vec![8.0; 8];
        for _ in 0..50 {
            let next = lorenz96_propagate(&x, &cfg);
            for (a, b) in next.iter().zip(&x) {
                assert!((a - b).abs() <= 1e-12);
            }
            x = next;
        }
    }

    #[test]
    fn perturbation_grows() {
        let cfg = l8();
        let fp = vec![8.0; 8];
        let mut x = fp.clone();
        x[0] += 0.01;
        let d0 = 0.01;
        for _ in 0..10 {
            x = lorenz96_propagate(&x, &cfg);
        }
        let d: f64 = x
            .iter()
            .zip(&fp)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(d > d0, "distance {d}");
    }

    #[test]
    fn spin_up_leaves_fixed_point() {
        let m = Lorenz96::new(l8()).unwrap();
        let x = m.spin_up(500);
        assert!(x.iter().all(|v| v.is_finite()));
        assert!(x.iter().any(|v| (v - 8.0).abs() > 0.5));
    }

    #[test]
    fn noiseless_limit_tracks_model() {
        let m = Lorenz96::new(l8()).unwrap();
        let tiny = SpdMatrix::scaled_identity(8, 1e-14);
        let x0 = m.spin_up(50);
        let data =
            simulate_truth_and_obs(&m, &tiny, &tiny, &x0, 20, &mut RngStream::new(1, 1)).unwrap();
        let mut x = x0.clone();
        for k in 1..=20 {
            x = m.propagate(&x);
            for i in 0..8 {
                assert!((data.observations[k - 1][i] - x[i]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn simulation_is_reproducible_and_checks_dims() {
        let m = Ar1Config { nu: 0.8 }.model();
        let q = SpdMatrix::identity(1);
        let a = simulate_truth_and_obs(&m, &q, &q, &[0.0], 30, &mut RngStream::new(5, 0)).unwrap();
        let b = simulate_truth_and_obs(&m, &q, &q, &[0.0], 30, &mut RngStream::new(5, 0)).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(simulate_truth_and_obs(
            &m,
            &SpdMatrix::identity(2),
            &q,
            &[0.0],
            3,
            &mut RngStream::new(5, 0)
        )
        .is_err());
        assert!(simulate_truth_and_obs(&m, &q, &q, &[0.0], 0, &mut RngStream::new(5, 0)).is_err());
    }

    #[test]
    fn ar1_stationary_variance() {
        let m = Ar1Config { nu: 0.8 }.model();
        let q = SpdMatrix::identity(1);
        let data =
            simulate_truth_and_obs(&m, &q, &q, &[0.0], 10_000, &mut RngStream::new(77, 0)).unwrap();
        let xs: Vec<f64> = data.states.iter().skip(100).map(|x| x[0]).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // AR(1) sample variance has sd ≈ 0.11 at this length
        assert!((var - 1.0 / 0.36).abs() < 0.35, "variance {var}");
    }

    #[test]
    fn csv_round_trip() {
        let m = Lorenz96::new(l8()).unwrap();
        let q = SpdMatrix::scaled_identity(8, 0.2);
        let r = SpdMatrix::scaled_identity(8, 0.5);
        let data = simulate_truth_and_obs(&m, &q, &r, &m.spin_up(10), 7, &mut RngStream::new(2, 2))
            .unwrap();
        let text = data.to_csv();
        assert!(text.starts_with("k,x_1,"));
        assert_eq!(TwinData::from_csv(&text).unwrap(), data);
        assert!(TwinData::from_csv("k,x_1,y_1\n0,1,\n2,1,1\n").is_err());
    }

    proptest! {
        #[test]
        fn tendency_is_shift_equivariant(x in prop::collection::vec(-10.0f64..10.0, 4..20), f in -5.0f64..10.0) {
            let n = x.len();
            let mut shifted = x.clone();
            shifted.rotate_right(1);
            let mut t = lorenz96_tendency(&x, f).unwrap();
            t.rotate_right(1);
            let ts = lorenz96_tendency(&shifted, f).unwrap();
            for i in 0..n {
                prop_assert!((t[i] - ts[i]).abs() <= 1e-12 * (1.0 + t[i].abs()));
            }
        }
    }
}
