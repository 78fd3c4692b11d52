//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment. Keys are dotted
//! (`model.kind = lorenz96`); unknown or repeated keys are errors. A key
//! prefixed with `desk.` overrides the plain key when the desk preset is
//! selected and is ignored otherwise.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::em::{EmOptions, EnksOptions, QStructure};
use crate::filters::{EnkfOptions, FilterKind, FlowNormalization, KernelBandwidth, VmpfOptions};
use crate::models::Lorenz96Config;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice (first on line {first})")]
    Duplicate {
        line: usize,
        key: String,
        first: usize,
    },
    #[error("line {line}: invalid value `{value}` for `{key}`: {message}")]
    InvalidValue {
        line: usize,
        key: String,
        value: String,
        message: String,
    },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Algorithm {
    EmVmpf,
    EmSir,
    EmKfKs,
    EmEnkfEnks,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::EmVmpf,
        Algorithm::EmSir,
        Algorithm::EmKfKs,
        Algorithm::EmEnkfEnks,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::EmVmpf => "em-vmpf",
            Algorithm::EmSir => "em-sir",
            Algorithm::EmKfKs => "em-kf-ks",
            Algorithm::EmEnkfEnks => "em-enkf-enks",
        }
    }
}

impl FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| "expected one of em-vmpf, em-sir, em-kf-ks, em-enkf-enks".to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Ar1 { nu: f64 },
    Lorenz96(Lorenz96Config),
}

impl ModelSpec {
    pub fn state_dim(&self) -> usize {
        match self {
            ModelSpec::Ar1 { .. } => 1,
            ModelSpec::Lorenz96(c) => c.n_vars,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QTrueSpec {
    /// `σ² I`
    IsotropicDiagonal {
        variance: f64,
    },
    /// Constant diagonal `σ_d²` and first off-diagonals `σ_sd²`.
    IsotropicTridiagonal {
        diag: f64,
        subdiag: f64,
    },
    Explicit(DMatrix<f64>),
}

impl QTrueSpec {
    pub fn matrix(&self, n: usize) -> DMatrix<f64> {
        match self {
            QTrueSpec::IsotropicDiagonal { variance } => DMatrix::identity(n, n) * *variance,
            QTrueSpec::IsotropicTridiagonal { diag, subdiag } => tridiagonal(n, *diag, *subdiag),
            QTrueSpec::Explicit(m) => m.clone(),
        }
    }
}

pub(crate) fn tridiagonal(n: usize, d: f64, sd: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
        0 => d,
        1 => sd,
        _ => 0.0,
    })
}

/// Uniform bounds for the initial guess `Q₀`. The off-diagonal band is only
/// drawn when the true `Q` is tridiagonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Q0Sampler {
    pub diag: (f64, f64),
    pub subdiag: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelSpec,
    /// Lorenz-96 cycles integrated from a perturbed rest state before `x_0`.
    pub spinup_cycles: usize,
    pub q_true: QTrueSpec,
    /// One experiment arm per value; `R = σ_R² I`.
    pub r_variances: Vec<f64>,
    pub cycles: usize,
    pub truth_shared: bool,
    pub q0: Q0Sampler,
    pub particles: usize,
    pub particles_by_algorithm: BTreeMap<Algorithm, usize>,
    pub repetitions: usize,
    pub seed: u64,
    pub algorithms: Vec<Algorithm>,
    /// The filter kind inside is set per algorithm at run time.
    pub em: EmOptions,
    pub enks: EnksOptions,
}

impl ExperimentConfig {
    pub fn particles_for(&self, alg: Algorithm) -> usize {
        self.particles_by_algorithm
            .get(&alg)
            .copied()
            .unwrap_or(self.particles)
    }

    pub fn q_true_matrix(&self) -> DMatrix<f64> {
        self.q_true.matrix(self.model.state_dim())
    }

    /// Checks the invariants that single keys cannot.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let n = self.model.state_dim();
        if let ModelSpec::Lorenz96(c) = &self.model {
            c.validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if let QTrueSpec::Explicit(m) = &self.q_true {
            if m.nrows() != n || m.ncols() != n {
                return bad(format!(
                    "q_true.matrix is {}x{} but the state has {n} variables",
                    m.nrows(),
                    m.ncols()
                ));
            }
        }
        if crate::numerics::SpdMatrix::new(&self.q_true_matrix(), 0.0).is_err() {
            return bad("true Q is not symmetric positive definite".into());
        }
        for (what, (lo, hi)) in [("q0.diag", self.q0.diag), ("q0.subdiag", self.q0.subdiag)] {
            if !(lo < hi) {
                return bad(format!("{what}_low must be below {what}_high"));
            }
        }
        if !(self.q0.diag.0 > 0.0) {
            return bad("q0.diag_low must be positive".into());
        }
        if self.algorithms.is_empty() || self.r_variances.is_empty() {
            return bad("need at least one algorithm and one r.variance".into());
        }
        if self.algorithms.contains(&Algorithm::EmKfKs)
            && !matches!(self.model, ModelSpec::Ar1 { .. })
        {
            return bad("em-kf-ks needs a linear model".into());
        }
        if self.algorithms.contains(&Algorithm::EmEnkfEnks)
            && self.particles_for(Algorithm::EmEnkfEnks) < 2
        {
            return bad("em-enkf-enks needs at least 2 members".into());
        }
        self.em
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.enks
            .enkf
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Parses configuration text, applying `desk.` overrides when `desk` is set.
    pub fn parse(text: &str, desk: bool) -> Result<Self, ConfigError> {
        let entries = tokenize(text)?;
        let mut chosen: BTreeMap<&str, &Entry> = BTreeMap::new();
        for e in &entries {
            let (key, is_desk) = match e.key.strip_prefix("desk.") {
                Some(k) => (k, true),
                None => (e.key.as_str(), false),
            };
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line: e.line,
                    key: e.key.clone(),
                });
            }
            if is_desk && !desk {
                Builder::default().check(key, &e.value).map_err(|message| {
                    ConfigError::InvalidValue {
                        line: e.line,
                        key: e.key.clone(),
                        value: e.value.clone(),
                        message,
                    }
                })?;
                continue;
            }
            if is_desk || !chosen.contains_key(key) {
                chosen.insert(key, e);
            }
        }
        let mut b = Builder::default();
        for (key, e) in chosen {
            b.set(key, &e.value)
                .map_err(|message| ConfigError::InvalidValue {
                    line: e.line,
                    key: e.key.clone(),
                    value: e.value.clone(),
                    message,
                })?;
        }
        let cfg = b.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; parsing it yields the same configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("experiment.name", self.name.clone());
        match &self.model {
            ModelSpec::Ar1 { nu } => {
                put("model.kind", "ar1".into());
                put("model.nu", nu.to_string());
            }
            ModelSpec::Lorenz96(c) => {
                put("model.kind", "lorenz96".into());
                put("model.n_vars", c.n_vars.to_string());
                put("model.forcing", c.forcing.to_string());
                put("model.dt", c.dt.to_string());
                put("model.steps_per_cycle", c.steps_per_cycle.to_string());
                put("model.spinup_cycles", self.spinup_cycles.to_string());
            }
        }
        match &self.q_true {
            QTrueSpec::IsotropicDiagonal { variance } => {
                put("q_true.structure", "isotropic-diagonal".into());
                put("q_true.diag", variance.to_string());
            }
            QTrueSpec::IsotropicTridiagonal { diag, subdiag } => {
                put("q_true.structure", "isotropic-tridiagonal".into());
                put("q_true.diag", diag.to_string());
                put("q_true.subdiag", subdiag.to_string());
            }
            QTrueSpec::Explicit(m) => {
                put("q_true.structure", "explicit".into());
                let rows: Vec<String> = m
                    .row_iter()
                    .map(|r| {
                        r.iter()
                            .map(|v| v.to_string())
                            .collect::<Vec<_>>()
                            .join(" ")
                    })
                    .collect();
                put("q_true.matrix", rows.join("; "));
            }
        }
        put(
            "r.variance",
            join(self.r_variances.iter().map(|v| v.to_string())),
        );
        put("data.cycles", self.cycles.to_string());
        put("truth.shared", self.truth_shared.to_string());
        put("q0.diag_low", self.q0.diag.0.to_string());
        put("q0.diag_high", self.q0.diag.1.to_string());
        put("q0.subdiag_low", self.q0.subdiag.0.to_string());
        put("q0.subdiag_high", self.q0.subdiag.1.to_string());
        put("filter.particles", self.particles.to_string());
        for (alg, n) in &self.particles_by_algorithm {
            put(&format!("filter.particles.{}", alg.name()), n.to_string());
        }
        put("run.repetitions", self.repetitions.to_string());
        put("run.seed", self.seed.to_string());
        put(
            "algorithm",
            join(self.algorithms.iter().map(|a| a.name().to_string())),
        );
        put("em.max_iterations", self.em.max_em_iterations.to_string());
        put("em.tolerance", self.em.em_tolerance.to_string());
        put(
            "em.fp_max_iterations",
            self.em.max_fp_iterations.to_string(),
        );
        put("em.fp_tolerance", self.em.fp_tolerance.to_string());
        put("em.structure", structure_name(self.em.structure).into());
        put("vmpf.step_size", self.em.filter.vmpf.step_size.to_string());
        put(
            "vmpf.min_step_size",
            self.em.filter.vmpf.min_step_size.to_string(),
        );
        put(
            "vmpf.max_iterations",
            self.em.filter.vmpf.max_iterations.to_string(),
        );
        put("vmpf.tolerance", self.em.filter.vmpf.tolerance.to_string());
        put(
            "vmpf.kernel",
            kernel_name(self.em.filter.vmpf.kernel).into(),
        );
        put(
            "vmpf.normalization",
            normalization_name(self.em.filter.vmpf.normalization).into(),
        );
        put("enkf.inflation", self.enks.enkf.inflation.to_string());
        put(
            "enks.lag",
            self.enks.lag.map_or("none".to_string(), |l| l.to_string()),
        );
        out
    }
}

fn join(it: impl Iterator<Item = String>) -> String {
    it.collect::<Vec<_>>().join(", ")
}

const KEYS: &[&str] = &[
    "experiment.name",
    "model.kind",
    "model.nu",
    "model.n_vars",
    "model.forcing",
    "model.dt",
    "model.steps_per_cycle",
    "model.spinup_cycles",
    "q_true.structure",
    "q_true.diag",
    "q_true.subdiag",
    "q_true.matrix",
    "r.variance",
    "data.cycles",
    "truth.shared",
    "q0.diag_low",
    "q0.diag_high",
    "q0.subdiag_low",
    "q0.subdiag_high",
    "filter.particles",
    "filter.particles.em-vmpf",
    "filter.particles.em-sir",
    "filter.particles.em-kf-ks",
    "filter.particles.em-enkf-enks",
    "run.repetitions",
    "run.seed",
    "algorithm",
    "em.max_iterations",
    "em.tolerance",
    "em.fp_max_iterations",
    "em.fp_tolerance",
    "em.structure",
    "vmpf.step_size",
    "vmpf.min_step_size",
    "vmpf.max_iterations",
    "vmpf.tolerance",
    "vmpf.kernel",
    "vmpf.normalization",
    "enkf.inflation",
    "enks.lag",
];

#[derive(Debug)]
struct Entry {
    line: usize,
    key: String,
    value: String,
}

fn tokenize(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut entries: Vec<Entry> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            message: format!("expected `key = value`, found `{content}`"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                message: "empty key or value".into(),
            });
        }
        if let Some(first) = entries.iter().find(|e| e.key == key) {
            return Err(ConfigError::Duplicate {
                line,
                key: key.into(),
                first: first.line,
            });
        }
        entries.push(Entry {
            line,
            key: key.into(),
            value: value.into(),
        });
    }
    Ok(entries)
}

fn num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse::<T>().map_err(|_| "not a valid number".to_string())
}

fn positive(v: &str) -> Result<f64, String> {
    let x: f64 = num(v)?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err("must be positive and finite".into())
    }
}

fn finite(v: &str) -> Result<f64, String> {
    let x: f64 = num(v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err("must be finite".into())
    }
}

fn count(v: &str) -> Result<usize, String> {
    let n: usize = num(v)?;
    if n >= 1 {
        Ok(n)
    } else {
        Err("must be at least 1".into())
    }
}

fn list<T>(v: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    let items: Vec<T> = v
        .split(',')
        .map(|s| f(s.trim()))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err("empty list".into());
    }
    Ok(items)
}

fn matrix(v: &str) -> Result<DMatrix<f64>, String> {
    let rows: Vec<Vec<f64>> = v
        .split(';')
        .map(|r| {
            r.split_whitespace()
                .map(finite)
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err("rows must be separated by `;` and form a square matrix".into());
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

pub fn structure_name(s: QStructure) -> &'static str {
    match s {
        QStructure::Full => "full",
        QStructure::DiagonalIsotropic => "diagonal-isotropic",
        QStructure::TridiagonalIsotropic => "tridiagonal-isotropic",
    }
}

fn kernel_name(k: KernelBandwidth) -> &'static str {
    match k {
        KernelBandwidth::ScaledIdentity => "scaled-identity",
        KernelBandwidth::MedianHeuristic => "median-heuristic",
        KernelBandwidth::ModelError => "model-error",
    }
}

fn normalization_name(n: FlowNormalization) -> &'static str {
    match n {
        FlowNormalization::KernelSum => "kernel-sum",
        FlowNormalization::ParticleCount => "particle-count",
    }
}

#[derive(Default)]
struct Builder {
    values: BTreeMap<&'static str, String>,
}

impl Builder {
    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let key = KEYS
            .iter()
            .find(|k| **k == key)
            .expect("key checked against KEYS");
        // validate eagerly so the error carries the line number
        self.check(key, value)?;
        self.values.insert(key, value.to_string());
        Ok(())
    }

    fn check(&self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "experiment.name" => {
                if v.chars()
                    .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
                {
                    Ok(())
                } else {
                    Err("use letters, digits, `-`, `_` or `.`".into())
                }
            }
            "model.kind" => match v {
                "ar1" | "lorenz96" => Ok(()),
                _ => Err("expected ar1 or lorenz96".into()),
            },
            "model.nu" | "q_true.subdiag" => finite(v).map(drop),
            "model.n_vars"
            | "model.steps_per_cycle"
            | "data.cycles"
            | "filter.particles"
            | "run.repetitions" => count(v).map(drop),
            k if k.starts_with("filter.particles.") => count(v).map(drop),
            "model.spinup_cycles"
            | "em.max_iterations"
            | "em.fp_max_iterations"
            | "vmpf.max_iterations" => num::<usize>(v).map(drop),
            "model.forcing" => finite(v).map(drop),
            "model.dt" | "q_true.diag" | "em.tolerance" | "em.fp_tolerance" | "vmpf.step_size"
            | "vmpf.min_step_size" | "vmpf.tolerance" => positive(v).map(drop),
            "q0.diag_low" | "q0.diag_high" | "q0.subdiag_low" | "q0.subdiag_high" => {
                finite(v).map(drop)
            }
            "q_true.structure" => match v {
                "isotropic-diagonal" | "isotropic-tridiagonal" | "explicit" => Ok(()),
                _ => Err("expected isotropic-diagonal, isotropic-tridiagonal or explicit".into()),
            },
            "q_true.matrix" => matrix(v).map(drop),
            "r.variance" => list(v, positive).map(drop),
            "truth.shared" => v
                .parse::<bool>()
                .map(drop)
                .map_err(|_| "expected true or false".into()),
            "run.seed" => num::<u64>(v).map(drop),
            "algorithm" => list(v, |s| s.parse::<Algorithm>()).map(drop),
            "em.structure" => match v {
                "full" | "diagonal-isotropic" | "tridiagonal-isotropic" => Ok(()),
                _ => Err("expected full, diagonal-isotropic or tridiagonal-isotropic".into()),
            },
            "vmpf.kernel" => match v {
                "scaled-identity" | "median-heuristic" | "model-error" => Ok(()),
                _ => Err("expected scaled-identity, median-heuristic or model-error".into()),
            },
            "vmpf.normalization" => match v {
                "kernel-sum" | "particle-count" => Ok(()),
                _ => Err("expected kernel-sum or particle-count".into()),
            },
            "enkf.inflation" => {
                let x = positive(v)?;
                if x >= 1.0 {
                    Ok(())
                } else {
                    Err("must be at least 1".into())
                }
            }
            "enks.lag" => {
                if v == "none" {
                    Ok(())
                } else {
                    num::<usize>(v).map(drop)
                }
            }
            _ => unreachable!("key list and checks out of sync: {key}"),
        }
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> T {
        self.get(key)
            .map_or(default, |v| v.parse().ok().expect("validated"))
    }

    fn finish(self) -> Result<ExperimentConfig, ConfigError> {
        let kind = self
            .get("model.kind")
            .ok_or_else(|| ConfigError::Missing("model.kind".into()))?;
        let l96_keys = [
            "model.n_vars",
            "model.forcing",
            "model.dt",
            "model.steps_per_cycle",
            "model.spinup_cycles",
        ];
        let model = match kind {
            "ar1" => {
                if let Some(k) = l96_keys.iter().find(|k| self.values.contains_key(**k)) {
                    return Err(ConfigError::Invalid(format!(
                        "`{k}` does not apply to model.kind = ar1"
                    )));
                }
                ModelSpec::Ar1 {
                    nu: self.or("model.nu", 0.8),
                }
            }
            _ => {
                if self.values.contains_key("model.nu") {
                    return Err(ConfigError::Invalid(
                        "`model.nu` does not apply to model.kind = lorenz96".into(),
                    ));
                }
                let d = Lorenz96Config::default();
                ModelSpec::Lorenz96(Lorenz96Config {
                    n_vars: self.or("model.n_vars", d.n_vars),
                    forcing: self.or("model.forcing", d.forcing),
                    dt: self.or("model.dt", d.dt),
                    steps_per_cycle: self.or("model.steps_per_cycle", d.steps_per_cycle),
                })
            }
        };
        let q_true = match self.get("q_true.structure").unwrap_or("isotropic-diagonal") {
            "isotropic-diagonal" => QTrueSpec::IsotropicDiagonal {
                variance: self.required_f64("q_true.diag")?,
            },
            "isotropic-tridiagonal" => QTrueSpec::IsotropicTridiagonal {
                diag: self.required_f64("q_true.diag")?,
                subdiag: self.required_f64("q_true.subdiag")?,
            },
            _ => QTrueSpec::Explicit(
                matrix(
                    self.get("q_true.matrix")
                        .ok_or_else(|| ConfigError::Missing("q_true.matrix".into()))?,
                )
                .expect("validated"),
            ),
        };
        let em_defaults = EmOptions::default();
        let vmpf_defaults = VmpfOptions::default();
        let structure = match self.get("em.structure").unwrap_or("full") {
            "diagonal-isotropic" => QStructure::DiagonalIsotropic,
            "tridiagonal-isotropic" => QStructure::TridiagonalIsotropic,
            _ => QStructure::Full,
        };
        let vmpf = VmpfOptions {
            step_size: self.or("vmpf.step_size", vmpf_defaults.step_size),
            min_step_size: self.or("vmpf.min_step_size", vmpf_defaults.min_step_size),
            max_iterations: self.or("vmpf.max_iterations", vmpf_defaults.max_iterations),
            tolerance: self.or("vmpf.tolerance", vmpf_defaults.tolerance),
            kernel: match self.get("vmpf.kernel") {
                Some("median-heuristic") => KernelBandwidth::MedianHeuristic,
                Some("model-error") => KernelBandwidth::ModelError,
                Some(_) => KernelBandwidth::ScaledIdentity,
                None => vmpf_defaults.kernel,
            },
            normalization: match self.get("vmpf.normalization") {
                Some("particle-count") => FlowNormalization::ParticleCount,
                Some(_) => FlowNormalization::KernelSum,
                None => vmpf_defaults.normalization,
            },
        };
        let mut particles_by_algorithm = BTreeMap::new();
        for alg in Algorithm::ALL {
            if let Some(v) = self.get(&format!("filter.particles.{}", alg.name())) {
                particles_by_algorithm.insert(alg, v.parse().expect("validated"));
            }
        }
        Ok(ExperimentConfig {
            name: self
                .get("experiment.name")
                .unwrap_or("experiment")
                .to_string(),
            model,
            spinup_cycles: self.or("model.spinup_cycles", 500),
            q_true,
            r_variances: list(self.get("r.variance").unwrap_or("1"), positive).expect("validated"),
            cycles: self.or("data.cycles", 100),
            truth_shared: self.or("truth.shared", true),
            q0: Q0Sampler {
                diag: (self.or("q0.diag_low", 0.5), self.or("q0.diag_high", 1.5)),
                subdiag: (
                    self.or("q0.subdiag_low", 0.01),
                    self.or("q0.subdiag_high", 0.15),
                ),
            },
            particles: self.or("filter.particles", 20),
            particles_by_algorithm,
            repetitions: self.or("run.repetitions", 10),
            seed: self.or("run.seed", 0),
            algorithms: list(self.get("algorithm").unwrap_or("em-vmpf"), |s| s.parse())
                .expect("validated"),
            em: EmOptions {
                max_em_iterations: self.or("em.max_iterations", em_defaults.max_em_iterations),
                em_tolerance: self.or("em.tolerance", em_defaults.em_tolerance),
                max_fp_iterations: self.or("em.fp_max_iterations", em_defaults.max_fp_iterations),
                fp_tolerance: self.or("em.fp_tolerance", em_defaults.fp_tolerance),
                filter: crate::filters::ParticleFilterConfig {
                    kind: FilterKind::Vmpf,
                    vmpf,
                },
                structure,
            },
            enks: EnksOptions {
                enkf: EnkfOptions {
                    inflation: self.or("enkf.inflation", 1.0),
                },
                lag: match self.get("enks.lag") {
                    None | Some("none") => None,
                    Some(v) => Some(v.parse().expect("validated")),
                },
            },
        })
    }

    fn required_f64(&self, key: &str) -> Result<f64, ConfigError> {
        self.get(key)
            .map(|v| v.parse().expect("validated"))
            .ok_or_else(|| ConfigError::Missing(key.into()))
    }
}
