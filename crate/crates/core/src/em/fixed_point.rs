//! Particle approximation of the intermediate function and the fixed-point
//! map for `Q`.

use nalgebra::DMatrix;

use super::EmError;
use crate::filters::FilterRun;
use crate::numerics::{log_sum_exp, SpdMatrix, LN_2PI};

/// Optional constraint applied to every `Q` update by averaging along bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QStructure {
    Full,
    /// `σ² I` with `σ²` the mean of the diagonal.
    DiagonalIsotropic,
    /// Constant diagonal and constant first sub/super-diagonal, zero elsewhere.
    TridiagonalIsotropic,
}

impl QStructure {
    pub fn project(&self, q: &DMatrix<f64>) -> DMatrix<f64> {
        let n = q.nrows();
        match self {
            QStructure::Full => q.clone(),
            QStructure::DiagonalIsotropic => DMatrix::identity(n, n) * (q.trace() / n as f64),
            QStructure::TridiagonalIsotropic => {
                let d = q.trace() / n as f64;
                let sd = if n > 1 {
                    (0..n - 1)
                        .map(|i| q[(i + 1, i)] + q[(i, i + 1)])
                        .sum::<f64>()
                        / (2 * (n - 1)) as f64
                } else {
                    0.0
                };
                DMatrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
                    0 => d,
                    1 => sd,
                    _ => 0.0,
                })
            }
        }
    }
}

fn check_aligned(estep: &FilterRun, mstep: &FilterRun, q: &SpdMatrix) -> Result<(), EmError> {
    if estep.cycles() != mstep.cycles() || estep.ensembles.len() != estep.cycles() + 1 {
        return Err(EmError::Misaligned(format!(
            "E-step run covers {} cycles, M-step run {}",
            estep.cycles(),
            mstep.cycles()
        )));
    }
    if estep.cycles() == 0 {
        return Err(EmError::Misaligned("runs cover no cycles".into()));
    }
    for k in 1..=estep.cycles() {
        let (a, b) = (estep.ensembles[k].dim(), mstep.images[k - 1].nrows());
        if a != q.dim() || b != q.dim() {
            return Err(EmError::DimensionMismatch {
                expected: q.dim(),
                found: if a != q.dim() { a } else { b },
            });
        }
        if mstep.images[k - 1].ncols() != mstep.image_weights[k - 1].len() {
            return Err(EmError::Misaligned(format!(
                "image weights at cycle {k} do not match images"
            )));
        }
    }
    Ok(())
}

fn whiten_columns(m: &DMatrix<f64>, q: &SpdMatrix) -> DMatrix<f64> {
    let mut z = m.clone();
    for mut col in z.column_iter_mut() {
        q.whiten_in_place(col.as_mut_slice());
    }
    z
}

/// Log-weights `ln w_i − ½ ‖x_j − M(x_i)‖²_Q` for one target particle.
fn mixture_log_terms(zj: &[f64], centres: &DMatrix<f64>, log_w: &[f64], out: &mut Vec<f64>) {
    let nx = zj.len();
    let c = centres.as_slice();
    out.clear();
    for (i, lw) in log_w.iter().enumerate() {
        let d2: f64 = zj
            .iter()
            .zip(&c[i * nx..(i + 1) * nx])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        out.push(lw - 0.5 * d2);
    }
}

/// `Σ_k Σ_j w_k^{(j)} log Σ_i w_{k−1}^{(i)} φ(x_k^{(j)}; M(x_{k−1}^{(i)}), Q)`, with
/// the `j`-side from `estep` and the `i`-side from `mstep`.
pub fn intermediate_g(estep: &FilterRun, mstep: &FilterRun, q: &SpdMatrix) -> Result<f64, EmError> {
    check_aligned(estep, mstep, q)?;
    let norm = -0.5 * (q.dim() as f64 * LN_2PI + q.log_det());
    let mut total = 0.0;
    let mut terms = Vec::new();
    for k in 1..=estep.cycles() {
        let ens = &estep.ensembles[k];
        let z = whiten_columns(ens.particles(), q);
        let centres = whiten_columns(&mstep.images[k - 1], q);
        let log_w: Vec<f64> = mstep.image_weights[k - 1].iter().map(|w| w.ln()).collect();
        let nx = ens.dim();
        for (j, wj) in ens.weights().iter().enumerate() {
            if *wj == 0.0 {
                continue;
            }
            mixture_log_terms(
                &z.as_slice()[j * nx..(j + 1) * nx],
                &centres,
                &log_w,
                &mut terms,
            );
            let lse = log_sum_exp(&terms);
            if !lse.is_finite() {
                return Err(EmError::NonFinite { k, j });
            }
            total += wj * (lse + norm);
        }
    }
    Ok(total)
}

/// Residual columns buffered before each rank-update of the accumulator.
const BLOCK: usize = 1024;

/// Unprojected right-hand side of the fixed-point equation:
/// `(1/K) Σ_k Σ_j w_k^{(j)} Σ_i ρ_k^{(i|j)} β βᵀ`, `β = x_k^{(j)} − M(x_{k−1}^{(i)})`,
/// where the responsibilities `ρ ∝ w_{k−1}^{(i)} exp(−½ βᵀ Q⁻¹ β)` sum to one
/// over `i` for every `(k, j)`.
pub fn fixed_point_matrix(
    estep: &FilterRun,
    mstep: &FilterRun,
    q_current: &SpdMatrix,
) -> Result<DMatrix<f64>, EmError> {
    check_aligned(estep, mstep, q_current)?;
    let nx = q_current.dim();
    let kk = estep.cycles();
    let mut acc = DMatrix::<f64>::zeros(nx, nx);
    let mut terms = Vec::new();
    let mut scaled = DMatrix::<f64>::zeros(nx, BLOCK);
    let mut used = 0;
    for k in 1..=kk {
        let ens = &estep.ensembles[k];
        let images = &mstep.images[k - 1];
        let z = whiten_columns(ens.particles(), q_current);
        let centres = whiten_columns(images, q_current);
        let log_w: Vec<f64> = mstep.image_weights[k - 1].iter().map(|w| w.ln()).collect();
        let xs = ens.particles().as_slice();
        let img = images.as_slice();
        for (j, wj) in ens.weights().iter().enumerate() {
            if *wj == 0.0 {
                continue;
            }
            mixture_log_terms(
                &z.as_slice()[j * nx..(j + 1) * nx],
                &centres,
                &log_w,
                &mut terms,
            );
            let lse = log_sum_exp(&terms);
            if !lse.is_finite() {
                return Err(EmError::NonFinite { k, j });
            }
            let xj = &xs[j * nx..(j + 1) * nx];
            for (i, t) in terms.iter().enumerate() {
                let weight = wj * (t - lse).exp();
                if weight == 0.0 {
                    continue;
                }
                // columns √(w_j ρ_ij) β_ij, whose outer-product sum is R Rᵀ
                let s = weight.sqrt();
                let mut col = scaled.column_mut(used);
                for d in 0..nx {
                    col[d] = s * (xj[d] - img[i * nx + d]);
                }
                used += 1;
                if used == BLOCK {
                    acc += &scaled * scaled.transpose();
                    used = 0;
                }
            }
        }
    }
    let r = scaled.columns(0, used);
    acc += &r * r.transpose();
    acc /= kk as f64;
    Ok((&acc + acc.transpose()) * 0.5)
}

/// Fixed-point update of `Q`, validated as SPD with the fallback jitter.
pub fn fixed_point_update(
    estep: &FilterRun,
    mstep: &FilterRun,
    q_current: &SpdMatrix,
) -> Result<SpdMatrix, EmError> {
    let m = fixed_point_matrix(estep, mstep, q_current)?;
    SpdMatrix::with_fallback_jitter(&m).map_err(|_| EmError::DegenerateResiduals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::{CycleDiagnostics, Ensemble};
    use crate::numerics::{gaussian_logpdf, RngStream};
    use nalgebra::DVector;

    /// A run whose `k`-th ensemble is `xs[k]` and whose images are `imgs[k−1]`.
    pub(crate) fn synthetic_run(xs: Vec<DMatrix<f64>>, imgs: Vec<DMatrix<f64>>) -> FilterRun {
        let kk = imgs.len();
        FilterRun {
            ensembles: xs
                .into_iter()
                .enumerate()
                .map(|(k, x)| Ensemble::uniform(x, k).unwrap())
                .collect(),
            image_weights: imgs
                .iter()
                .map(|m| vec![1.0 / m.ncols() as f64; m.ncols()])
                .collect(),
            images: imgs,
            log_evidence: vec![0.0; kk],
            diagnostics: (1..=kk)
                .map(|k| CycleDiagnostics {
                    k,
                    ess: 1.0,
                    mean_update_norm: 0.0,
                    map_iterations: 0,
                })
                .collect(),
        }
    }

    fn single_particle_run(nx: usize, kk: usize, rng: &mut RngStream) -> (FilterRun, DMatrix<f64>) {
        let xs: Vec<DMatrix<f64>> = (0..=kk)
            .map(|_| DMatrix::from_fn(nx, 1, |_, _| rng.standard_normal()))
            .collect();
        let imgs: Vec<DMatrix<f64>> = (0..kk)
            .map(|_| DMatrix::from_fn(nx, 1, |_, _| rng.standard_normal()))
            .collect();
        let mut brute = DMatrix::<f64>::zeros(nx, nx);
        for k in 1..=kk {
            let b = &xs[k] - &imgs[k - 1];
            brute += &b * b.transpose();
        }
        (synthetic_run(xs, imgs), brute / kk as f64)
    }

    #[test]
    fn single_particle_gives_residual_covariance() {
        let mut rng = RngStream::new(3, 0);
        for &nx in &[1usize, 4] {
            for &kk in &[1usize, 50] {
                let (run, brute) = single_particle_run(nx, kk, &mut rng);
                let q = SpdMatrix::scaled_identity(nx, 0.3 + rng.uniform());
                let m = fixed_point_matrix(&run, &run, &q).unwrap();
                assert!((&m - &brute).abs().max() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_residual() {
        let run = synthetic_run(
            vec![
                DMatrix::from_element(1, 1, 0.0),
                DMatrix::from_element(1, 1, 1.0),
            ],
            vec![DMatrix::from_element(1, 1, 0.0)],
        );
        let q = fixed_point_update(&run, &run, &SpdMatrix::scaled_identity(1, 7.0)).unwrap();
        assert!((q.values()[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_residuals_give_outer_product() {
        let c = DVector::from_vec(vec![0.5, -1.0]);
        let imgs: Vec<DMatrix<f64>> = (0..3)
            .map(|k| DMatrix::from_fn(2, 4, |d, i| (k + i) as f64 + d as f64))
            .collect();
        let mut xs = vec![DMatrix::zeros(2, 4)];
        for img in &imgs {
            // every target particle sits at c from every centre only if centres coincide
            let centre = img.column(0) + &c;
            xs.push(DMatrix::from_fn(2, 4, |d, _| centre[d]));
        }
        let imgs: Vec<DMatrix<f64>> = imgs
            .iter()
            .map(|m| DMatrix::from_fn(2, 4, |d, _| m[(d, 0)]))
            .collect();
        let run = synthetic_run(xs, imgs);
        let m = fixed_point_matrix(&run, &run, &SpdMatrix::identity(2)).unwrap();
        assert!((&m - &c * c.transpose()).abs().max() < 1e-12);
        // rank one, so validation goes through the jitter path
        assert!(fixed_point_update(&run, &run, &SpdMatrix::identity(2)).is_ok());
    }

    #[test]
    fn g_collapses_for_single_particle() {
        let mut rng = RngStream::new(4, 0);
        let (run, _) = single_particle_run(3, 5, &mut rng);
        let q = SpdMatrix::scaled_identity(3, 0.7);
        let g = intermediate_g(&run, &run, &q).unwrap();
        let direct: f64 = (1..=5)
            .map(|k| {
                let x = DVector::from_column_slice(run.ensembles[k].particle(0));
                let m = DVector::from_column_slice(run.images[k - 1].as_slice());
                gaussian_logpdf(&x, &m, &q).unwrap()
            })
            .sum();
        assert!((g - direct).abs() < 1e-12);
        let zero = synthetic_run(
            vec![DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)],
            vec![DMatrix::zeros(1, 1)],
        );
        let g0 = intermediate_g(&zero, &zero, &SpdMatrix::identity(1)).unwrap();
        assert!((g0 + 0.5 * LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn g_is_maximized_at_fixed_point_for_single_particle() {
        let mut rng = RngStream::new(5, 0);
        let (run, brute) = single_particle_run(1, 40, &mut rng);
        let q_star = brute[(0, 0)];
        let best = (1..2000)
            .map(|i| i as f64 * 0.005)
            .max_by(|a, b| {
                let ga = intermediate_g(&run, &run, &SpdMatrix::scaled_identity(1, *a)).unwrap();
                let gb = intermediate_g(&run, &run, &SpdMatrix::scaled_identity(1, *b)).unwrap();
                ga.total_cmp(&gb)
            })
            .unwrap();
        assert!((best - q_star).abs() <= 0.005, "{best} vs {q_star}");
    }

    #[test]
    fn far_targets_are_reported() {
        let run = synthetic_run(
            vec![DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 1e200)],
            vec![DMatrix::zeros(1, 1)],
        );
        let err = fixed_point_matrix(&run, &run, &SpdMatrix::identity(1)).unwrap_err();
        assert_eq!(err, EmError::NonFinite { k: 1, j: 0 });
    }

    #[test]
    fn projections() {
        let q = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.5, 0.4, 2.0, 0.6, 0.5, 0.8, 3.0]);
        let d = QStructure::DiagonalIsotropic.project(&q);
        assert_eq!(d, DMatrix::identity(3, 3) * 2.0);
        let t = QStructure::TridiagonalIsotropic.project(&q);
        assert!((t[(0, 1)] - 0.5).abs() < 1e-15 && (t[(2, 1)] - 0.5).abs() < 1e-15);
        assert_eq!(t[(0, 2)], 0.0);
        assert_eq!(QStructure::Full.project(&q), q);
    }
}
