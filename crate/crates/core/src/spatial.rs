//! Shared structured spatial covariance over lattice features, map sampling
//! through its matrix square root, and the spatial KL divergence.
//!
//! The covariance is `amplitude * K_rows(beta) (x) K_cols(beta) + jitter * I`
//! with a squared-exponential kernel on integer lattice coordinates. The
//! Kronecker eigenstructure makes every operation cost O(F * (H + W)) instead
//! of O(F^2), which is what keeps 9000-pixel grids tractable.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::{GridGeometry, SpatialPosterior};

/// Eigenvalues below `max * EIG_CLAMP_REL` are treated as numerically zero.
const EIG_CLAMP_REL: f64 = 1e-14;

/// Precomputed factorization of the shared covariance for one
/// (grid, amplitude, lengthscale, jitter) tuple.
#[derive(Debug, Clone)]
pub struct KernelFactor {
    pub grid: GridGeometry,
    pub amplitude: f64,
    pub lengthscale: f64,
    pub jitter: f64,
    /// Symmetric square root of the row kernel, H x H.
    pub row_factor: Array2<f64>,
    /// Symmetric square root of the column kernel, W x W.
    pub col_factor: Array2<f64>,
    /// log det of the full covariance (jitter included).
    pub logdet: f64,
    /// trace of the full covariance (jitter included).
    pub trace: f64,
    // Eigendecompositions of the two 1-D kernels; eigenvalues are sorted
    // descending and clamped at zero.
    pub(crate) row_vecs: Array2<f64>,
    pub(crate) row_vals: Array1<f64>,
    pub(crate) col_vecs: Array2<f64>,
    pub(crate) col_vals: Array1<f64>,
}

/// Squared-exponential kernel on the 1-D integer lattice `0..n`:
/// `k(i, i') = exp(-(i - i')^2 / (2 beta^2))`.
fn se_kernel_1d(n: usize, lengthscale: f64) -> Array2<f64> {
    let inv = 1.0 / (2.0 * lengthscale * lengthscale);
    Array2::from_shape_fn((n, n), |(i, j)| {
        let d = i as f64 - j as f64;
        (-d * d * inv).exp()
    })
}

/// Symmetric eigendecomposition with eigenpairs sorted by descending
/// eigenvalue and tiny values clamped to zero.
fn eigh_sorted(k: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let n = k.nrows();
    let m = DMatrix::from_fn(n, n, |i, j| k[[i, j]]);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let max = eig.eigenvalues[order[0]].max(0.0);
    let vals = Array1::from_shape_fn(n, |i| {
        let v = eig.eigenvalues[order[i]];
        if v < max * EIG_CLAMP_REL {
            0.0
        } else {
            v
        }
    });
    let vecs = Array2::from_shape_fn((n, n), |(i, j)| eig.eigenvectors[(i, order[j])]);
    (vecs, vals)
}

/// Builds the covariance factorization. Errors when some effective
/// eigenvalue `amplitude * lr * lc + jitter` is not strictly positive, which
/// signals a lengthscale too large for the grid resolution (raise the jitter
/// or shrink the lengthscale).
pub fn build_kernel(
    grid: GridGeometry,
    amplitude: f64,
    lengthscale: f64,
    jitter: f64,
) -> Result<KernelFactor> {
    if !(amplitude > 0.0) || !(lengthscale > 0.0) {
        return Err(Error::InvalidParameter(
            "kernel amplitude and lengthscale must be > 0".into(),
        ));
    }
    if jitter < 0.0 {
        return Err(Error::InvalidParameter("jitter must be >= 0".into()));
    }
    let (h, w) = grid.dims();
    let (row_vecs, row_vals) = eigh_sorted(&se_kernel_1d(h, lengthscale));
    let (col_vecs, col_vals) = eigh_sorted(&se_kernel_1d(w, lengthscale));

    let mut logdet = 0.0;
    let mut trace = 0.0;
    for &lr in row_vals.iter() {
        for &lc in col_vals.iter() {
            let e = amplitude * lr * lc + jitter;
            if e <= 0.0 {
                return Err(Error::KernelNotPositiveDefinite(format!(
                    "lengthscale {lengthscale} too large for {h}x{w} grid at jitter {jitter}"
                )));
            }
            logdet += e.ln();
            trace += e;
        }
    }

    let sqrt_factor = |vecs: &Array2<f64>, vals: &Array1<f64>| {
        let n = vals.len();
        let mut out = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += vecs[[i, k]] * vals[k].sqrt() * vecs[[j, k]];
                }
                out[[i, j]] = acc;
            }
        }
        out
    };

    Ok(KernelFactor {
        grid,
        amplitude,
        lengthscale,
        jitter,
        row_factor: sqrt_factor(&row_vecs, &row_vals),
        col_factor: sqrt_factor(&col_vecs, &col_vals),
        logdet,
        trace,
        row_vecs,
        row_vals,
        col_vecs,
        col_vals,
    })
}

impl KernelFactor {
    /// Effective eigenvalue of the full covariance for row mode `i`, column
    /// mode `j`.
    pub(crate) fn eigenvalue(&self, i: usize, j: usize) -> f64 {
        self.amplitude * self.row_vals[i] * self.col_vals[j] + self.jitter
    }

    /// Rotates a flattened (row-major) feature vector into the Kronecker
    /// eigenbasis: returns `U_r^T M U_c` with M the H x W reshape of `x`.
    pub(crate) fn to_eigenbasis(&self, x: &[f64]) -> Array2<f64> {
        let (h, w) = self.grid.dims();
        let m = Array2::from_shape_fn((h, w), |(i, j)| x[i * w + j]);
        self.row_vecs.t().dot(&m).dot(&self.col_vecs)
    }

    /// Inverse of [`to_eigenbasis`], flattened row-major.
    pub(crate) fn from_eigenbasis(&self, m: &Array2<f64>) -> Array1<f64> {
        let out = self.row_vecs.dot(m).dot(&self.col_vecs.t());
        let (h, w) = self.grid.dims();
        Array1::from_shape_fn(h * w, |f| out[[f / w, f % w]])
    }

    /// Applies the symmetric square root of the full covariance to a
    /// flattened feature vector.
    pub fn apply_sqrt(&self, x: &[f64]) -> Array1<f64> {
        let mut tilde = self.to_eigenbasis(x);
        for i in 0..tilde.nrows() {
            for j in 0..tilde.ncols() {
                tilde[[i, j]] *= self.eigenvalue(i, j).sqrt();
            }
        }
        self.from_eigenbasis(&tilde)
    }

    /// Dense covariance matrix; intended for small grids and tests.
    pub fn dense_covariance(&self) -> Array2<f64> {
        let (h, w) = self.grid.dims();
        let kr = se_kernel_1d(h, self.lengthscale);
        let kc = se_kernel_1d(w, self.lengthscale);
        let f = h * w;
        Array2::from_shape_fn((f, f), |(a, b)| {
            let (i1, j1) = (a / w, a % w);
            let (i2, j2) = (b / w, b % w);
            let mut v = self.amplitude * kr[[i1, i2]] * kc[[j1, j2]];
            if a == b {
                v += self.jitter;
            }
            v
        })
    }
}

/// Spatial maps from the reparameterization `mean + sqrt(cov) * noise`,
/// applied source by source through the Kronecker factors.
pub fn sample_maps(
    sp: &SpatialPosterior,
    kf: &KernelFactor,
    noise: &Array2<f64>,
) -> Result<Array2<f64>> {
    if noise.dim() != sp.mean_maps.dim() {
        return Err(Error::DimensionMismatch(format!(
            "map noise {:?} vs posterior {:?}",
            noise.dim(),
            sp.mean_maps.dim()
        )));
    }
    if kf.grid.len() != sp.mean_maps.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "kernel grid {} vs {} features",
            kf.grid.len(),
            sp.mean_maps.ncols()
        )));
    }
    let mut maps = sp.mean_maps.clone();
    for n in 0..sp.n_sources() {
        let row = noise.row(n);
        let colored = kf.apply_sqrt(row.as_slice().expect("contiguous noise row"));
        for (f, v) in colored.iter().enumerate() {
            maps[[n, f]] += v;
        }
    }
    Ok(maps)
}

/// Closed-form KL divergence between the spatial posterior and the standard
/// normal prior over maps:
/// `0.5 * sum_n (trace + |mean_n|^2 - F - logdet)`.
pub fn kl_spatial(sp: &SpatialPosterior, kf: &KernelFactor) -> f64 {
    let f = sp.mean_maps.ncols() as f64;
    let ns = sp.n_sources() as f64;
    let sq_means: f64 = sp.mean_maps.iter().map(|m| m * m).sum();
    0.5 * (ns * (kf.trace - f - kf.logdet) + sq_means)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn lattice(h: usize, w: usize) -> GridGeometry {
        GridGeometry::Lattice {
            height: h,
            width: w,
        }
    }

    #[test]
    fn vanishing_lengthscale_gives_identity() {
        let kf = build_kernel(lattice(3, 4), 1.0, 1e-4, 0.0).unwrap();
        assert_abs_diff_eq!(kf.logdet, 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(kf.trace, 12.0, epsilon = 1e-10);
        let dense = kf.dense_covariance();
        for i in 0..12 {
            for j in 0..12 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(dense[[i, j]], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dense_oracle_2x2() {
        // Direct 4 x 4 kernel evaluation vs the Kronecker reconstruction.
        let (alpha, beta) = (1.0, 1.0);
        let kf = build_kernel(lattice(2, 2), alpha, beta, 0.0).unwrap();
        let dense = kf.dense_covariance();
        let coords = [(0, 0), (0, 1), (1, 0), (1, 1)];
        for (a, &(i1, j1)) in coords.iter().enumerate() {
            for (b, &(i2, j2)) in coords.iter().enumerate() {
                let d2 = ((i1 - i2) as f64).powi(2) + ((j1 - j2) as f64).powi(2);
                let expect = alpha * (-d2 / (2.0 * beta * beta)).exp();
                assert_abs_diff_eq!(dense[[a, b]], expect, epsilon = 1e-10);
            }
        }
        // row_factor (x) col_factor squared reconstructs the covariance
        let mut kron_sq = Array2::zeros((4, 4));
        let rr = kf.row_factor.dot(&kf.row_factor);
        let cc = kf.col_factor.dot(&kf.col_factor);
        for a in 0..4 {
            for b in 0..4 {
                kron_sq[[a, b]] = alpha * rr[[a / 2, b / 2]] * cc[[a % 2, b % 2]];
            }
        }
        for a in 0..4 {
            for b in 0..4 {
                assert_abs_diff_eq!(kron_sq[[a, b]], dense[[a, b]], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn trace_formula() {
        let kf = build_kernel(lattice(5, 7), 2.5, 1.3, 1e-6).unwrap();
        assert_abs_diff_eq!(kf.trace, 2.5 * 35.0 + 1e-6 * 35.0, epsilon = 1e-9);
    }

    #[test]
    fn logdet_matches_dense() {
        let kf = build_kernel(lattice(3, 4), 1.7, 0.9, 1e-5).unwrap();
        let dense = kf.dense_covariance();
        let m = DMatrix::from_fn(12, 12, |i, j| dense[[i, j]]);
        let chol = m.cholesky().expect("dense covariance is PD");
        let dense_logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        assert_abs_diff_eq!(kf.logdet, dense_logdet, epsilon = 1e-8);
    }

    #[test]
    fn degenerate_spectrum_errors_without_jitter() {
        let err = build_kernel(lattice(8, 8), 1.0, 1e6, 0.0);
        assert!(matches!(err, Err(Error::KernelNotPositiveDefinite(_))));
        // jitter rescues the same configuration
        assert!(build_kernel(lattice(8, 8), 1.0, 1e6, 1e-6).is_ok());
    }

    #[test]
    fn sample_zero_noise_returns_means() {
        let sp = SpatialPosterior {
            mean_maps: array![[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]],
            log_amplitude: 0.3,
            log_lengthscale: 0.2,
            grid: lattice(2, 3),
        };
        let kf = build_kernel(sp.grid, sp.amplitude(), sp.lengthscale(), 1e-6).unwrap();
        let maps = sample_maps(&sp, &kf, &Array2::zeros((1, 6))).unwrap();
        assert_eq!(maps, sp.mean_maps);
    }

    #[test]
    fn sample_identity_covariance_returns_noise() {
        let sp = SpatialPosterior {
            mean_maps: Array2::zeros((2, 6)),
            log_amplitude: 0.0,
            log_lengthscale: 1e-4f64.ln(),
            grid: lattice(2, 3),
        };
        let kf = build_kernel(sp.grid, 1.0, 1e-4, 0.0).unwrap();
        let noise = Array2::from_shape_fn((2, 6), |(i, j)| (i * 6 + j) as f64 - 3.0);
        let maps = sample_maps(&sp, &kf, &noise).unwrap();
        for (a, b) in maps.iter().zip(noise.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn kronecker_path_matches_dense_sqrt() {
        // On small grids, apply_sqrt must agree with the dense matrix square
        // root for any jitter.
        for &jitter in &[0.0, 1e-6, 1e-2] {
            let kf = build_kernel(lattice(3, 3), 1.4, 1.1, jitter).unwrap();
            let dense = kf.dense_covariance();
            let m = DMatrix::from_fn(9, 9, |i, j| dense[[i, j]]);
            let eig = SymmetricEigen::new(m);
            let mut rng = ChaCha12Rng::seed_from_u64(1);
            let x: Vec<f64> = (0..9).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let fast = kf.apply_sqrt(&x);
            // dense symmetric sqrt: V sqrt(D) V^T x
            let xv = nalgebra::DVector::from_vec(x.clone());
            let proj = eig.eigenvectors.transpose() * &xv;
            let scaled = nalgebra::DVector::from_fn(9, |i, _| {
                proj[i] * eig.eigenvalues[i].max(0.0).sqrt()
            });
            let dense_out = &eig.eigenvectors * scaled;
            for i in 0..9 {
                assert_abs_diff_eq!(fast[i], dense_out[i], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn sampling_covariance_matches_dense() {
        // Empirical covariance of sampled maps on a 3x3 grid vs the dense
        // covariance, entrywise within 3 standard errors.
        let grid = lattice(3, 3);
        let sp = SpatialPosterior {
            mean_maps: Array2::zeros((1, 9)),
            log_amplitude: 0.8f64.ln(),
            log_lengthscale: 1.2f64.ln(),
            grid,
        };
        let kf = build_kernel(grid, sp.amplitude(), sp.lengthscale(), 1e-6).unwrap();
        let dense = kf.dense_covariance();
        let n = 100_000;
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        let mut acc = Array2::<f64>::zeros((9, 9));
        for _ in 0..n {
            let noise = Array2::from_shape_fn((1, 9), |_| rng.sample::<f64, _>(StandardNormal));
            let a = sample_maps(&sp, &kf, &noise).unwrap();
            for i in 0..9 {
                for j in 0..9 {
                    acc[[i, j]] += a[[0, i]] * a[[0, j]];
                }
            }
        }
        let emp = acc / n as f64;
        for i in 0..9 {
            for j in 0..9 {
                // var of a product-moment estimate ~ (s_ii s_jj + s_ij^2)/n
                let se = ((dense[[i, i]] * dense[[j, j]] + dense[[i, j]].powi(2)) / n as f64)
                    .sqrt();
                assert!(
                    (emp[[i, j]] - dense[[i, j]]).abs() <= 3.0 * se,
                    "cov[{i},{j}] = {} vs {} (se {se})",
                    emp[[i, j]],
                    dense[[i, j]]
                );
            }
        }
    }

    #[test]
    fn kl_values() {
        // identity covariance, zero means: KL = 0
        let grid = lattice(2, 2);
        let sp = SpatialPosterior {
            mean_maps: Array2::zeros((1, 4)),
            log_amplitude: 0.0,
            log_lengthscale: 1e-4f64.ln(),
            grid,
        };
        let kf = build_kernel(grid, 1.0, 1e-4, 0.0).unwrap();
        assert_abs_diff_eq!(kl_spatial(&sp, &kf), 0.0, epsilon = 1e-12);

        // |mean|^2 = 4 with identity covariance: KL = 2
        let sp2 = SpatialPosterior {
            mean_maps: array![[2.0, 0.0, 0.0, 0.0]],
            ..sp.clone()
        };
        assert_abs_diff_eq!(kl_spatial(&sp2, &kf), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_matches_dense_formula() {
        // Random posterior on a 2x2 grid vs the dense multivariate-normal KL.
        let grid = lattice(2, 2);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let sp = SpatialPosterior {
            mean_maps: Array2::from_shape_fn((2, 4), |_| rng.sample::<f64, _>(StandardNormal)),
            log_amplitude: 0.4,
            log_lengthscale: -0.1,
            grid,
        };
        let kf = build_kernel(grid, sp.amplitude(), sp.lengthscale(), 1e-6).unwrap();
        let dense = kf.dense_covariance();
        let m = DMatrix::from_fn(4, 4, |i, j| dense[[i, j]]);
        let chol = m.cholesky().unwrap();
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let trace: f64 = (0..4).map(|i| dense[[i, i]]).sum();
        let mut expect = 0.0;
        for n in 0..2 {
            let sq: f64 = sp.mean_maps.row(n).iter().map(|v| v * v).sum();
            expect += 0.5 * (trace + sq - 4.0 - logdet);
        }
        assert_abs_diff_eq!(kl_spatial(&sp, &kf), expect, epsilon = 1e-8);
    }

    #[test]
    fn kl_invariant_to_flattening_order() {
        // Transposing the lattice (swapping row-major for column-major
        // flattening) leaves trace, logdet, and the KL unchanged.
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mu: Vec<f64> = (0..12).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let sp_a = SpatialPosterior {
            mean_maps: Array2::from_shape_vec((1, 12), mu.clone()).unwrap(),
            log_amplitude: 0.2,
            log_lengthscale: 0.3,
            grid: lattice(3, 4),
        };
        let transposed: Vec<f64> = (0..12).map(|f| mu[(f % 3) * 4 + f / 3]).collect();
        let sp_b = SpatialPosterior {
            mean_maps: Array2::from_shape_vec((1, 12), transposed).unwrap(),
            log_amplitude: 0.2,
            log_lengthscale: 0.3,
            grid: lattice(4, 3),
        };
        let kf_a = build_kernel(sp_a.grid, sp_a.amplitude(), sp_a.lengthscale(), 1e-6).unwrap();
        let kf_b = build_kernel(sp_b.grid, sp_b.amplitude(), sp_b.lengthscale(), 1e-6).unwrap();
        assert_abs_diff_eq!(
            kl_spatial(&sp_a, &kf_a),
            kl_spatial(&sp_b, &kf_b),
            epsilon = 1e-9
        );
    }

    #[test]
    fn logdet_continuous_in_lengthscale() {
        let base = build_kernel(lattice(4, 4), 1.0, 1.5, 1e-6).unwrap();
        let bumped = build_kernel(lattice(4, 4), 1.0, 1.5 + 1e-8, 1e-6).unwrap();
        assert!((base.logdet - bumped.logdet).abs() < 1e-4);
    }
}
