//! Self-contained FastICA for the known-times comparison: PCA whitening
//! followed by fixed-point iteration with a logcosh contrast and symmetric
//! decorrelation.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Output of [`whiten`]: the decorrelated, unit-variance projection of the
/// input rows, plus the linear maps needed to go back to data space.
#[derive(Debug, Clone)]
pub struct Whitened {
    /// k x F whitened signals with identity sample covariance.
    pub signals: Array2<f64>,
    /// P x k preimage: `centered ~= preimage . signals`.
    pub preimage: Array2<f64>,
    /// k x P projection taking centered data to whitened signals.
    pub projection: Array2<f64>,
    /// Per-row means removed from the input.
    pub row_means: Array1<f64>,
}

/// Centers each row of `y` and projects onto the top `n_components`
/// principal directions, scaled to unit variance (sample covariance with
/// denominator F).
pub fn whiten(y: &Array2<f64>, n_components: usize) -> Result<Whitened> {
    let (p, f) = y.dim();
    if n_components == 0 || n_components > p.min(f) {
        return Err(Error::InvalidParameter(format!(
            "n_components {n_components} outside 1..={}",
            p.min(f)
        )));
    }
    let row_means = Array1::from_shape_fn(p, |i| y.row(i).sum() / f as f64);
    let centered = Array2::from_shape_fn((p, f), |(i, j)| y[[i, j]] - row_means[i]);

    // P x P covariance across rows
    let cov = centered.dot(&centered.t()) / f as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(p, p, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let lead = eig.eigenvalues[order[0]].max(0.0);
    for &idx in order.iter().take(n_components) {
        if eig.eigenvalues[idx] <= lead * 1e-12 {
            return Err(Error::RankDeficient(format!(
                "input rank below {n_components} components"
            )));
        }
    }

    let mut projection = Array2::zeros((n_components, p));
    let mut preimage = Array2::zeros((p, n_components));
    for (c, &idx) in order.iter().take(n_components).enumerate() {
        let scale = eig.eigenvalues[idx].sqrt();
        for i in 0..p {
            let v = eig.eigenvectors[(i, idx)];
            projection[[c, i]] = v / scale;
            preimage[[i, c]] = v * scale;
        }
    }
    let signals = projection.dot(&centered);
    Ok(Whitened {
        signals,
        preimage,
        projection,
        row_means,
    })
}

/// FastICA result: per-subject temporal courses and unit-variance spatial
/// sources. Sign and permutation are left unresolved.
#[derive(Debug, Clone)]
pub struct IcaResult {
    /// P x k mixing courses such that `centered ~= courses . sources`.
    pub courses: Array2<f64>,
    /// k x F independent sources.
    pub sources: Array2<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Symmetric orthogonalization `(W W^T)^{-1/2} W`.
fn sym_decorrelate(w: &Array2<f64>) -> Array2<f64> {
    let k = w.nrows();
    let wwt = w.dot(&w.t());
    let eig = SymmetricEigen::new(DMatrix::from_fn(k, k, |i, j| wwt[[i, j]]));
    let mut inv_root = Array2::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            let mut acc = 0.0;
            for c in 0..k {
                let lam = eig.eigenvalues[c].max(f64::MIN_POSITIVE);
                acc += eig.eigenvectors[(i, c)] * eig.eigenvectors[(j, c)] / lam.sqrt();
            }
            inv_root[[i, j]] = acc;
        }
    }
    inv_root.dot(w)
}

/// Fixed-point FastICA on whitened signals with the logcosh contrast
/// (g = tanh) and symmetric decorrelation. Deterministic given the seed; on
/// non-convergence the best iterate is returned with `converged = false`.
pub fn fastica(
    white: &Whitened,
    n_components: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<IcaResult> {
    let (k, f) = white.signals.dim();
    if n_components != k {
        return Err(Error::DimensionMismatch(format!(
            "{n_components} components requested from {k} whitened signals"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let init = Array2::from_shape_fn((k, k), |_| rng.sample::<f64, _>(StandardNormal));
    let mut unmixing = sym_decorrelate(&init);

    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..max_iters {
        iterations = iter + 1;
        let proj = unmixing.dot(&white.signals); // k x F
        let g = proj.mapv(f64::tanh);
        let g_prime_mean =
            Array1::from_shape_fn(k, |i| g.row(i).iter().map(|v| 1.0 - v * v).sum::<f64>() / f as f64);
        let mut next = g.dot(&white.signals.t()) / f as f64;
        for i in 0..k {
            for j in 0..k {
                next[[i, j]] -= g_prime_mean[i] * unmixing[[i, j]];
            }
        }
        let next = sym_decorrelate(&next);

        // max |1 - |<w_new, w_old>||
        let mut delta = 0.0f64;
        for i in 0..k {
            let dot: f64 = next
                .row(i)
                .iter()
                .zip(unmixing.row(i).iter())
                .map(|(a, b)| a * b)
                .sum();
            delta = delta.max((1.0 - dot.abs()).abs());
        }
        unmixing = next;
        if delta < tol {
            converged = true;
            break;
        }
    }

    let sources = unmixing.dot(&white.signals);
    let courses = white.preimage.dot(&unmixing.t());
    Ok(IcaResult {
        courses,
        sources,
        converged,
        iterations,
    })
}
