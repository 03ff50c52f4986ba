//! Assembles the stochastic lower bound from the temporal and spatial
//! modules: Monte Carlo expectations of the likelihood and constraint terms
//! under the reparameterized posteriors, minus the three closed-form KLs.

use ndarray::{s, Array2, Array3};

use crate::error::{Error, Result};
use crate::model::{DataMatrix, ElboBreakdown, Hyperparams, ModelState, NoiseDraws};
use crate::rff;
use crate::spatial::{self, KernelFactor};

/// Jitter added to the spatial covariance spectrum everywhere the bound is
/// evaluated; floors the log-determinant when the lengthscale makes the
/// kernel numerically rank-deficient.
pub const DEFAULT_JITTER: f64 = 1e-6;

/// Fixed number of subject partitions for likelihood reductions. Partials
/// are combined in partition order, so results are bitwise identical no
/// matter how many worker threads process the partitions.
pub(crate) const N_PARTITIONS: usize = 16;

pub(crate) fn partition_ranges(n: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let parts = parts.min(n).max(1);
    let base = n / parts;
    let extra = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// Gaussian log-likelihood of the data given source values at the subject
/// times (Ns x P) and spatial maps (Ns x F):
/// `-(PF/2) log(2 pi sigma^2) - |Y - S^T A|_F^2 / (2 sigma^2)`.
pub fn log_likelihood(
    data: &DataMatrix,
    s_at_subjects: &Array2<f64>,
    maps: &Array2<f64>,
    noise_std: f64,
) -> Result<f64> {
    let (resid, sq) = residual(data, s_at_subjects, maps)?;
    drop(resid);
    Ok(gaussian_loglik(data.n_subjects(), data.n_features(), sq, noise_std))
}

pub(crate) fn gaussian_loglik(p: usize, f: usize, sq_resid: f64, noise_std: f64) -> f64 {
    let pf = (p * f) as f64;
    let var = noise_std * noise_std;
    -0.5 * pf * (std::f64::consts::TAU * var).ln() - sq_resid / (2.0 * var)
}

/// Residual `Y - S^T A` and its squared Frobenius norm, accumulated over the
/// fixed subject partitions in order.
pub(crate) fn residual(
    data: &DataMatrix,
    s_at_subjects: &Array2<f64>,
    maps: &Array2<f64>,
) -> Result<(Array2<f64>, f64)> {
    let p = data.n_subjects();
    let f = data.n_features();
    if s_at_subjects.ncols() != p || s_at_subjects.nrows() != maps.nrows() || maps.ncols() != f {
        return Err(Error::DimensionMismatch(format!(
            "sources {:?}, maps {:?}, data {}x{}",
            s_at_subjects.dim(),
            maps.dim(),
            p,
            f
        )));
    }
    let st = s_at_subjects.t();
    let mut resid = Array2::zeros((p, f));
    let mut sq = 0.0;
    for range in partition_ranges(p, N_PARTITIONS) {
        let block = st.slice(s![range.clone(), ..]).dot(maps);
        let mut out = resid.slice_mut(s![range.clone(), ..]);
        out.assign(&data.values.slice(s![range.clone(), ..]));
        out -= &block;
        sq += out.iter().map(|v| v * v).sum::<f64>();
    }
    Ok((resid, sq))
}

/// Everything computed for one noise draw that the bound and its gradients
/// need: reparameterized latents, trig tables, residual, and the per-draw
/// likelihood and constraint terms.
pub(crate) struct DrawForward {
    pub freqs: Array2<f64>,
    pub weights: Array2<f64>,
    pub maps: Array2<f64>,
    /// Per-source map noise rotated into the covariance eigenbasis (H x W).
    pub map_noise_eig: Vec<Array2<f64>>,
    pub cos_subj: Array3<f64>,
    pub sin_subj: Array3<f64>,
    pub cos_ctrl: Array3<f64>,
    pub sin_ctrl: Array3<f64>,
    pub source_at_subjects: Array2<f64>,
    pub ctrl_derivs: Array2<f64>,
    pub resid: Array2<f64>,
    pub sq_resid: f64,
    pub loglik: f64,
    pub constraint: f64,
}

pub(crate) fn forward_draw(
    state: &ModelState,
    data: &DataMatrix,
    hp: &Hyperparams,
    kf: &KernelFactor,
    draw: &NoiseDraws,
) -> Result<DrawForward> {
    let freqs = rff::reparam_freq(&state.temporal, &draw.freq)?;
    let weights = rff::reparam_weights(&state.temporal, &draw.weight)?;

    if draw.map.dim() != state.spatial.mean_maps.dim() {
        return Err(Error::DimensionMismatch(format!(
            "map noise {:?} vs posterior {:?}",
            draw.map.dim(),
            state.spatial.mean_maps.dim()
        )));
    }
    let ns = state.n_sources();
    let mut maps = state.spatial.mean_maps.clone();
    let mut map_noise_eig = Vec::with_capacity(ns);
    for n in 0..ns {
        let row = draw.map.row(n);
        let tilde = kf.to_eigenbasis(row.as_slice().expect("contiguous noise row"));
        let mut scaled = tilde.clone();
        for i in 0..scaled.nrows() {
            for j in 0..scaled.ncols() {
                scaled[[i, j]] *= kf.eigenvalue(i, j).sqrt();
            }
        }
        let colored = kf.from_eigenbasis(&scaled);
        for (f, v) in colored.iter().enumerate() {
            maps[[n, f]] += v;
        }
        map_noise_eig.push(tilde);
    }

    let times: Vec<f64> = state.time_shifts.positions().to_vec();
    let (cos_subj, sin_subj) = rff::trig_tables(&freqs, &state.phases, &times);
    let (cos_ctrl, sin_ctrl) = rff::trig_tables(&freqs, &state.phases, &hp.control_points);
    let source_at_subjects = rff::source_values(&weights, &cos_subj);
    let ctrl_derivs = rff::source_derivs(&weights, &freqs, &sin_ctrl);

    let (resid, sq_resid) = residual(data, &source_at_subjects, &maps)?;
    let loglik = gaussian_loglik(
        data.n_subjects(),
        data.n_features(),
        sq_resid,
        state.noise_std(),
    );
    let constraint = rff::monotonicity_logprob(&ctrl_derivs, hp.sharpness);

    Ok(DrawForward {
        freqs,
        weights,
        maps,
        map_noise_eig,
        cos_subj,
        sin_subj,
        cos_ctrl,
        sin_ctrl,
        source_at_subjects,
        ctrl_derivs,
        resid,
        sq_resid,
        loglik,
        constraint,
    })
}

pub(crate) fn closed_form_kls(state: &ModelState, kf: &KernelFactor) -> (f64, f64, f64) {
    (
        spatial::kl_spatial(&state.spatial, kf),
        rff::kl_freq(&state.temporal),
        rff::kl_weights(&state.temporal),
    )
}

/// The stochastic bound for `state` on `data`: likelihood and constraint
/// expectations averaged over `draws`, KL terms in closed form. Deterministic
/// given the draws.
pub fn elbo(
    state: &ModelState,
    data: &DataMatrix,
    hp: &Hyperparams,
    draws: &[NoiseDraws],
) -> Result<ElboBreakdown> {
    hp.validate()?;
    if draws.len() != hp.n_mc {
        return Err(Error::DimensionMismatch(format!(
            "{} noise draws for n_mc = {}",
            draws.len(),
            hp.n_mc
        )));
    }
    let kf = spatial::build_kernel(
        state.spatial.grid,
        state.spatial.amplitude(),
        state.spatial.lengthscale(),
        DEFAULT_JITTER,
    )?;
    let mut loglik = 0.0;
    let mut constraint = 0.0;
    for draw in draws {
        let fwd = forward_draw(state, data, hp, &kf, draw)?;
        loglik += fwd.loglik;
        constraint += fwd.constraint;
    }
    let n = draws.len() as f64;
    let (kl_spatial, kl_freq, kl_weights) = closed_form_kls(state, &kf);
    Ok(ElboBreakdown::new(
        loglik / n,
        constraint / n,
        kl_spatial,
        kl_freq,
        kl_weights,
    ))
}
