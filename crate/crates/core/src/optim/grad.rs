//! Hand-derived reparameterization gradients of the stochastic bound.
//!
//! The Monte Carlo terms are differentiated through the three
//! reparameterization maps and the cosine feature map; the KL terms
//! differentiate their closed forms. The gradient with respect to the
//! lengthscale goes through the matrix square root of the structured
//! covariance via the Sylvester identity `dB[a,b] = dCov[a,b] / (d_a + d_b)`
//! in the Kronecker eigenbasis, where `d` are the eigenvalues of the root.
//!
//! Likelihood reductions over subjects run over a fixed set of partitions
//! whose partial results are combined in partition order, so values are
//! bitwise reproducible for any worker-thread count.

use ndarray::{s, Array1, Array2};

use crate::elbo::{self, DrawForward};
use crate::error::{Error, Result};
use crate::model::{DataMatrix, ElboBreakdown, Hyperparams, ModelState, NoiseDraws};
use crate::rff;
use crate::spatial::{self, KernelFactor};

/// Gradient of the bound with respect to every unconstrained parameter,
/// mirroring [`ModelState`]. Positive parameters are differentiated in log
/// space through the chain rule.
#[derive(Debug, Clone)]
pub struct ElboGradient {
    pub mean_maps: Array2<f64>,
    pub log_amplitude: f64,
    pub log_lengthscale: f64,
    pub freq_mean: Array2<f64>,
    pub freq_log_std: Array2<f64>,
    pub weight_mean: Array2<f64>,
    pub weight_log_std: Array2<f64>,
    pub freq_prior_log_precision: Array1<f64>,
    pub time_shifts: Array1<f64>,
    pub log_noise_std: f64,
}

impl ElboGradient {
    fn zeros(state: &ModelState) -> Self {
        ElboGradient {
            mean_maps: Array2::zeros(state.spatial.mean_maps.dim()),
            log_amplitude: 0.0,
            log_lengthscale: 0.0,
            freq_mean: Array2::zeros(state.temporal.freq_mean.dim()),
            freq_log_std: Array2::zeros(state.temporal.freq_mean.dim()),
            weight_mean: Array2::zeros(state.temporal.freq_mean.dim()),
            weight_log_std: Array2::zeros(state.temporal.freq_mean.dim()),
            freq_prior_log_precision: Array1::zeros(state.n_sources()),
            time_shifts: Array1::zeros(state.n_subjects()),
            log_noise_std: 0.0,
        }
    }

    /// Flat vector in the order of [`super::params::ParamLayout`].
    pub fn to_vec(&self) -> Array1<f64> {
        let mut v = Vec::new();
        v.extend(self.mean_maps.iter());
        v.push(self.log_amplitude);
        v.push(self.log_lengthscale);
        v.extend(self.freq_mean.iter());
        v.extend(self.freq_log_std.iter());
        v.extend(self.weight_mean.iter());
        v.extend(self.weight_log_std.iter());
        v.extend(self.freq_prior_log_precision.iter());
        v.extend(self.time_shifts.iter());
        v.push(self.log_noise_std);
        Array1::from_vec(v)
    }
}

/// Per-partition partials of the likelihood backward pass. Cross-subject
/// reductions live here; per-subject outputs are written to disjoint slots.
struct LikePartial {
    range: std::ops::Range<usize>,
    g_maps: Array2<f64>,
    g_weight_sum: Array2<f64>,
    g_freq_sum: Array2<f64>,
    g_time_block: Vec<f64>,
}

fn like_partial(
    range: std::ops::Range<usize>,
    fwd: &DrawForward,
    times: &[f64],
) -> LikePartial {
    let (ns, j) = fwd.weights.dim();
    let scale = rff::feature_scale(j);
    let resid_block = fwd.resid.slice(s![range.clone(), ..]);

    // d loglik / d maps (up to 1/sigma^2): S_block * resid_block
    let g_maps = fwd
        .source_at_subjects
        .slice(s![.., range.clone()])
        .dot(&resid_block);
    // d loglik / d S[n, p] (up to 1/sigma^2)
    let g_source = fwd.maps.dot(&resid_block.t());

    let mut g_weight_sum = Array2::zeros((ns, j));
    let mut g_freq_sum = Array2::zeros((ns, j));
    let mut g_time_block = vec![0.0; range.len()];
    for (local, p) in range.clone().enumerate() {
        let t = times[p];
        for n in 0..ns {
            let gs = g_source[[n, local]];
            let mut deriv_at_t = 0.0;
            for k in 0..j {
                let cos = fwd.cos_subj[[n, k, p]];
                let sin = fwd.sin_subj[[n, k, p]];
                g_weight_sum[[n, k]] += gs * scale * cos;
                g_freq_sum[[n, k]] -= gs * scale * fwd.weights[[n, k]] * t * sin;
                deriv_at_t -= scale * fwd.weights[[n, k]] * fwd.freqs[[n, k]] * sin;
            }
            g_time_block[local] += gs * deriv_at_t * t * (1.0 - t);
        }
    }
    LikePartial {
        range,
        g_maps,
        g_weight_sum,
        g_freq_sum,
        g_time_block,
    }
}

/// Runs the partition workers, sequentially or on `threads` workers, and
/// returns the partials in partition order.
fn run_partitions(
    fwd: &DrawForward,
    times: &[f64],
    n_subjects: usize,
    threads: usize,
) -> Vec<LikePartial> {
    let ranges = elbo::partition_ranges(n_subjects, elbo::N_PARTITIONS);
    if threads <= 1 || ranges.len() <= 1 {
        return ranges
            .into_iter()
            .map(|r| like_partial(r, fwd, times))
            .collect();
    }
    let workers = threads.min(ranges.len());
    let mut slots: Vec<Option<LikePartial>> = ranges.iter().map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers {
            let ranges = &ranges;
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                let mut idx = w;
                while idx < ranges.len() {
                    out.push((idx, like_partial(ranges[idx].clone(), fwd, times)));
                    idx += workers;
                }
                out
            }));
        }
        for handle in handles {
            for (idx, partial) in handle.join().expect("partition worker") {
                slots[idx] = Some(partial);
            }
        }
    });
    slots.into_iter().map(|p| p.expect("partition slot")).collect()
}

/// Derivative of the 1-D squared-exponential kernel with respect to the
/// lengthscale, rotated into the kernel eigenbasis.
fn kernel_lengthscale_derivative(n: usize, lengthscale: f64, vecs: &Array2<f64>) -> Array2<f64> {
    let inv = 1.0 / (2.0 * lengthscale * lengthscale);
    let cube = lengthscale * lengthscale * lengthscale;
    let kprime = Array2::from_shape_fn((n, n), |(i, j)| {
        let d2 = (i as f64 - j as f64).powi(2);
        (-d2 * inv).exp() * d2 / cube
    });
    vecs.t().dot(&kprime).dot(vecs)
}

struct KernelGradContext {
    rot_row_deriv: Array2<f64>,
    rot_col_deriv: Array2<f64>,
    /// sqrt of the effective eigenvalues, H x W.
    root: Array2<f64>,
}

impl KernelGradContext {
    fn new(kf: &KernelFactor) -> Self {
        let (h, w) = kf.grid.dims();
        let rot_row_deriv = kernel_lengthscale_derivative(h, kf.lengthscale, &kf.row_vecs);
        let rot_col_deriv = kernel_lengthscale_derivative(w, kf.lengthscale, &kf.col_vecs);
        let root = Array2::from_shape_fn((h, w), |(i, j)| kf.eigenvalue(i, j).sqrt());
        KernelGradContext {
            rot_row_deriv,
            rot_col_deriv,
            root,
        }
    }

    /// `g^T (d sqrt(Cov) / d amplitude) k` for one source, in the eigenbasis.
    fn amplitude_term(&self, kf: &KernelFactor, g: &Array2<f64>, k: &Array2<f64>) -> f64 {
        let (h, w) = g.dim();
        let mut acc = 0.0;
        for i in 0..h {
            for j in 0..w {
                let lam = kf.row_vals[i] * kf.col_vals[j];
                acc += g[[i, j]] * k[[i, j]] * lam / (2.0 * self.root[[i, j]]);
            }
        }
        acc
    }

    /// `g^T (d sqrt(Cov) / d lengthscale) k` for one source via the Sylvester
    /// identity in the Kronecker eigenbasis.
    fn lengthscale_term(&self, kf: &KernelFactor, g: &Array2<f64>, k: &Array2<f64>) -> f64 {
        let (h, w) = g.dim();
        let mut acc = 0.0;
        // row-kernel direction: dCov = amp * (Kr' (x) diag(col_vals))
        for j in 0..w {
            let lc = kf.col_vals[j];
            if lc == 0.0 {
                continue;
            }
            for i1 in 0..h {
                let gi = g[[i1, j]];
                if gi == 0.0 {
                    continue;
                }
                for i2 in 0..h {
                    acc += gi * self.rot_row_deriv[[i1, i2]] * lc * k[[i2, j]]
                        / (self.root[[i1, j]] + self.root[[i2, j]]);
                }
            }
        }
        // column-kernel direction: dCov = amp * (diag(row_vals) (x) Kc')
        for i in 0..h {
            let lr = kf.row_vals[i];
            if lr == 0.0 {
                continue;
            }
            for j1 in 0..w {
                let gj = g[[i, j1]];
                if gj == 0.0 {
                    continue;
                }
                for j2 in 0..w {
                    acc += gj * lr * self.rot_col_deriv[[j1, j2]] * k[[i, j2]]
                        / (self.root[[i, j1]] + self.root[[i, j2]]);
                }
            }
        }
        kf.amplitude * acc
    }

    /// d logdet / d amplitude and d logdet / d lengthscale, plus
    /// d trace / d amplitude and d trace / d lengthscale.
    fn kl_scalar_derivatives(&self, kf: &KernelFactor) -> (f64, f64, f64, f64) {
        let (h, w) = self.root.dim();
        let mut dlogdet_damp = 0.0;
        let mut dlogdet_dlen = 0.0;
        for i in 0..h {
            for j in 0..w {
                let e = kf.eigenvalue(i, j);
                let lam = kf.row_vals[i] * kf.col_vals[j];
                dlogdet_damp += lam / e;
                dlogdet_dlen += kf.amplitude
                    * (self.rot_row_deriv[[i, i]] * kf.col_vals[j]
                        + kf.row_vals[i] * self.rot_col_deriv[[j, j]])
                    / e;
            }
        }
        let sum_row: f64 = kf.row_vals.sum();
        let sum_col: f64 = kf.col_vals.sum();
        let tr_row_deriv: f64 = (0..h).map(|i| self.rot_row_deriv[[i, i]]).sum();
        let tr_col_deriv: f64 = (0..w).map(|j| self.rot_col_deriv[[j, j]]).sum();
        let dtrace_damp = sum_row * sum_col;
        let dtrace_dlen = kf.amplitude * (tr_row_deriv * sum_col + sum_row * tr_col_deriv);
        (dlogdet_damp, dlogdet_dlen, dtrace_damp, dtrace_dlen)
    }
}

/// The bound and its full analytic gradient, evaluated with the same noise
/// draws. Deterministic given the draws and any worker-thread count.
pub fn grad_elbo(
    state: &ModelState,
    data: &DataMatrix,
    hp: &Hyperparams,
    draws: &[NoiseDraws],
) -> Result<(ElboBreakdown, ElboGradient)> {
    grad_elbo_threaded(state, data, hp, draws, 1)
}

pub(crate) fn grad_elbo_threaded(
    state: &ModelState,
    data: &DataMatrix,
    hp: &Hyperparams,
    draws: &[NoiseDraws],
    threads: usize,
) -> Result<(ElboBreakdown, ElboGradient)> {
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
        elbo::DEFAULT_JITTER,
    )?;
    let ctx = KernelGradContext::new(&kf);

    let ns = state.n_sources();
    let n_rff = state.n_rff();
    let p = data.n_subjects();
    let f = data.n_features();
    let sigma = state.noise_std();
    let inv_var = 1.0 / (sigma * sigma);
    let scale = rff::feature_scale(n_rff);
    let freq_std = state.temporal.freq_std();
    let weight_std = state.temporal.weight_std();
    let times: Vec<f64> = state.time_shifts.positions().to_vec();

    let mut grad = ElboGradient::zeros(state);
    let mut loglik_acc = 0.0;
    let mut constraint_acc = 0.0;

    for draw in draws {
        let fwd = elbo::forward_draw(state, data, hp, &kf, draw)?;
        loglik_acc += fwd.loglik;
        constraint_acc += fwd.constraint;

        let partials = run_partitions(&fwd, &times, p, threads);
        let mut g_maps = Array2::<f64>::zeros((ns, f));
        let mut g_weight = Array2::<f64>::zeros((ns, n_rff));
        let mut g_freq = Array2::<f64>::zeros((ns, n_rff));
        for partial in &partials {
            g_maps += &partial.g_maps;
            g_weight += &partial.g_weight_sum;
            g_freq += &partial.g_freq_sum;
            for (local, pi) in partial.range.clone().enumerate() {
                grad.time_shifts[pi] += partial.g_time_block[local] * inv_var;
            }
        }
        g_maps *= inv_var;
        g_weight *= inv_var;
        g_freq *= inv_var;

        // constraint term: d/d derivs = sharpness * sigmoid(-sharpness * d)
        for n in 0..ns {
            for (c, &u) in hp.control_points.iter().enumerate() {
                let d = fwd.ctrl_derivs[[n, c]];
                let gd = hp.sharpness * sigmoid(-hp.sharpness * d);
                for k in 0..n_rff {
                    let sin = fwd.sin_ctrl[[n, k, c]];
                    let cos = fwd.cos_ctrl[[n, k, c]];
                    let omega = fwd.freqs[[n, k]];
                    g_weight[[n, k]] -= gd * scale * omega * sin;
                    g_freq[[n, k]] -=
                        gd * scale * fwd.weights[[n, k]] * (sin + omega * u * cos);
                }
            }
        }

        // chain into the unconstrained temporal parameters
        for n in 0..ns {
            for k in 0..n_rff {
                grad.freq_mean[[n, k]] += g_freq[[n, k]];
                grad.freq_log_std[[n, k]] +=
                    g_freq[[n, k]] * freq_std[[n, k]] * draw.freq[[n, k]];
                grad.weight_mean[[n, k]] += g_weight[[n, k]];
                grad.weight_log_std[[n, k]] +=
                    g_weight[[n, k]] * weight_std[[n, k]] * draw.weight[[n, k]];
            }
        }

        // spatial: mean maps are affine in the sample; amplitude and
        // lengthscale flow through the covariance square root
        grad.mean_maps += &g_maps;
        for n in 0..ns {
            let g_row = g_maps.row(n);
            let g_eig = kf.to_eigenbasis(g_row.as_slice().expect("contiguous gradient row"));
            let k_eig = &fwd.map_noise_eig[n];
            grad.log_amplitude += ctx.amplitude_term(&kf, &g_eig, k_eig);
            grad.log_lengthscale += ctx.lengthscale_term(&kf, &g_eig, k_eig);
        }

        grad.log_noise_std += -((p * f) as f64) + fwd.sq_resid * inv_var;
    }

    let n_draws = draws.len() as f64;
    grad.mean_maps /= n_draws;
    grad.freq_mean /= n_draws;
    grad.freq_log_std /= n_draws;
    grad.weight_mean /= n_draws;
    grad.weight_log_std /= n_draws;
    grad.time_shifts /= n_draws;
    grad.log_amplitude /= n_draws;
    grad.log_lengthscale /= n_draws;
    grad.log_noise_std /= n_draws;

    // log-space chain rule for the two kernel scalars
    grad.log_amplitude *= kf.amplitude;
    grad.log_lengthscale *= kf.lengthscale;

    // KL gradients (the bound subtracts the KLs)
    grad.mean_maps -= &state.spatial.mean_maps;
    let (dlogdet_damp, dlogdet_dlen, dtrace_damp, dtrace_dlen) = ctx.kl_scalar_derivatives(&kf);
    grad.log_amplitude -=
        0.5 * ns as f64 * (dtrace_damp - dlogdet_damp) * kf.amplitude;
    grad.log_lengthscale -=
        0.5 * ns as f64 * (dtrace_dlen - dlogdet_dlen) * kf.lengthscale;

    let precision = state.temporal.freq_prior_precision();
    for n in 0..ns {
        let l = precision[n];
        let mut sq_sum = 0.0;
        for k in 0..n_rff {
            let r = state.temporal.freq_mean[[n, k]];
            let pstd = freq_std[[n, k]];
            let sstd = weight_std[[n, k]];
            let m = state.temporal.weight_mean[[n, k]];
            grad.freq_mean[[n, k]] -= r * l;
            grad.freq_log_std[[n, k]] -= pstd * pstd * l - 1.0;
            grad.weight_mean[[n, k]] -= m;
            grad.weight_log_std[[n, k]] -= sstd * sstd - 1.0;
            sq_sum += pstd * pstd + r * r;
        }
        grad.freq_prior_log_precision[n] -= 0.5 * l * sq_sum - 0.5 * n_rff as f64;
    }

    let (kl_spatial, kl_freq, kl_weights) = elbo::closed_form_kls(state, &kf);
    let breakdown = ElboBreakdown::new(
        loglik_acc / n_draws,
        constraint_acc / n_draws,
        kl_spatial,
        kl_freq,
        kl_weights,
    );
    Ok((breakdown, grad))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, GridGeometry};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn kl_minima_have_zero_mean_gradients() {
        // at the prior-equal point with zero data and zero draws, the
        // gradients for weight means, frequency means, and mean maps vanish
        let data = DataMatrix::new(
            Array2::zeros((3, 4)),
            None,
            GridGeometry::Lattice {
                height: 2,
                width: 2,
            },
        )
        .unwrap();
        let hp = Hyperparams::new(1.0, 4.0, 2, 3);
        let mut state = init_model(&data, &hp, 0).unwrap();
        state.temporal.weight_mean.fill(0.0);
        let draws = vec![NoiseDraws::zeros(2, 3, 4)];
        let (_, grad) = grad_elbo(&state, &data, &hp, &draws).unwrap();
        assert!(grad.weight_mean.iter().all(|&g| g == 0.0));
        assert!(grad.freq_mean.iter().all(|&g| g == 0.0));
        assert!(grad.mean_maps.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn kl_weight_gradient_is_minus_mean() {
        // with zero data, zero draws, and weights that cannot influence the
        // likelihood (zero frequencies keep sources constant but the maps are
        // zero), the weight-mean gradient reduces to the KL part: -m
        let data = DataMatrix::new(
            Array2::zeros((2, 4)),
            None,
            GridGeometry::Flat { len: 4 },
        )
        .unwrap();
        let hp = Hyperparams::new(1.0, 4.0, 1, 2);
        let mut state = init_model(&data, &hp, 0).unwrap();
        state.temporal.weight_mean = ndarray::array![[0.7, -1.2]];
        let draws = vec![NoiseDraws::zeros(1, 2, 4)];
        let (_, grad) = grad_elbo(&state, &data, &hp, &draws).unwrap();
        // likelihood part: maps are exactly zero, so d loglik / d m = 0
        assert_abs_diff_eq!(grad.weight_mean[[0, 0]], -0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(grad.weight_mean[[0, 1]], 1.2, epsilon = 1e-12);
    }

    #[test]
    fn threaded_gradient_is_bitwise_identical() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let y = Array2::from_shape_fn((20, 9), |_| rng.sample::<f64, _>(StandardNormal));
        let data = DataMatrix::new(
            y,
            None,
            GridGeometry::Lattice {
                height: 3,
                width: 3,
            },
        )
        .unwrap();
        let mut hp = Hyperparams::new(0.5, 3.0, 2, 3);
        hp.n_mc = 2;
        let mut state = init_model(&data, &hp, 1).unwrap();
        state.temporal.freq_mean.mapv_inplace(|_| 0.8);
        state.spatial.mean_maps.mapv_inplace(|_| 0.3);
        let draws: Vec<NoiseDraws> = (0..2)
            .map(|_| NoiseDraws::sample(&mut rng, 2, 3, 9))
            .collect();
        let (bd1, g1) = grad_elbo_threaded(&state, &data, &hp, &draws, 1).unwrap();
        let (bd2, g2) = grad_elbo_threaded(&state, &data, &hp, &draws, 4).unwrap();
        assert_eq!(bd1.total.to_bits(), bd2.total.to_bits());
        for (a, b) in g1.to_vec().iter().zip(g2.to_vec().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
