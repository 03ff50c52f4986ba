//! Temporal sources as random cosine-feature expansions of a Gaussian
//! process, the monotonicity constraint log-probability, and the two
//! temporal KL divergences in closed form.

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};
use crate::model::TemporalPosterior;

/// Source values at T query times and derivative values at C control points.
#[derive(Debug, Clone)]
pub struct SourceEval {
    /// Ns x T source values.
    pub values: Array2<f64>,
    /// Ns x C derivative values at the control points.
    pub derivs: Array2<f64>,
}

/// Frequencies from the reparameterization `freq_mean + freq_std * noise`.
pub fn reparam_freq(tp: &TemporalPosterior, noise: &Array2<f64>) -> Result<Array2<f64>> {
    if noise.dim() != tp.freq_mean.dim() {
        return Err(Error::DimensionMismatch(format!(
            "frequency noise {:?} vs posterior {:?}",
            noise.dim(),
            tp.freq_mean.dim()
        )));
    }
    Ok(&tp.freq_mean + &(&tp.freq_std() * noise))
}

/// Weights from the reparameterization `weight_mean + weight_std * noise`.
pub fn reparam_weights(tp: &TemporalPosterior, noise: &Array2<f64>) -> Result<Array2<f64>> {
    if noise.dim() != tp.weight_mean.dim() {
        return Err(Error::DimensionMismatch(format!(
            "weight noise {:?} vs posterior {:?}",
            noise.dim(),
            tp.weight_mean.dim()
        )));
    }
    Ok(&tp.weight_mean + &(&tp.weight_std() * noise))
}

/// cos and sin of `freq * t + phase` for every (source, feature, time).
/// Shared by the bound and its gradients so both see identical arithmetic.
pub(crate) fn trig_tables(
    freqs: &Array2<f64>,
    phases: &Array1<f64>,
    times: &[f64],
) -> (Array3<f64>, Array3<f64>) {
    let (ns, j) = freqs.dim();
    let t = times.len();
    let mut cos_tab = Array3::zeros((ns, j, t));
    let mut sin_tab = Array3::zeros((ns, j, t));
    for n in 0..ns {
        for k in 0..j {
            let w = freqs[[n, k]];
            let b = phases[k];
            for (idx, &time) in times.iter().enumerate() {
                let (s, c) = (w * time + b).sin_cos();
                cos_tab[[n, k, idx]] = c;
                sin_tab[[n, k, idx]] = s;
            }
        }
    }
    (cos_tab, sin_tab)
}

/// Normalization of the cosine feature map, `sqrt(2 / J)`.
pub(crate) fn feature_scale(n_rff: usize) -> f64 {
    (2.0 / n_rff as f64).sqrt()
}

/// Source values from a cosine table: `scale * sum_j w[n,j] * cos[n,j,t]`.
pub(crate) fn source_values(weights: &Array2<f64>, cos_tab: &Array3<f64>) -> Array2<f64> {
    let (ns, j, t) = cos_tab.dim();
    let scale = feature_scale(j);
    let mut out = Array2::zeros((ns, t));
    for n in 0..ns {
        for idx in 0..t {
            let mut acc = 0.0;
            for k in 0..j {
                acc += weights[[n, k]] * cos_tab[[n, k, idx]];
            }
            out[[n, idx]] = scale * acc;
        }
    }
    out
}

/// Source derivatives from a sine table:
/// `-scale * sum_j w[n,j] * freq[n,j] * sin[n,j,t]`.
pub(crate) fn source_derivs(
    weights: &Array2<f64>,
    freqs: &Array2<f64>,
    sin_tab: &Array3<f64>,
) -> Array2<f64> {
    let (ns, j, t) = sin_tab.dim();
    let scale = feature_scale(j);
    let mut out = Array2::zeros((ns, t));
    for n in 0..ns {
        for idx in 0..t {
            let mut acc = 0.0;
            for k in 0..j {
                acc += weights[[n, k]] * freqs[[n, k]] * sin_tab[[n, k, idx]];
            }
            out[[n, idx]] = -scale * acc;
        }
    }
    out
}

/// Evaluates the sources
/// `S_n(t) = sqrt(2/J) * sum_j w[n,j] * cos(freq[n,j] * t + phase[j])`
/// at `times` and their analytic derivatives at `control_points`.
pub fn eval_sources(
    freqs: &Array2<f64>,
    weights: &Array2<f64>,
    phases: &Array1<f64>,
    times: &[f64],
    control_points: &[f64],
) -> Result<SourceEval> {
    if freqs.dim() != weights.dim() {
        return Err(Error::DimensionMismatch(format!(
            "frequencies {:?} vs weights {:?}",
            freqs.dim(),
            weights.dim()
        )));
    }
    if phases.len() != freqs.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} phases for {} features",
            phases.len(),
            freqs.ncols()
        )));
    }
    let (cos_t, _) = trig_tables(freqs, phases, times);
    let values = source_values(weights, &cos_t);

    let (_, sin_c) = trig_tables(freqs, phases, control_points);
    let derivs = source_derivs(weights, freqs, &sin_c);

    Ok(SourceEval { values, derivs })
}

/// Numerically stable `log(sigmoid(x))`.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Log-probability of the monotonicity constraint: the sum over sources and
/// control points of `log(sigmoid(sharpness * derivative))`. Always <= 0 and
/// approaches 0 as all derivatives grow large and positive.
pub fn monotonicity_logprob(derivs: &Array2<f64>, sharpness: f64) -> f64 {
    derivs
        .iter()
        .map(|&d| log_sigmoid(sharpness * d))
        .sum()
}

/// Closed-form KL divergence between the frequency posterior and its
/// zero-mean prior with per-source precision `l`:
/// `0.5 * sum (p^2 l + r^2 l - 1 - log(p^2 l))`.
pub fn kl_freq(tp: &TemporalPosterior) -> f64 {
    let prec = tp.freq_prior_precision();
    let std = tp.freq_std();
    let mut total = 0.0;
    for n in 0..tp.n_sources() {
        let l = prec[n];
        let log_l = tp.freq_prior_log_precision[n];
        for k in 0..tp.n_features() {
            let p = std[[n, k]];
            let r = tp.freq_mean[[n, k]];
            let var_ratio = p * p * l;
            total += var_ratio + r * r * l - 1.0 - (2.0 * p.ln() + log_l);
        }
    }
    0.5 * total
}

/// Closed-form KL divergence between the weight posterior and the standard
/// normal prior: `0.5 * sum (s^2 + m^2 - 1 - log(s^2))`.
pub fn kl_weights(tp: &TemporalPosterior) -> f64 {
    let std = tp.weight_std();
    let mut total = 0.0;
    for n in 0..tp.n_sources() {
        for k in 0..tp.n_features() {
            let s = std[[n, k]];
            let m = tp.weight_mean[[n, k]];
            total += s * s + m * m - 1.0 - 2.0 * s.ln();
        }
    }
    0.5 * total
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn posterior(
        r: Array2<f64>,
        p: Array2<f64>,
        m: Array2<f64>,
        s: Array2<f64>,
        l: Array1<f64>,
    ) -> TemporalPosterior {
        TemporalPosterior {
            freq_mean: r,
            freq_log_std: p.mapv(f64::ln),
            weight_mean: m,
            weight_log_std: s.mapv(f64::ln),
            freq_prior_log_precision: l.mapv(f64::ln),
        }
    }

    #[test]
    fn reparam_freq_cases() {
        let tp = posterior(
            array![[1.0]],
            array![[2.0]],
            array![[0.0]],
            array![[1.0]],
            array![1.0],
        );
        // zero noise -> means
        let freq = reparam_freq(&tp, &array![[0.0]]).unwrap();
        assert_eq!(freq[[0, 0]], 1.0);
        // 1 + 2 * 0.5 = 2
        let freq = reparam_freq(&tp, &array![[0.5]]).unwrap();
        assert_eq!(freq[[0, 0]], 2.0);

        // r = 0, p = 1 -> identity on the noise
        let tp = posterior(
            array![[0.0, 0.0]],
            array![[1.0, 1.0]],
            Array2::zeros((1, 2)),
            Array2::ones((1, 2)),
            array![1.0],
        );
        let z = array![[0.3, -1.7]];
        assert_eq!(reparam_freq(&tp, &z).unwrap(), z);

        assert!(reparam_freq(&tp, &Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn reparam_weight_cases() {
        let tp = posterior(
            array![[0.0]],
            array![[1.0]],
            array![[-1.0]],
            array![[3.0]],
            array![1.0],
        );
        assert_eq!(reparam_weights(&tp, &array![[0.0]]).unwrap()[[0, 0]], -1.0);
        // -1 + 3 * 1 = 2, up to the exp(ln 3) round trip
        assert_abs_diff_eq!(
            reparam_weights(&tp, &array![[1.0]]).unwrap()[[0, 0]],
            2.0,
            epsilon = 1e-12
        );

        let tp = posterior(
            array![[0.0, 0.0]],
            array![[1.0, 1.0]],
            Array2::zeros((1, 2)),
            Array2::ones((1, 2)),
            array![1.0],
        );
        let e = array![[0.25, -4.0]];
        assert_eq!(reparam_weights(&tp, &e).unwrap(), e);
    }

    #[test]
    fn sources_zero_weights() {
        let freqs = array![[3.0, -1.0]];
        let weights = Array2::zeros((1, 2));
        let phases = array![0.1, 0.5];
        let out = eval_sources(&freqs, &weights, &phases, &[0.0, 0.5, 1.0], &[0.25]).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));
        assert!(out.derivs.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sources_constant_at_zero_frequency() {
        // J = 1, freq = 0, phase = 0: S(t) = sqrt(2) * w, derivative 0.
        let freqs = array![[0.0]];
        let weights = array![[0.7]];
        let phases = array![0.0];
        let out = eval_sources(&freqs, &weights, &phases, &[0.0, 0.3, 0.9], &[0.5]).unwrap();
        for &v in out.values.iter() {
            assert_abs_diff_eq!(v, 2.0f64.sqrt() * 0.7, epsilon = 1e-15);
        }
        assert_eq!(out.derivs[[0, 0]], 0.0);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        // weights kept modest so the h^2 truncation error of the central
        // difference stays below the 1e-6 gate even at |freq| = 50
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let ns = 2;
        let j = 5;
        let freqs = Array2::from_shape_fn((ns, j), |_| {
            50.0 * (2.0 * rng.random::<f64>() - 1.0)
        });
        let weights =
            Array2::from_shape_fn((ns, j), |_| 0.15 * rng.sample::<f64, _>(StandardNormal));
        let phases = Array1::from_shape_fn(j, |_| rng.random::<f64>() * std::f64::consts::TAU);
        let h = 1e-5;
        for &u in &[0.1, 0.4, 0.8] {
            let eval = eval_sources(&freqs, &weights, &phases, &[], &[u]).unwrap();
            let plus = eval_sources(&freqs, &weights, &phases, &[u + h], &[]).unwrap();
            let minus = eval_sources(&freqs, &weights, &phases, &[u - h], &[]).unwrap();
            for n in 0..ns {
                let fd = (plus.values[[n, 0]] - minus.values[[n, 0]]) / (2.0 * h);
                assert_abs_diff_eq!(eval.derivs[[n, 0]], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn monotonicity_values() {
        // all-zero derivatives: Ns * C * log(1/2)
        let derivs = Array2::zeros((2, 3));
        assert_abs_diff_eq!(
            monotonicity_logprob(&derivs, 4.0),
            6.0 * 0.5f64.ln(),
            epsilon = 1e-12
        );
        // saturation
        let derivs = Array2::from_elem((2, 3), 1e6);
        assert_eq!(monotonicity_logprob(&derivs, 4.0), 0.0);
        // single evaluation: log(1 / (1 + e^-1))
        let derivs = array![[1.0]];
        assert_abs_diff_eq!(
            monotonicity_logprob(&derivs, 1.0),
            -0.313_261_687_518_222_8,
            epsilon = 1e-12
        );
        // stability far in the infeasible tail
        assert!(monotonicity_logprob(&array![[-1e6]], 1.0).is_finite());
    }

    #[test]
    fn kl_freq_values() {
        // q equals prior
        let tp = posterior(
            Array2::zeros((2, 3)),
            Array2::ones((2, 3)),
            Array2::zeros((2, 3)),
            Array2::ones((2, 3)),
            Array1::ones(2),
        );
        assert_eq!(kl_freq(&tp), 0.0);

        // r = 1, p = 1, l = 1, single entry: 0.5 * (1 + 1 - 1 - 0) = 0.5
        let tp = posterior(
            array![[1.0]],
            array![[1.0]],
            array![[0.0]],
            array![[1.0]],
            array![1.0],
        );
        assert_abs_diff_eq!(kl_freq(&tp), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn kl_weights_values() {
        let tp = posterior(
            Array2::zeros((1, 4)),
            Array2::ones((1, 4)),
            Array2::zeros((1, 4)),
            Array2::ones((1, 4)),
            Array1::ones(1),
        );
        assert_eq!(kl_weights(&tp), 0.0);

        // m = 2, s = 1: 0.5 * (1 + 4 - 1 - 0) = 2
        let tp = posterior(
            array![[0.0]],
            array![[1.0]],
            array![[2.0]],
            array![[1.0]],
            array![1.0],
        );
        assert_abs_diff_eq!(kl_weights(&tp), 2.0, epsilon = 1e-15);
    }

    /// Monte Carlo estimate of KL(q || p) for factorized Gaussians, used as
    /// an independent oracle for the closed forms.
    fn mc_kl_diag(
        q_mean: &[f64],
        q_std: &[f64],
        p_std: &[f64],
        samples: usize,
        seed: u64,
    ) -> (f64, f64) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..samples {
            let mut term = 0.0;
            for i in 0..q_mean.len() {
                let x = q_mean[i] + q_std[i] * rng.sample::<f64, _>(StandardNormal);
                let log_q = -0.5 * ((x - q_mean[i]) / q_std[i]).powi(2) - q_std[i].ln();
                let log_p = -0.5 * (x / p_std[i]).powi(2) - p_std[i].ln();
                term += log_q - log_p;
            }
            sum += term;
            sum_sq += term * term;
        }
        let n = samples as f64;
        let mean = sum / n;
        let var = (sum_sq / n - mean * mean).max(0.0);
        (mean, (var / n).sqrt())
    }

    #[test]
    fn kl_freq_matches_monte_carlo() {
        let r = array![[0.4, -0.9], [1.3, 0.2]];
        let p = array![[0.8, 1.4], [0.5, 1.0]];
        let l = array![2.0, 0.7];
        let tp = posterior(
            r.clone(),
            p.clone(),
            Array2::zeros((2, 2)),
            Array2::ones((2, 2)),
            l.clone(),
        );
        let closed = kl_freq(&tp);
        let q_mean: Vec<f64> = r.iter().copied().collect();
        let q_std: Vec<f64> = p.iter().copied().collect();
        let p_std: Vec<f64> = (0..2)
            .flat_map(|n| std::iter::repeat(1.0 / l[n].sqrt()).take(2))
            .collect();
        let (mc, se) = mc_kl_diag(&q_mean, &q_std, &p_std, 1_000_000, 11);
        assert!(
            (closed - mc).abs() <= 3.0 * se,
            "closed {closed} vs mc {mc} (se {se})"
        );
    }

    #[test]
    fn kl_weights_matches_monte_carlo() {
        let m = array![[0.3, -1.1, 0.9]];
        let s = array![[1.7, 0.4, 0.9]];
        let tp = posterior(
            Array2::zeros((1, 3)),
            Array2::ones((1, 3)),
            m.clone(),
            s.clone(),
            Array1::ones(1),
        );
        let closed = kl_weights(&tp);
        let q_mean: Vec<f64> = m.iter().copied().collect();
        let q_std: Vec<f64> = s.iter().copied().collect();
        let (mc, se) = mc_kl_diag(&q_mean, &q_std, &[1.0, 1.0, 1.0], 1_000_000, 13);
        assert!(
            (closed - mc).abs() <= 3.0 * se,
            "closed {closed} vs mc {mc} (se {se})"
        );
    }

    #[test]
    fn prior_draws_have_prior_variance() {
        // Under r = 0, p^2 = 1/l the reparameterized frequencies follow the
        // prior; check the sample variance at l = 4 (variance 0.25).
        let l = 4.0f64;
        let tp = posterior(
            Array2::zeros((1, 1)),
            Array2::from_elem((1, 1), 1.0 / l.sqrt()),
            Array2::zeros((1, 1)),
            Array2::ones((1, 1)),
            array![l],
        );
        let n = 100_000;
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let noise = array![[normal.sample(&mut rng)]];
            let w = reparam_freq(&tp, &noise).unwrap()[[0, 0]];
            sum += w;
            sum_sq += w * w;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        // sampling se of the variance is ~ var * sqrt(2/n)
        let se = (1.0 / l) * (2.0 / n as f64).sqrt();
        assert!((var - 1.0 / l).abs() < 3.0 * se, "var {var} vs {}", 1.0 / l);
    }

    proptest! {
        #[test]
        fn kls_nonnegative(
            r in proptest::collection::vec(-5.0f64..5.0, 6),
            lp in proptest::collection::vec(-3.0f64..3.0, 6),
            m in proptest::collection::vec(-5.0f64..5.0, 6),
            ls in proptest::collection::vec(-3.0f64..3.0, 6),
            ll in proptest::collection::vec(-3.0f64..3.0, 2),
        ) {
            let tp = TemporalPosterior {
                freq_mean: Array2::from_shape_vec((2, 3), r).unwrap(),
                freq_log_std: Array2::from_shape_vec((2, 3), lp).unwrap(),
                weight_mean: Array2::from_shape_vec((2, 3), m).unwrap(),
                weight_log_std: Array2::from_shape_vec((2, 3), ls).unwrap(),
                freq_prior_log_precision: Array1::from_vec(ll),
            };
            prop_assert!(kl_freq(&tp) >= 0.0);
            prop_assert!(kl_weights(&tp) >= 0.0);
        }

        #[test]
        fn monotonicity_nondecreasing_in_derivs(
            base in proptest::collection::vec(-3.0f64..3.0, 4),
            bump in 0.0f64..2.0,
            idx in 0usize..4,
        ) {
            let derivs = Array2::from_shape_vec((2, 2), base).unwrap();
            let before = monotonicity_logprob(&derivs, 7.0);
            let mut bumped = derivs.clone();
            bumped[[idx / 2, idx % 2]] += bump;
            let after = monotonicity_logprob(&bumped, 7.0);
            prop_assert!(after >= before - 1e-12);
        }
    }
}
