//! Model state, hyperparameters, and shared numerical conventions.
//!
//! Every positive parameter is stored as an unconstrained log and
//! exponentiated on read, so gradient steps in the unconstrained space can
//! never leave the feasible set. Time shifts are unconstrained reals mapped
//! into (0, 1) by the logistic [`squash`] map.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance floor for per-feature posterior standard deviations. Values are
/// floored on read (not in the stored logs), so the optimizer keeps its
/// gradient direction while closed forms stay finite.
pub const STD_FLOOR: f64 = 1e-6;

/// Feature layout of a data matrix: an H x W lattice or an unstructured
/// flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridGeometry {
    Flat { len: usize },
    Lattice { height: usize, width: usize },
}

impl GridGeometry {
    pub fn len(&self) -> usize {
        match *self {
            GridGeometry::Flat { len } => len,
            GridGeometry::Lattice { height, width } => height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lattice dimensions; a flat layout behaves as a 1 x F lattice.
    pub fn dims(&self) -> (usize, usize) {
        match *self {
            GridGeometry::Flat { len } => (1, len),
            GridGeometry::Lattice { height, width } => (height, width),
        }
    }
}

/// Observed data: P subjects x F features, with optional per-subject
/// observation times in [0, 1].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataMatrix {
    pub values: Array2<f64>,
    pub observed_times: Option<Array1<f64>>,
    pub grid: GridGeometry,
}

impl DataMatrix {
    pub fn new(
        values: Array2<f64>,
        observed_times: Option<Array1<f64>>,
        grid: GridGeometry,
    ) -> Result<Self> {
        if grid.len() != values.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "grid describes {} features but data has {} columns",
                grid.len(),
                values.ncols()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("data matrix".into()));
        }
        if let Some(times) = &observed_times {
            if times.len() != values.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "{} observed times for {} subjects",
                    times.len(),
                    values.nrows()
                )));
            }
            if !times.iter().all(|t| t.is_finite()) {
                return Err(Error::NonFinite("observed times".into()));
            }
        }
        Ok(DataMatrix {
            values,
            observed_times,
            grid,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }
}

/// Logistic map from an unconstrained time-shift parameter to model time in
/// (0, 1). `squash(0) = 0.5`.
pub fn squash(raw: f64) -> f64 {
    1.0 / (1.0 + (-raw).exp())
}

/// Inverse of [`squash`]; inputs are clamped away from {0, 1} so boundary
/// observation times stay finite.
pub fn squash_inv(t: f64) -> f64 {
    let t = t.clamp(1e-9, 1.0 - 1e-9);
    (t / (1.0 - t)).ln()
}

/// Per-source variational parameters of the temporal model: Gaussian
/// posteriors over random-feature frequencies and weights, plus the learned
/// prior precision on frequencies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemporalPosterior {
    /// Frequency posterior means, Ns x J.
    pub freq_mean: Array2<f64>,
    /// Log of frequency posterior standard deviations, Ns x J.
    pub freq_log_std: Array2<f64>,
    /// Weight posterior means, Ns x J.
    pub weight_mean: Array2<f64>,
    /// Log of weight posterior standard deviations, Ns x J.
    pub weight_log_std: Array2<f64>,
    /// Log of the per-source prior precision on frequencies, length Ns.
    pub freq_prior_log_precision: Array1<f64>,
}

impl TemporalPosterior {
    pub fn n_sources(&self) -> usize {
        self.freq_mean.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.freq_mean.ncols()
    }

    /// Frequency posterior std devs, floored at [`STD_FLOOR`].
    pub fn freq_std(&self) -> Array2<f64> {
        self.freq_log_std.mapv(|v| v.exp().max(STD_FLOOR))
    }

    /// Weight posterior std devs, floored at [`STD_FLOOR`].
    pub fn weight_std(&self) -> Array2<f64> {
        self.weight_log_std.mapv(|v| v.exp().max(STD_FLOOR))
    }

    /// Prior precisions on frequencies.
    pub fn freq_prior_precision(&self) -> Array1<f64> {
        self.freq_prior_log_precision
            .mapv(|v| v.exp().max(f64::MIN_POSITIVE))
    }

    /// Number of std-dev entries currently pinned at the read floor.
    pub fn degenerate_count(&self) -> usize {
        self.freq_log_std
            .iter()
            .chain(self.weight_log_std.iter())
            .filter(|v| v.exp() < STD_FLOOR)
            .count()
    }
}

/// Variational posterior over spatial maps: per-source mean maps plus the
/// two scalars of the shared structured covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpatialPosterior {
    /// Posterior mean maps, Ns x F.
    pub mean_maps: Array2<f64>,
    /// Log kernel amplitude.
    pub log_amplitude: f64,
    /// Log kernel lengthscale, in lattice-cell units.
    pub log_lengthscale: f64,
    pub grid: GridGeometry,
}

impl SpatialPosterior {
    pub fn n_sources(&self) -> usize {
        self.mean_maps.nrows()
    }

    pub fn amplitude(&self) -> f64 {
        self.log_amplitude.exp().max(f64::MIN_POSITIVE)
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp().max(f64::MIN_POSITIVE)
    }
}

/// Per-subject latent time positions, stored unconstrained; [`squash`] maps
/// them onto the model time axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimeShifts {
    pub raw: Array1<f64>,
}

impl TimeShifts {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Squashed time positions in (0, 1).
    pub fn positions(&self) -> Array1<f64> {
        self.raw.mapv(squash)
    }
}

/// Fixed model hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Observation noise standard deviation.
    pub noise_std: f64,
    /// Sharpness of the monotonicity constraint likelihood.
    pub sharpness: f64,
    /// Number of latent sources Ns.
    pub n_sources: usize,
    /// Number of random features J per source.
    pub n_features_rff: usize,
    /// Time points in [0, 1] where monotonicity is enforced.
    pub control_points: Vec<f64>,
    /// Monte Carlo samples per bound evaluation.
    pub n_mc: usize,
}

impl Hyperparams {
    pub fn new(noise_std: f64, sharpness: f64, n_sources: usize, n_features_rff: usize) -> Self {
        Hyperparams {
            noise_std,
            sharpness,
            n_sources,
            n_features_rff,
            control_points: uniform_control_points(32),
            n_mc: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std > 0.0) {
            return Err(Error::InvalidParameter("noise_std must be > 0".into()));
        }
        if !(self.sharpness > 0.0) {
            return Err(Error::InvalidParameter("sharpness must be > 0".into()));
        }
        if self.n_sources == 0 {
            return Err(Error::InvalidParameter("n_sources must be >= 1".into()));
        }
        if self.n_features_rff == 0 {
            return Err(Error::InvalidParameter(
                "n_features_rff must be >= 1".into(),
            ));
        }
        if self.n_mc == 0 {
            return Err(Error::InvalidParameter("n_mc must be >= 1".into()));
        }
        if self.control_points.len() < 2 {
            return Err(Error::InvalidParameter(
                "need at least 2 control points".into(),
            ));
        }
        let sorted = self
            .control_points
            .windows(2)
            .all(|w| w[0] <= w[1]);
        let in_range = self
            .control_points
            .iter()
            .all(|u| (0.0..=1.0).contains(u));
        if !sorted || !in_range {
            return Err(Error::InvalidParameter(
                "control points must be sorted within [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// `count` uniformly spaced points spanning [0, 1].
pub fn uniform_control_points(count: usize) -> Vec<f64> {
    assert!(count >= 2);
    (0..count)
        .map(|i| i as f64 / (count - 1) as f64)
        .collect()
}

/// Standard-normal noise feeding the three reparameterization maps.
#[derive(Debug, Clone)]
pub struct NoiseDraws {
    /// Noise for the frequency posterior, Ns x J.
    pub freq: Array2<f64>,
    /// Noise for the weight posterior, Ns x J.
    pub weight: Array2<f64>,
    /// Noise for the spatial maps, Ns x F.
    pub map: Array2<f64>,
}

impl NoiseDraws {
    pub fn sample<R: Rng>(rng: &mut R, n_sources: usize, n_rff: usize, n_features: usize) -> Self {
        let mut draw = |rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
        };
        let freq = draw(n_sources, n_rff);
        let weight = draw(n_sources, n_rff);
        let map = draw(n_sources, n_features);
        NoiseDraws { freq, weight, map }
    }

    /// All-zero draws: the reparameterizations collapse to posterior means.
    pub fn zeros(n_sources: usize, n_rff: usize, n_features: usize) -> Self {
        NoiseDraws {
            freq: Array2::zeros((n_sources, n_rff)),
            weight: Array2::zeros((n_sources, n_rff)),
            map: Array2::zeros((n_sources, n_features)),
        }
    }
}

/// The five additive terms of the bound, plus their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub loglik: f64,
    pub constraint: f64,
    pub kl_spatial: f64,
    pub kl_freq: f64,
    pub kl_weights: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn new(
        loglik: f64,
        constraint: f64,
        kl_spatial: f64,
        kl_freq: f64,
        kl_weights: f64,
    ) -> Self {
        ElboBreakdown {
            loglik,
            constraint,
            kl_spatial,
            kl_freq,
            kl_weights,
            total: loglik + constraint - kl_spatial - kl_freq - kl_weights,
        }
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            (self.loglik, "loglik"),
            (self.constraint, "constraint"),
            (self.kl_spatial, "kl_spatial"),
            (self.kl_freq, "kl_freq"),
            (self.kl_weights, "kl_weights"),
        ]
        .into_iter()
        .find(|(v, _)| !v.is_finite())
        .map(|(_, name)| name)
    }
}

/// Complete mutable model state: the three variational blocks, the noise
/// level, and the fixed random-feature phases drawn once at initialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelState {
    pub temporal: TemporalPosterior,
    pub spatial: SpatialPosterior,
    pub time_shifts: TimeShifts,
    /// Log observation-noise std; fixed unless sigma learning is enabled.
    pub log_noise_std: f64,
    /// Fixed cosine-feature phases in [0, 2pi), length J.
    pub phases: Array1<f64>,
}

impl ModelState {
    pub fn noise_std(&self) -> f64 {
        self.log_noise_std.exp().max(STD_FLOOR)
    }

    pub fn n_sources(&self) -> usize {
        self.temporal.n_sources()
    }

    pub fn n_rff(&self) -> usize {
        self.temporal.n_features()
    }

    pub fn n_features(&self) -> usize {
        self.spatial.mean_maps.ncols()
    }

    pub fn n_subjects(&self) -> usize {
        self.time_shifts.len()
    }
}

/// Deterministic initial state for `data` under `hp`.
///
/// Frequency means start at 0 with unit std, weight means at small normal
/// draws (std 0.01) to break source symmetry, prior precisions at 1, mean
/// maps at 0, amplitude 1, lengthscale 2 cells. Time shifts start at the
/// inverse-squashed observed times when present, else at 0 (model time 0.5).
pub fn init_model(data: &DataMatrix, hp: &Hyperparams, seed: u64) -> Result<ModelState> {
    hp.validate()?;
    let ns = hp.n_sources;
    let j = hp.n_features_rff;
    let f = data.n_features();
    let p = data.n_subjects();

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let phases = Array1::from_shape_fn(j, |_| rng.random::<f64>() * std::f64::consts::TAU);
    let weight_mean =
        Array2::from_shape_fn((ns, j), |_| 0.01 * rng.sample::<f64, _>(StandardNormal));

    let temporal = TemporalPosterior {
        freq_mean: Array2::zeros((ns, j)),
        freq_log_std: Array2::zeros((ns, j)),
        weight_mean,
        weight_log_std: Array2::zeros((ns, j)),
        freq_prior_log_precision: Array1::zeros(ns),
    };
    let spatial = SpatialPosterior {
        mean_maps: Array2::zeros((ns, f)),
        log_amplitude: 0.0,
        log_lengthscale: 2.0f64.ln(),
        grid: data.grid,
    };
    let raw = match &data.observed_times {
        Some(times) => times.mapv(squash_inv),
        None => Array1::zeros(p),
    };

    Ok(ModelState {
        temporal,
        spatial,
        time_shifts: TimeShifts { raw },
        log_noise_std: hp.noise_std.ln(),
        phases,
    })
}

/// Self-describing snapshot of a model: everything needed to resume or
/// replay a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub seed: u64,
    pub hyperparams: Hyperparams,
    pub state: ModelState,
}

impl Checkpoint {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn new(seed: u64, hyperparams: Hyperparams, state: ModelState) -> Self {
        Checkpoint {
            format_version: Self::FORMAT_VERSION,
            seed,
            hyperparams,
            state,
        }
    }
}
