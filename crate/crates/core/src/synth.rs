//! Synthetic benchmark generator: sigmoid temporal sources, Gaussian-blob
//! spatial maps, mixed observations with Gaussian noise, and ground-truth
//! bookkeeping.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DataMatrix, GridGeometry};

/// Generator configuration. Defaults reproduce the standard benchmark:
/// three sigmoid sources with offsets (0.25, 0.5, 0.75), blob maps centered
/// on the thirds of a 30 x 30 lattice with 4-cell widths, 40 candidate time
/// points, 50 images, noise at 5% of the clean signal peak, and hidden
/// observation times (a pure cross-sectional setting).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_sources: usize,
    /// Sigmoid offsets, one per source.
    pub offsets: Vec<f64>,
    /// Blob centers on the lattice, one (row, col) per source.
    pub centers: Vec<(f64, f64)>,
    /// Blob widths in cells, one per source.
    pub widths: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub n_timepoints: usize,
    pub n_images: usize,
    /// Absolute noise std; `None` uses 5% of the clean signal peak.
    pub noise_std: Option<f64>,
    /// Drop the observation times from the generated data.
    pub hide_times: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let (height, width) = (30, 30);
        SynthConfig {
            n_sources: 3,
            offsets: vec![0.25, 0.5, 0.75],
            centers: default_centers(3, height, width),
            widths: vec![4.0; 3],
            height,
            width,
            n_timepoints: 40,
            n_images: 50,
            noise_std: None,
            hide_times: true,
            seed: 0,
        }
    }
}

/// Blob centers at the centers of the diagonal n-ths of the lattice.
pub fn default_centers(n_sources: usize, height: usize, width: usize) -> Vec<(f64, f64)> {
    (0..n_sources)
        .map(|i| {
            let frac = (2 * i + 1) as f64 / (2 * n_sources) as f64;
            (frac * height as f64, frac * width as f64)
        })
        .collect()
}

impl SynthConfig {
    /// n-source variant of the default configuration, with offsets spread
    /// uniformly in (0, 1) and centers on the diagonal n-ths.
    pub fn with_sources(n_sources: usize) -> Self {
        let base = SynthConfig::default();
        SynthConfig {
            n_sources,
            offsets: (0..n_sources)
                .map(|i| (i + 1) as f64 / (n_sources + 1) as f64)
                .collect(),
            centers: default_centers(n_sources, base.height, base.width),
            widths: vec![4.0; n_sources],
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sources == 0 || self.n_images == 0 || self.n_timepoints == 0 {
            return Err(Error::InvalidParameter(
                "sources, images, and timepoints must be >= 1".into(),
            ));
        }
        if self.offsets.len() != self.n_sources
            || self.centers.len() != self.n_sources
            || self.widths.len() != self.n_sources
        {
            return Err(Error::InvalidParameter(format!(
                "offsets/centers/widths must each have length {}",
                self.n_sources
            )));
        }
        for &(ci, cj) in &self.centers {
            if !(0.0..=self.height as f64).contains(&ci)
                || !(0.0..=self.width as f64).contains(&cj)
            {
                return Err(Error::InvalidParameter(format!(
                    "center ({ci}, {cj}) outside the {}x{} lattice",
                    self.height, self.width
                )));
            }
        }
        if self.widths.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidParameter("widths must be > 0".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> GridGeometry {
        GridGeometry::Lattice {
            height: self.height,
            width: self.width,
        }
    }
}

/// Everything needed to score a recovery against the generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub offsets: Vec<f64>,
    /// True spatial maps, Ns x F.
    pub maps: Array2<f64>,
    /// True time of each image, length n_images.
    pub times: Array1<f64>,
    /// Realized noise std.
    pub noise_std: f64,
    pub seed: u64,
}

impl GroundTruth {
    /// True sources evaluated at `times`.
    pub fn sources_at(&self, times: &[f64]) -> Array2<f64> {
        sigmoid_sources(&self.offsets, times)
    }
}

/// `S_i(t) = 1 / (1 + exp(-t + offset_i))`, one row per source.
pub fn sigmoid_sources(offsets: &[f64], times: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((offsets.len(), times.len()), |(n, t)| {
        1.0 / (1.0 + (-times[t] + offsets[n]).exp())
    })
}

/// Gaussian activation maps with peak value 1:
/// `A[n, (i, j)] = exp(-((i - ci)^2 + (j - cj)^2) / (2 w^2))`.
pub fn gaussian_maps(cfg: &SynthConfig) -> Array2<f64> {
    let f = cfg.height * cfg.width;
    Array2::from_shape_fn((cfg.n_sources, f), |(n, idx)| {
        let (i, j) = ((idx / cfg.width) as f64, (idx % cfg.width) as f64);
        let (ci, cj) = cfg.centers[n];
        let w = cfg.widths[n];
        let d2 = (i - ci).powi(2) + (j - cj).powi(2);
        (-d2 / (2.0 * w * w)).exp()
    })
}

/// Generates a dataset: `n_timepoints` uniform times, `n_images` sampled
/// among them with replacement, `Y = S(t)^T A + noise`. With `hide_times`
/// the observation times are absent from the data (they remain in the
/// ground truth).
pub fn generate(cfg: &SynthConfig) -> Result<(DataMatrix, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

    let timepoints: Vec<f64> = (0..cfg.n_timepoints).map(|_| rng.random::<f64>()).collect();
    let times = Array1::from_shape_fn(cfg.n_images, |_| {
        timepoints[rng.random_range(0..cfg.n_timepoints)]
    });

    let maps = gaussian_maps(cfg);
    let times_vec: Vec<f64> = times.to_vec();
    let sources = sigmoid_sources(&cfg.offsets, &times_vec);
    let clean = sources.t().dot(&maps);

    let noise_std = cfg.noise_std.unwrap_or_else(|| {
        0.05 * clean.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    });
    let noise = Array2::from_shape_fn(clean.dim(), |_| {
        noise_std * rng.sample::<f64, _>(StandardNormal)
    });
    let values = &clean + &noise;

    let observed = if cfg.hide_times {
        None
    } else {
        Some(times.clone())
    };
    let data = DataMatrix::new(values, observed, cfg.grid())?;
    let truth = GroundTruth {
        offsets: cfg.offsets.clone(),
        maps,
        times,
        noise_std,
        seed: cfg.seed,
    };
    Ok((data, truth))
}
