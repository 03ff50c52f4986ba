//! Metrics and experiment harnesses: permutation/sign source matching,
//! time-shift correlation, model-selection sweeps, and the known-times
//! comparison against the FastICA baseline.

use itertools::Itertools;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ica;
use crate::model::{squash, Hyperparams, NoiseDraws, TimeShifts};
use crate::optim::{fit, FitConfig};
use crate::rff;
use crate::synth::{generate, sigmoid_sources, SynthConfig};

/// Pearson correlation; `None` when either input is (numerically) constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 1e-300 || vb <= 1e-300 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Resolution of the permutation and sign ambiguity between estimated and
/// true sources.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceMatch {
    /// `permutation[i]` is the estimated row assigned to truth row `i`.
    pub permutation: Vec<usize>,
    /// Sign applied to each matched estimate.
    pub signs: Vec<f64>,
    /// Absolute correlation of each matched pair.
    pub correlations: Vec<f64>,
    /// Rows whose correlation was undefined (constant input), reported as 0.
    pub degenerate: Vec<bool>,
    pub mean_correlation: f64,
}

/// Assignment of estimated to true rows maximizing total absolute Pearson
/// correlation, exhaustively over permutations (up to 8 sources).
pub fn match_sources(estimated: &Array2<f64>, truth: &Array2<f64>) -> Result<SourceMatch> {
    if estimated.dim() != truth.dim() {
        return Err(Error::DimensionMismatch(format!(
            "estimated {:?} vs truth {:?}",
            estimated.dim(),
            truth.dim()
        )));
    }
    let ns = truth.nrows();
    if ns > 8 {
        return Err(Error::InvalidParameter(
            "exhaustive matching supports up to 8 sources".into(),
        ));
    }

    // pairwise signed correlations, None for degenerate pairs
    let corr = Array2::from_shape_fn((ns, ns), |(i, j)| {
        pearson(
            truth.row(i).as_slice().expect("contiguous row"),
            estimated.row(j).as_slice().expect("contiguous row"),
        )
    });

    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..ns).permutations(ns) {
        let total: f64 = perm
            .iter()
            .enumerate()
            .map(|(i, &j)| corr[[i, j]].map(f64::abs).unwrap_or(0.0))
            .sum();
        if best.as_ref().map_or(true, |(b, _)| total > *b) {
            best = Some((total, perm));
        }
    }
    let (_, permutation) = best.expect("at least one permutation");

    let mut signs = Vec::with_capacity(ns);
    let mut correlations = Vec::with_capacity(ns);
    let mut degenerate = Vec::with_capacity(ns);
    for (i, &j) in permutation.iter().enumerate() {
        match corr[[i, j]] {
            Some(c) => {
                signs.push(if c < 0.0 { -1.0 } else { 1.0 });
                correlations.push(c.abs());
                degenerate.push(false);
            }
            None => {
                signs.push(1.0);
                correlations.push(0.0);
                degenerate.push(true);
            }
        }
    }
    let mean_correlation = correlations.iter().sum::<f64>() / ns as f64;
    Ok(SourceMatch {
        permutation,
        signs,
        correlations,
        degenerate,
        mean_correlation,
    })
}

/// Pearson correlation between squashed estimated time shifts and the true
/// times. Errors on zero-variance inputs.
pub fn timeshift_correlation(estimated: &TimeShifts, truth: &[f64]) -> Result<f64> {
    if estimated.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimated time shifts vs {} true times",
            estimated.len(),
            truth.len()
        )));
    }
    let est: Vec<f64> = estimated.raw.iter().map(|&r| squash(r)).collect();
    pearson(&est, truth).ok_or_else(|| Error::InvalidParameter("zero-variance times".into()))
}

/// One cell of a model-selection sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub fold: usize,
    pub n_sources: usize,
    pub final_elbo: f64,
    /// L2 norm of each posterior mean map.
    pub map_norms: Vec<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

/// Configuration of a model-selection sweep: data generated per fold from
/// `generator`, fitted once per candidate source count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub generator: SynthConfig,
    pub n_folds: usize,
    pub sources_range: Vec<usize>,
    pub hyper: Hyperparams,
    pub fit: FitConfig,
    /// Draw count for the reported final bound.
    pub n_mc_report: usize,
}

/// Runs the sweep. Each (fold, candidate) cell derives its seeds from the
/// cell coordinates alone, so results do not depend on execution order; per
/// cell failures are recorded without aborting the sweep.
pub fn model_selection_sweep(cfg: &SweepConfig) -> Result<Vec<SweepCell>> {
    cfg.generator.validate()?;
    let mut cells = Vec::with_capacity(cfg.n_folds * cfg.sources_range.len());
    for fold in 0..cfg.n_folds {
        let gen_cfg = SynthConfig {
            seed: cfg.generator.seed.wrapping_add(fold as u64),
            ..cfg.generator.clone()
        };
        let (data, _) = generate(&gen_cfg)?;
        for &ns in &cfg.sources_range {
            let hp = Hyperparams {
                n_sources: ns,
                ..cfg.hyper.clone()
            };
            let fit_cfg = FitConfig {
                seed: cfg
                    .fit
                    .seed
                    .wrapping_add(1000 * fold as u64)
                    .wrapping_add(ns as u64),
                ..cfg.fit.clone()
            };
            let cell = match fit(&data, &hp, &fit_cfg) {
                Ok(trace) => {
                    let state = &trace.final_state;
                    let elbo = evaluate_bound(state, &data, &hp, cfg.n_mc_report, fit_cfg.seed);
                    let map_norms = (0..ns)
                        .map(|n| {
                            state
                                .spatial
                                .mean_maps
                                .row(n)
                                .iter()
                                .map(|v| v * v)
                                .sum::<f64>()
                                .sqrt()
                        })
                        .collect();
                    SweepCell {
                        fold,
                        n_sources: ns,
                        final_elbo: elbo,
                        map_norms,
                        converged: trace.converged,
                        error: None,
                    }
                }
                Err(e) => SweepCell {
                    fold,
                    n_sources: ns,
                    final_elbo: f64::NAN,
                    map_norms: Vec::new(),
                    converged: false,
                    error: Some(e.to_string()),
                },
            };
            cells.push(cell);
        }
    }
    Ok(cells)
}

/// Bound at `state` averaged over `n_mc` fresh draws from `seed`.
pub fn evaluate_bound(
    state: &crate::model::ModelState,
    data: &crate::model::DataMatrix,
    hp: &Hyperparams,
    n_mc: usize,
    seed: u64,
) -> f64 {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed ^ 0x77d1_a3f0_0cc1_94e2);
    let draws: Vec<NoiseDraws> = (0..n_mc)
        .map(|_| NoiseDraws::sample(&mut rng, hp.n_sources, hp.n_features_rff, data.n_features()))
        .collect();
    let hp_eval = Hyperparams {
        n_mc,
        ..hp.clone()
    };
    crate::elbo::elbo(state, data, &hp_eval, &draws)
        .map(|b| b.total)
        .unwrap_or(f64::NAN)
}

/// Scores of one fitted model against the generator ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryScores {
    /// Matched absolute correlations of the spatial maps.
    pub map_correlations: Vec<f64>,
    /// Matched absolute correlations of the temporal sources on 100 uniform
    /// points of the respective time axes.
    pub source_correlations: Vec<f64>,
    /// Pearson correlation of squashed time shifts vs true times.
    pub timeshift_correlation: f64,
}

/// Scores a fitted state against ground truth: spatial maps by matched
/// correlation, temporal sources resampled onto 100 uniform points of the
/// estimated (respectively true) time axis, and the time-shift correlation.
pub fn score_recovery(
    state: &crate::model::ModelState,
    truth: &crate::synth::GroundTruth,
) -> Result<RecoveryScores> {
    let map_match = match_sources(&state.spatial.mean_maps, &truth.maps)?;

    let grid: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
    let est_sources = rff::eval_sources(
        &state.temporal.freq_mean,
        &state.temporal.weight_mean,
        &state.phases,
        &grid,
        &[0.0, 1.0],
    )?
    .values;
    let true_sources = sigmoid_sources(&truth.offsets, &grid);
    let source_match = match_sources(&est_sources, &true_sources)?;

    let ts_corr = timeshift_correlation(&state.time_shifts, &truth.times.to_vec())?;
    Ok(RecoveryScores {
        map_correlations: map_match.correlations,
        source_correlations: source_match.correlations,
        timeshift_correlation: ts_corr,
    })
}

/// Report of the known-times comparison between the model and FastICA.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IcaComparison {
    pub model_map_correlations: Vec<f64>,
    pub model_course_correlations: Vec<f64>,
    pub ica_map_correlations: Vec<f64>,
    pub ica_course_correlations: Vec<f64>,
    /// Mean over maps and courses for the model.
    pub model_mean: f64,
    /// Mean over maps and courses for FastICA.
    pub ica_mean: f64,
}

/// Generates data with known times, fits the model (times held fixed at the
/// observed values) and the FastICA baseline, and reports matched
/// correlations of spatial maps and per-subject temporal courses.
pub fn compare_with_ica(
    generator: &SynthConfig,
    hp: &Hyperparams,
    fit_cfg: &FitConfig,
) -> Result<IcaComparison> {
    let gen_cfg = SynthConfig {
        hide_times: false,
        ..generator.clone()
    };
    let (data, truth) = generate(&gen_cfg)?;
    let times: Vec<f64> = truth.times.to_vec();
    let true_courses = sigmoid_sources(&truth.offsets, &times);

    let trace = fit(&data, hp, fit_cfg)?;
    let state = &trace.final_state;
    let est_courses = rff::eval_sources(
        &state.temporal.freq_mean,
        &state.temporal.weight_mean,
        &state.phases,
        &state.time_shifts.positions().to_vec(),
        &[0.0, 1.0],
    )?
    .values;
    let model_maps = match_sources(&state.spatial.mean_maps, &truth.maps)?;
    let model_courses = match_sources(&est_courses, &true_courses)?;

    let ns = generator.n_sources;
    let white = ica::whiten(&data.values, ns)?;
    let ica_out = ica::fastica(&white, ns, 1000, 1e-8, fit_cfg.seed)?;
    // ICA's courses live per subject (P x k); its sources are the maps
    let ica_courses_t = ica_out.courses.t().to_owned();
    let ica_maps = match_sources(&ica_out.sources, &truth.maps)?;
    let ica_courses = match_sources(&ica_courses_t, &true_courses)?;

    let mean = |a: &[f64], b: &[f64]| {
        (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (a.len() + b.len()) as f64
    };
    Ok(IcaComparison {
        model_mean: mean(&model_maps.correlations, &model_courses.correlations),
        ica_mean: mean(&ica_maps.correlations, &ica_courses.correlations),
        model_map_correlations: model_maps.correlations,
        model_course_correlations: model_courses.correlations,
        ica_map_correlations: ica_maps.correlations,
        ica_course_correlations: ica_courses.correlations,
    })
}
