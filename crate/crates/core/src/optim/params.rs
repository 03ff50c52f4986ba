//! Flat view of the unconstrained parameter space, shared by the optimizer
//! and the finite-difference oracle. Block order is fixed: mean maps, log
//! amplitude, log lengthscale, frequency means, frequency log-stds, weight
//! means, weight log-stds, prior log-precisions, raw time shifts, log noise.

use ndarray::{Array1, Array2};

use crate::model::ModelState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_sources: usize,
    pub n_rff: usize,
    pub n_features: usize,
    pub n_subjects: usize,
}

/// One contiguous block of the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamBlock {
    pub name: &'static str,
    pub range: std::ops::Range<usize>,
}

impl ParamLayout {
    pub fn of(state: &ModelState) -> Self {
        ParamLayout {
            n_sources: state.n_sources(),
            n_rff: state.n_rff(),
            n_features: state.n_features(),
            n_subjects: state.n_subjects(),
        }
    }

    pub fn len(&self) -> usize {
        self.blocks().last().map(|b| b.range.end).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn blocks(&self) -> Vec<ParamBlock> {
        let nj = self.n_sources * self.n_rff;
        let sizes = [
            ("mean_maps", self.n_sources * self.n_features),
            ("log_amplitude", 1),
            ("log_lengthscale", 1),
            ("freq_mean", nj),
            ("freq_log_std", nj),
            ("weight_mean", nj),
            ("weight_log_std", nj),
            ("freq_prior_log_precision", self.n_sources),
            ("time_shifts", self.n_subjects),
            ("log_noise_std", 1),
        ];
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for (name, size) in sizes {
            out.push(ParamBlock {
                name,
                range: start..start + size,
            });
            start += size;
        }
        out
    }

    pub fn block(&self, name: &str) -> ParamBlock {
        self.blocks()
            .into_iter()
            .find(|b| b.name == name)
            .unwrap_or_else(|| panic!("unknown parameter block {name}"))
    }
}

pub fn state_to_vec(state: &ModelState) -> Array1<f64> {
    let layout = ParamLayout::of(state);
    let mut v = Vec::with_capacity(layout.len());
    v.extend(state.spatial.mean_maps.iter());
    v.push(state.spatial.log_amplitude);
    v.push(state.spatial.log_lengthscale);
    v.extend(state.temporal.freq_mean.iter());
    v.extend(state.temporal.freq_log_std.iter());
    v.extend(state.temporal.weight_mean.iter());
    v.extend(state.temporal.weight_log_std.iter());
    v.extend(state.temporal.freq_prior_log_precision.iter());
    v.extend(state.time_shifts.raw.iter());
    v.push(state.log_noise_std);
    Array1::from_vec(v)
}

/// Rebuilds a state from a flat vector, carrying over the fixed phases and
/// grid from `template`.
pub fn vec_to_state(template: &ModelState, v: &Array1<f64>) -> ModelState {
    let layout = ParamLayout::of(template);
    assert_eq!(v.len(), layout.len(), "parameter vector length");
    let (ns, j, f, _p) = (
        layout.n_sources,
        layout.n_rff,
        layout.n_features,
        layout.n_subjects,
    );
    let slice = |name: &str| {
        let b = layout.block(name);
        v.slice(ndarray::s![b.range]).to_vec()
    };
    let arr2 = |name: &str, rows: usize, cols: usize| {
        Array2::from_shape_vec((rows, cols), slice(name)).expect("block shape")
    };
    let mut state = template.clone();
    state.spatial.mean_maps = arr2("mean_maps", ns, f);
    state.spatial.log_amplitude = v[layout.block("log_amplitude").range.start];
    state.spatial.log_lengthscale = v[layout.block("log_lengthscale").range.start];
    state.temporal.freq_mean = arr2("freq_mean", ns, j);
    state.temporal.freq_log_std = arr2("freq_log_std", ns, j);
    state.temporal.weight_mean = arr2("weight_mean", ns, j);
    state.temporal.weight_log_std = arr2("weight_log_std", ns, j);
    state.temporal.freq_prior_log_precision = Array1::from_vec(slice("freq_prior_log_precision"));
    state.time_shifts.raw = Array1::from_vec(slice("time_shifts"));
    state.log_noise_std = v[layout.block("log_noise_std").range.start];
    state
}
