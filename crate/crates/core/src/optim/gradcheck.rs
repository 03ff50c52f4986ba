//! Finite-difference gradient oracle. Shipped as a first-class operation:
//! the whole artifact hinges on the analytic gradients, so their check is
//! part of the public surface, not only of the test suite.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::grad::grad_elbo;
use super::params::{state_to_vec, vec_to_state, ParamLayout};
use crate::elbo::elbo;
use crate::error::Result;
use crate::model::{DataMatrix, Hyperparams, ModelState, NoiseDraws};

/// Central-difference gradient of the bound over the flat unconstrained
/// parameter vector, using the same noise draws for every evaluation.
pub fn fd_gradient(
    state: &ModelState,
    data: &DataMatrix,
    hp: &Hyperparams,
    draws: &[NoiseDraws],
    step: f64,
) -> Result<Array1<f64>> {
    let base = state_to_vec(state);
    let mut grad = Array1::zeros(base.len());
    let mut point = base.clone();
    for i in 0..base.len() {
        point[i] = base[i] + step;
        let plus = elbo(&vec_to_state(state, &point), data, hp, draws)?.total;
        point[i] = base[i] - step;
        let minus = elbo(&vec_to_state(state, &point), data, hp, draws)?.total;
        point[i] = base[i];
        grad[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Comparison of one parameter block against the oracle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckBlock {
    pub name: String,
    pub size: usize,
    pub max_abs_diff: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Full gradient check report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    pub blocks: Vec<GradCheckBlock>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Checks every analytic gradient coordinate against central finite
/// differences. A coordinate passes when `|analytic - fd|` is below
/// `abs_floor` or below `rel_tol * max(|analytic|, |fd|)`.
pub fn gradient_check(
    state: &ModelState,
    data: &DataMatrix,
    hp: &Hyperparams,
    draws: &[NoiseDraws],
    step: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = grad_elbo(state, data, hp, draws)?;
    let analytic = analytic.to_vec();
    let numeric = fd_gradient(state, data, hp, draws, step)?;
    let layout = ParamLayout::of(state);

    let mut blocks = Vec::new();
    let mut global_max = 0.0f64;
    let mut all_passed = true;
    for block in layout.blocks() {
        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        let mut passed = true;
        for i in block.range.clone() {
            let (a, f) = (analytic[i], numeric[i]);
            let diff = (a - f).abs();
            let denom = a.abs().max(f.abs());
            let rel = if denom > 0.0 { diff / denom } else { 0.0 };
            max_abs = max_abs.max(diff);
            if diff > abs_floor {
                max_rel = max_rel.max(rel);
                if rel >= rel_tol {
                    passed = false;
                }
            }
        }
        global_max = global_max.max(max_rel);
        all_passed &= passed;
        blocks.push(GradCheckBlock {
            name: block.name.to_string(),
            size: block.range.len(),
            max_abs_diff: max_abs,
            max_rel_err: max_rel,
            passed,
        });
    }
    Ok(GradCheckReport {
        step,
        rel_tol,
        abs_floor,
        blocks,
        max_rel_err: global_max,
        passed: all_passed,
    })
}
