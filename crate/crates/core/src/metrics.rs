//! Path statistics used to compare sampled and observed trajectories.

use nalgebra::{DMatrix, DVector};

use crate::error::{MsldsError, Result};
use crate::linalg::CompensatedSum;

/// Root-mean-square lag-`window` increment `||x_{t+window} - x_t||`, divided by
/// the pooled scale `sqrt(tr cov(x))`.
///
/// Dimensionless. Independent frames give `sqrt(2)`; a stationary AR(1) path
/// with coefficient `a` gives `sqrt(2 (1 - a^window))`; a constant path gives 0.
pub fn coherence_metric(obs: &DMatrix<f64>, window: usize) -> Result<f64> {
    let t_len = obs.nrows();
    if window == 0 {
        return Err(MsldsError::InvalidConfig("window must be positive".into()));
    }
    if t_len <= window {
        return Err(MsldsError::EmptyInput(format!("need more than {window} frames, got {t_len}")));
    }
    if obs.iter().any(|v| !v.is_finite()) {
        return Err(MsldsError::NonFinite("observations".into()));
    }
    let mean = obs.row_mean();
    let mut spread = CompensatedSum::default();
    for t in 0..t_len {
        spread.add((obs.row(t) - &mean).norm_squared());
    }
    let total_var = spread.value() / t_len as f64;
    let mut incr = CompensatedSum::default();
    for t in 0..t_len - window {
        incr.add((obs.row(t + window) - obs.row(t)).norm_squared());
    }
    let ms = incr.value() / (t_len - window) as f64;
    if total_var <= 0.0 {
        return Ok(0.0);
    }
    Ok((ms / total_var).sqrt())
}

/// Permutation `p` minimizing `Σ_s cost[(s, p[s])]`, by exhaustive search
/// (intended for the handful of states a model has).
pub fn best_permutation(cost: &DMatrix<f64>) -> Vec<usize> {
    let k = cost.nrows();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = (f64::INFINITY, perm.clone());
    permute(cost, &mut perm, 0, &mut best);
    best.1
}

fn permute(cost: &DMatrix<f64>, perm: &mut Vec<usize>, i: usize, best: &mut (f64, Vec<usize>)) {
    if i == perm.len() {
        let c: f64 = perm.iter().enumerate().map(|(s, &p)| cost[(s, p)]).sum();
        if c < best.0 {
            *best = (c, perm.clone());
        }
        return;
    }
    for j in i..perm.len() {
        perm.swap(i, j);
        permute(cost, perm, i + 1, best);
        perm.swap(i, j);
    }
}

/// Matches fitted means to reference means; entry `s` is the fitted state
/// assigned to reference state `s`.
pub fn match_states(reference: &[DVector<f64>], fitted: &[DVector<f64>]) -> Result<Vec<usize>> {
    if reference.len() != fitted.len() {
        return Err(MsldsError::DimensionMismatch { expected: reference.len(), found: fitted.len() });
    }
    let k = reference.len();
    let cost = DMatrix::from_fn(k, k, |i, j| (&reference[i] - &fitted[j]).norm_squared());
    Ok(best_permutation(&cost))
}
