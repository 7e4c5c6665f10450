use nalgebra::DMatrix;

use super::eigen::approx_ev;
use super::linesearch::segment_search;
use super::penalty::SmoothObjective;
use super::SolverConfig;
use crate::error::{MsldsError, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FwStop {
    /// Duality gap fell to `eps / 10`.
    GapReached,
    /// Step cap hit.
    MaxSteps,
    /// The line search found no improving step.
    NoProgress,
    /// The certified lower bound `phi − gap` exceeds the caller's target, so
    /// the target is unreachable on the spectrahedron.
    AboveTarget,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FwTraceRow {
    pub iteration: usize,
    pub phi: f64,
    pub gap: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone)]
pub struct FwOutcome {
    pub x: DMatrix<f64>,
    pub value: f64,
    pub gap: f64,
    pub iterations: usize,
    pub stop: FwStop,
    pub trace: Vec<FwTraceRow>,
}

/// `I / n`, the strictly interior starting point of the unit-trace spectrahedron.
pub fn uniform_start(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n) / n as f64
}

/// Frank-Wolfe on `{X ⪰ 0, tr X = 1}` starting from `start`.
///
/// Each step moves toward the rank-one vertex `v vᵀ`, `v` the top eigenvector
/// of `−∇phi`, by the step found with a 1-D search; the value never increases.
/// With `target`, also stops once `phi − gap > target`.
pub fn frank_wolfe(
    phi: &dyn SmoothObjective,
    start: DMatrix<f64>,
    cfg: &SolverConfig,
    target: Option<f64>,
) -> Result<FwOutcome> {
    let mut x = start;
    let mut value = phi.value(&x);
    if !value.is_finite() {
        return Err(MsldsError::Solver(format!("objective not finite at the starting point ({value})")));
    }
    let mut trace = Vec::new();
    let mut gap = f64::INFINITY;
    for k in 0..cfg.max_fw_steps {
        let g = phi.gradient(&x);
        if !linalg::is_finite_matrix(&g) {
            return Err(MsldsError::Solver(format!("non-finite gradient at iteration {k}")));
        }
        let neg = -&g;
        let v = approx_ev(&neg, cfg);
        let gv = &g * &v;
        gap = g.dot(&x) - v.dot(&gv);
        if gap <= cfg.eps / 10.0 {
            return Ok(FwOutcome { x, value, gap, iterations: k, stop: FwStop::GapReached, trace });
        }
        if let Some(t) = target {
            // slack for an inexact eigenvector
            let ev_err = cfg.ev_tol * g.abs().row_sum().max();
            if value - gap - ev_err > t {
                return Ok(FwOutcome { x, value, gap, iterations: k, stop: FwStop::AboveTarget, trace });
            }
        }
        let dir = &v * v.transpose() - &x;
        let (gamma, new_value) = {
            let along = phi.along(&x, &dir);
            segment_search(along, cfg.linesearch_tol)
        };
        if cfg.record_trace {
            trace.push(FwTraceRow { iteration: k, phi: value, gap, gamma });
        }
        if gamma == 0.0 || !(new_value < value) {
            return Ok(FwOutcome { x, value, gap, iterations: k + 1, stop: FwStop::NoProgress, trace });
        }
        if !new_value.is_finite() {
            return Err(MsldsError::Solver(format!("non-finite objective at iteration {k}")));
        }
        x = &x * (1.0 - gamma) + &v * v.transpose() * gamma;
        value = new_value;
        if cfg.check_invariants {
            check_spectrahedron(&x, k)?;
        }
    }
    Ok(FwOutcome { x, value, gap, iterations: cfg.max_fw_steps, stop: FwStop::MaxSteps, trace })
}

fn check_spectrahedron(x: &DMatrix<f64>, k: usize) -> Result<()> {
    let min = linalg::min_eigenvalue(x);
    let tr = x.trace();
    if min < -1e-10 || (tr - 1.0).abs() > 1e-12 {
        return Err(MsldsError::Solver(format!(
            "iterate left the spectrahedron at step {k}: min eigenvalue {min:e}, trace {tr}"
        )));
    }
    Ok(())
}
