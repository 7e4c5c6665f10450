//! Outer search turning the penalty feasibility oracle into a constrained
//! minimizer: solve for feasibility, then repeatedly ask for a feasible point
//! with objective at most `U − step`, doubling the step on success and
//! halving it on failure until it drops below `eps`.

use nalgebra::DMatrix;

use super::frank_wolfe::{frank_wolfe, uniform_start, FwStop, FwTraceRow};
use super::penalty::{Penalty, SmoothObjective};
use super::problem::{ConvexProblem, Functional};
use super::rescale::{rescale, RescaledProblem};
use super::SolverConfig;
use crate::error::{MsldsError, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchStatus {
    Success,
    Fail,
}

#[derive(Debug, Clone)]
pub struct FeasibilityResult {
    pub status: SearchStatus,
    /// Solution in the original variable.
    pub x: DMatrix<f64>,
    /// Objective at `x`.
    pub objective: f64,
    /// Penalty of the original constraints at `x` (`−∞` without constraints).
    pub phi: f64,
    /// Number of outer solves after the initial feasibility solve.
    pub outer_steps: usize,
    /// Halvings of the step size.
    pub halvings: usize,
    pub fw_iterations: usize,
    /// The step size exceeded `cfg.step_cap` (objective apparently unbounded below).
    pub cap_hit: bool,
    /// `(solve index, row)` pairs when `cfg.record_trace` is set.
    pub trace: Vec<(usize, FwTraceRow)>,
}

pub fn feasibility_search(prob: &ConvexProblem, cfg: &SolverConfig) -> Result<FeasibilityResult> {
    feasibility_search_from(prob, cfg, None)
}

/// As [`feasibility_search`], warm-started from `start` (original variable)
/// when it is PSD; a start beyond the trace bound is scaled back onto it.
pub fn feasibility_search_from(
    prob: &ConvexProblem,
    cfg: &SolverConfig,
    start: Option<&DMatrix<f64>>,
) -> Result<FeasibilityResult> {
    cfg.validate()?;
    let rp = rescale(prob)?;
    let y0 = start.and_then(|x| warm_start(&rp, x)).unwrap_or_else(|| uniform_start(rp.problem.dim));

    let threshold = cfg.accept_factor * cfg.eps;
    // without constraints every point of the spectrahedron is feasible
    let base = if rp.problem.n_constraints() > 0 { Some(Penalty::for_problem(&rp.problem, cfg.eps)?) } else { None };
    let base_ok = |x: &DMatrix<f64>| base.as_ref().is_none_or(|b| b.value(x) <= threshold);
    let h: &dyn Functional = rp.problem.objective.as_ref();
    let floor = rp.problem.objective_floor;
    // the quantity the outer search drives down
    let level = |hv: f64| match floor {
        Some(f) => (hv - f).max(0.0).sqrt(),
        None => hv,
    };
    let mut trace = Vec::new();

    let mut fw_iterations = 0;
    let mut y = y0;
    if let Some(b) = &base {
        let first = frank_wolfe(b, y, cfg, Some(threshold))?;
        fw_iterations += first.iterations;
        trace.extend(first.trace.iter().map(|r| (0, *r)));
        y = first.x;
        if first.value > threshold || !h.value(&y).is_finite() {
            log::debug!("feasibility solve ended at phi = {:e} ({:?})", first.value, first.stop);
            return Ok(FeasibilityResult {
                status: SearchStatus::Fail,
                x: rp.extract(&y),
                objective: h.value(&y),
                phi: first.value,
                outer_steps: 0,
                halvings: 0,
                fw_iterations,
                cap_hit: false,
                trace,
            });
        }
    }
    let mut u = h.value(&y);
    if !u.is_finite() {
        return Err(MsldsError::Solver(format!("objective not finite at the starting point ({u})")));
    }

    let mut step = 1.0;
    let mut outer = 0;
    let mut halvings = 0;
    let mut cap_hit = false;
    while step >= cfg.eps && outer < cfg.max_outer_steps {
        outer += 1;
        let lvl = level(u);
        let goal = lvl - step;
        let accepted = if floor.is_some() && goal < 0.0 {
            // below the known lower bound; no solve needed
            None
        } else {
            let (c, offset) = match floor {
                // h − floor <= goal², scaled to first order in sqrt(h − floor)
                Some(f) => {
                    let c = 0.5 / goal.max(cfg.eps);
                    (c, c * (f + goal * goal))
                }
                None => (1.0, goal),
            };
            let pen = match &base {
                Some(_) => Penalty::for_problem(&rp.problem, cfg.eps)?.with_scaled_extra(h, c, offset, cfg.eps),
                None => Penalty::single(h, c, offset, cfg.eps),
            };
            let out = frank_wolfe(&pen, y.clone(), cfg, Some(threshold))?;
            fw_iterations += out.iterations;
            trace.extend(out.trace.iter().map(|r| (outer, *r)));
            let h_new = h.value(&out.x);
            let feasible = out.value <= threshold && out.stop != FwStop::AboveTarget;
            (feasible && level(h_new) < lvl && h_new <= u && base_ok(&out.x)).then_some((out.x, h_new))
        };
        match accepted {
            Some((x, h_new)) => {
                y = x;
                u = h_new;
                step *= 2.0;
                if step > cfg.step_cap {
                    cap_hit = true;
                    log::warn!("feasibility search step exceeded {:e}; objective looks unbounded below", cfg.step_cap);
                    break;
                }
            }
            None => {
                step *= 0.5;
                halvings += 1;
            }
        }
    }
    let phi = base.as_ref().map_or(f64::NEG_INFINITY, |b| b.value(&y));
    Ok(FeasibilityResult {
        status: SearchStatus::Success,
        x: rp.extract(&y),
        objective: u,
        phi,
        outer_steps: outer,
        halvings,
        fw_iterations,
        cap_hit,
        trace,
    })
}

fn warm_start(rp: &RescaledProblem, x: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if x.nrows() != rp.inner_dim || !linalg::is_finite_matrix(x) {
        return None;
    }
    let x = linalg::symmetrize(x);
    let min = linalg::min_eigenvalue(&x);
    // round-off on the PSD boundary is projected away, anything more rejected
    let x = if min >= 0.0 {
        x
    } else if min >= -1e-9 * x.abs().max().max(1.0) {
        linalg::clamp_eigenvalues(&x, 0.0, f64::INFINITY)
    } else {
        return None;
    };
    let tr = x.trace();
    let x = if tr > rp.scale { x * (rp.scale / tr) } else { x };
    Some(rp.embed(&x))
}
