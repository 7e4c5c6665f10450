//! First-order solver for convex programs over bounded-trace PSD matrices.

pub mod eigen;
pub mod feasibility;
pub mod frank_wolfe;
pub mod linesearch;
pub mod penalty;
pub mod problem;
pub mod rescale;

use serde::{Deserialize, Serialize};

use crate::error::{MsldsError, Result};

pub use eigen::approx_ev;
pub use feasibility::{feasibility_search, feasibility_search_from, FeasibilityResult, SearchStatus};
pub use frank_wolfe::{frank_wolfe, FwOutcome, FwStop, FwTraceRow};
pub use penalty::{penalty_bounds_check, sharpness, Penalty, SmoothObjective};
pub use problem::{AffineFunctional, Block, BlockLayout, BlockRole, ConvexProblem, FnFunctional, Functional, LinearMatrixIneq};
pub use rescale::{rescale, RescaledProblem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Feasibility and accuracy threshold.
    pub eps: f64,
    /// Hard cap on Frank-Wolfe steps per solve.
    pub max_fw_steps: usize,
    /// Matrix-vector products allowed per eigensolver attempt.
    pub ev_iters: usize,
    /// Residual tolerance for eigenvector acceptance, relative to `‖S‖∞`.
    pub ev_tol: f64,
    /// Identity shifts tried before the dense fallback, in units of `‖S‖∞`.
    pub ev_shift: Vec<f64>,
    /// Relative tolerance of the golden-section search.
    pub linesearch_tol: f64,
    /// Largest outer step size before the search reports an unbounded objective.
    pub step_cap: f64,
    /// Guard on the number of outer feasibility solves.
    pub max_outer_steps: usize,
    /// A solve counts as feasible when `Φ <= accept_factor * eps`.
    pub accept_factor: f64,
    /// Check PSD and unit trace after every step.
    pub check_invariants: bool,
    /// Keep per-iteration rows for a debug trace.
    pub record_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_fw_steps: 2_000,
            ev_iters: 300,
            ev_tol: 1e-7,
            ev_shift: vec![1.0, 10.0, 100.0],
            linesearch_tol: 1e-6,
            step_cap: 1e12,
            max_outer_steps: 200,
            accept_factor: 2.0,
            check_invariants: false,
            record_trace: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(MsldsError::InvalidConfig(format!("solver eps must be positive, got {}", self.eps)));
        }
        if self.max_fw_steps == 0 {
            return Err(MsldsError::InvalidConfig("max_fw_steps must be at least 1".into()));
        }
        if self.ev_iters == 0 || !(self.ev_tol > 0.0) {
            return Err(MsldsError::InvalidConfig("eigensolver iterations and tolerance must be positive".into()));
        }
        if !(self.linesearch_tol > 0.0 && self.linesearch_tol < 1.0) {
            return Err(MsldsError::InvalidConfig("linesearch_tol must lie in (0, 1)".into()));
        }
        if !(self.accept_factor >= 1.0) {
            return Err(MsldsError::InvalidConfig("accept_factor must be at least 1".into()));
        }
        Ok(())
    }
}
