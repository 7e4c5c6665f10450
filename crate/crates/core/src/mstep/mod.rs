//! Maximization step: transition and initial-distribution updates plus the
//! per-state `(A, Q)` programs.
//!
//! Each active state runs `sweeps` rounds of "solve `A` with `Q` fixed, then
//! `Q` with `A` fixed". A candidate is kept only if it does not raise the
//! surrogate `J(A, Q) = w log det Q + tr(Q⁻¹ F(A))`, so `J` never increases.

pub mod a_problem;
pub mod q_problem;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MsldsError, Result};
use crate::estep::{EStepResult, RawStats, TrajectoryPosterior};
use crate::linalg::{self, CompensatedSum};
use crate::model::{ModelParams, StateDynamics, StateGaussian, Trajectory, DEFAULT_ETA, DEFAULT_FEAS_TOL, DEFAULT_Q_FLOOR};
use crate::sdp::{SearchStatus, SolverConfig};

pub use a_problem::{assemble_a_problem, restore_a, solve_a, AProblem, ASolve};
pub use q_problem::{assemble_q_problem, solve_q, QProblem, QSolve};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MstepConfig {
    pub eta: f64,
    /// `Q` eigenvalue floor relative to the mean diagonal of `Σ`.
    pub q_floor_rel: f64,
    pub feas_tol: f64,
    /// Trace bound as a multiple of the natural trace scale of each program.
    pub trace_headroom: f64,
    /// `A`-then-`Q` rounds per M-step.
    pub sweeps: usize,
    /// States with posterior mass below this fraction of all frames keep their parameters.
    pub activity_floor_rel: f64,
    /// Transition rows with less mass than this fall back to uniform.
    pub trans_floor: f64,
    /// Enforce the stability constraints (false gives the plain switching model).
    pub constrained: bool,
    /// Skip the solver when the closed-form unconstrained minimizer already
    /// satisfies the constraints; it is then the constrained optimum too.
    pub interior_shortcut: bool,
    /// Take the `Q` update from its closed form instead of the solver.
    pub exact_q: bool,
    pub solver: SolverConfig,
}

impl Default for MstepConfig {
    fn default() -> Self {
        Self {
            eta: DEFAULT_ETA,
            q_floor_rel: DEFAULT_Q_FLOOR,
            feas_tol: DEFAULT_FEAS_TOL,
            trace_headroom: 1.5,
            sweeps: 1,
            activity_floor_rel: 1e-6,
            trans_floor: 1e-8,
            constrained: true,
            interior_shortcut: true,
            exact_q: true,
            solver: SolverConfig::default(),
        }
    }
}

impl MstepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(MsldsError::InvalidConfig(format!("eta must lie in (0, 1), got {}", self.eta)));
        }
        if !(self.q_floor_rel > 0.0 && self.feas_tol > 0.0 && self.trans_floor > 0.0) {
            return Err(MsldsError::InvalidConfig("floors and tolerances must be positive".into()));
        }
        if !(self.trace_headroom >= 1.0) || self.sweeps == 0 {
            return Err(MsldsError::InvalidConfig("trace_headroom must be >= 1 and sweeps >= 1".into()));
        }
        self.solver.validate()
    }
}

/// Moments of `x − mu` over frame pairs, expanded from the raw moments.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredStats {
    pub w: f64,
    /// `Σ γ x̃_t x̃_{t−1}ᵀ`
    pub btil: DMatrix<f64>,
    /// `Σ γ x̃_{t−1} x̃_{t−1}ᵀ`
    pub etil: DMatrix<f64>,
    /// `Σ γ x̃_t x̃_tᵀ`
    pub ctil: DMatrix<f64>,
}

impl CenteredStats {
    pub fn from_raw(raw: &RawStats, mu: &DVector<f64>) -> Self {
        let w = raw.w;
        let mm = mu * mu.transpose() * w;
        let ctil = &raw.sxx_cur - &raw.sx_cur * mu.transpose() - mu * raw.sx_cur.transpose() + &mm;
        let etil = &raw.sxx_prev - &raw.sx_prev * mu.transpose() - mu * raw.sx_prev.transpose() + &mm;
        let btil = &raw.sxx_lag - &raw.sx_cur * mu.transpose() - mu * raw.sx_prev.transpose() + &mm;
        Self { w, btil, etil: linalg::symmetrize(&etil), ctil: linalg::symmetrize(&ctil) }
    }

    /// `F(A) = Σ γ (x̃_t − A x̃_{t−1})(x̃_t − A x̃_{t−1})ᵀ`.
    pub fn residual_moment(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let f = &self.ctil - &self.btil * a.transpose() - a * self.btil.transpose() + a * &self.etil * a.transpose();
        linalg::symmetrize(&f)
    }
}

/// `w log det Q + tr(Q⁻¹ F(A))`: minus twice the posterior-weighted
/// log-likelihood of the state's transitions, without the constant.
pub fn surrogate(cs: &CenteredStats, a: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    match (linalg::log_det_spd(q), linalg::inverse_spd(q)) {
        (Some(ld), Some(q_inv)) => cs.w * ld + q_inv.dot(&cs.residual_moment(a)),
        _ => f64::INFINITY,
    }
}

/// `T_ij = Σ_t ξ_ij(t) / Σ_t γ_i(t)`; rows with mass below `floor` become uniform.
pub fn update_transition(posts: &[TrajectoryPosterior], floor: f64) -> DMatrix<f64> {
    let k = posts.first().map_or(1, |p| p.n_states());
    let mut counts = DMatrix::zeros(k, k);
    for p in posts {
        counts += p.xi_sum();
    }
    let mut trans = DMatrix::zeros(k, k);
    for i in 0..k {
        let mut total = CompensatedSum::default();
        for j in 0..k {
            total.add(counts[(i, j)]);
        }
        let total = total.value();
        for j in 0..k {
            trans[(i, j)] = if total >= floor { counts[(i, j)] / total } else { 1.0 / k as f64 };
        }
    }
    trans
}

/// Normalized mean of the first-frame posteriors.
pub fn update_initial(posts: &[TrajectoryPosterior]) -> DVector<f64> {
    let k = posts.first().map_or(1, |p| p.n_states());
    let mut acc = vec![CompensatedSum::default(); k];
    for p in posts {
        for (s, c) in acc.iter_mut().enumerate() {
            c.add(p.gamma[(0, s)]);
        }
    }
    let v = DVector::from_iterator(k, acc.iter().map(|c| c.value()));
    let total = v.sum();
    if total > 0.0 {
        v / total
    } else {
        DVector::from_element(k, 1.0 / k as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    /// State below the activity floor; nothing solved.
    Skipped,
    Accepted,
    /// Solution would have raised the surrogate; previous value kept.
    Regressed,
    /// Solver reported failure or an error; previous value kept.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateReport {
    pub weight: f64,
    pub a_status: StepStatus,
    pub q_status: StepStatus,
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    pub fw_iterations: usize,
}

struct StateUpdate {
    a: DMatrix<f64>,
    q: DMatrix<f64>,
    report: StateReport,
}

/// Least-squares `A = B̄ Ē⁻¹` with `Ē` eigenvalue-floored.
pub fn unconstrained_a(cs: &CenteredStats, floor: f64) -> DMatrix<f64> {
    let e = linalg::floor_eigenvalues(&cs.etil, floor * cs.w.max(f64::MIN_POSITIVE));
    let e_inv = linalg::inverse_spd(&e).unwrap_or_else(|| DMatrix::zeros(e.nrows(), e.ncols()));
    &cs.btil * e_inv
}

/// Smallest eigenvalue of `Σ − Q − AΣAᵀ`.
fn lyapunov_slack(a: &DMatrix<f64>, q: &DMatrix<f64>, sigma: &DMatrix<f64>) -> f64 {
    linalg::min_eigenvalue(&linalg::symmetrize(&(sigma - q - a * sigma * a.transpose())))
}

fn a_feasible(a: &DMatrix<f64>, q: &DMatrix<f64>, sigma: &DMatrix<f64>, eta: f64) -> bool {
    linalg::spectral_norm(a) <= eta && lyapunov_slack(a, q, sigma) >= 0.0
}

fn update_state(cs: &CenteredStats, g: &StateGaussian, prev: &StateDynamics, cfg: &MstepConfig) -> StateUpdate {
    let floor = cfg.q_floor_rel * linalg::mean_diag(g.sigma()).abs().max(f64::MIN_POSITIVE);
    let mut a = prev.a().clone();
    let mut q = prev.q().clone();
    let before = surrogate(cs, &a, &q);
    let mut j = before;
    let mut a_status = StepStatus::Regressed;
    let mut q_status = StepStatus::Regressed;
    let mut fw_iterations = 0;
    for _ in 0..cfg.sweeps {
        // A with Q fixed
        let free = unconstrained_a(cs, floor);
        let cand = if !cfg.constrained || (cfg.interior_shortcut && a_feasible(&free, &q, g.sigma(), cfg.eta)) {
            Ok(Some(free))
        } else {
            assemble_a_problem(cs, &q, g.sigma(), cfg.eta, cfg).and_then(|p| solve_a(&p, &a, cfg)).map(|s| {
                fw_iterations += s.fw_iterations;
                (s.status == SearchStatus::Success).then_some(s.a)
            })
        };
        match cand {
            Ok(Some(a_new)) => {
                let j_new = surrogate(cs, &a_new, &q);
                if j_new <= j {
                    a = a_new;
                    j = j_new;
                    a_status = StepStatus::Accepted;
                } else if a_status != StepStatus::Accepted {
                    a_status = StepStatus::Regressed;
                }
            }
            Ok(None) => a_status = StepStatus::Failed,
            Err(e) => {
                log::debug!("A solve failed: {e}");
                a_status = StepStatus::Failed;
            }
        }
        // Q with A fixed
        let f_cov = linalg::clamp_eigenvalues(&(cs.residual_moment(&a) / cs.w), 0.0, f64::INFINITY);
        let free = linalg::floor_eigenvalues(&f_cov, floor);
        let cand = if !cfg.constrained || (cfg.interior_shortcut && lyapunov_slack(&a, &free, g.sigma()) >= 0.0) {
            Ok(Some(free))
        } else {
            let prob = assemble_q_problem(&f_cov, &a, g.sigma(), Some(&q), cfg);
            if cfg.exact_q {
                prob.map(|p| Some(p.closed_form()))
            } else {
                prob.and_then(|p| solve_q(&p, &q, cfg)).map(|s| {
                    fw_iterations += s.fw_iterations;
                    (s.status == SearchStatus::Success).then_some(s.q)
                })
            }
        };
        match cand {
            Ok(Some(q_new)) => {
                let j_new = surrogate(cs, &a, &q_new);
                if j_new <= j {
                    q = q_new;
                    j = j_new;
                    q_status = StepStatus::Accepted;
                } else if q_status != StepStatus::Accepted {
                    q_status = StepStatus::Regressed;
                }
            }
            Ok(None) => q_status = StepStatus::Failed,
            Err(e) => {
                log::debug!("Q solve failed: {e}");
                q_status = StepStatus::Failed;
            }
        }
    }
    StateUpdate {
        a,
        q,
        report: StateReport { weight: cs.w, a_status, q_status, surrogate_before: before, surrogate_after: j, fw_iterations },
    }
}

fn total_frames(est: &EStepResult) -> f64 {
    est.per_trajectory.iter().map(|p| p.gamma.nrows() as f64).sum()
}

/// One M-step for the switching dynamical model (constrained or not, per `cfg`).
/// `mu` and `Σ` are kept from `prev`.
pub fn mstep(est: &EStepResult, prev: &ModelParams, cfg: &MstepConfig) -> Result<(ModelParams, Vec<StateReport>)> {
    cfg.validate()?;
    let k = prev.n_states();
    if est.stats.len() != k {
        return Err(MsldsError::DimensionMismatch { expected: k, found: est.stats.len() });
    }
    let trans = update_transition(&est.per_trajectory, cfg.trans_floor);
    let pi = update_initial(&est.per_trajectory);
    let min_weight = cfg.activity_floor_rel * total_frames(est);
    let updates: Vec<Option<StateUpdate>> = (0..k)
        .into_par_iter()
        .map(|s| {
            let raw = &est.stats[s];
            if !(raw.w >= min_weight) || raw.w <= 0.0 {
                return None;
            }
            let g = &prev.gaussians()[s];
            let cs = CenteredStats::from_raw(raw, g.mu());
            Some(update_state(&cs, g, &prev.dynamics()[s], cfg))
        })
        .collect();
    let mut dynamics = Vec::with_capacity(k);
    let mut reports = Vec::with_capacity(k);
    for (s, up) in updates.into_iter().enumerate() {
        let g = &prev.gaussians()[s];
        match up {
            None => {
                dynamics.push(prev.dynamics()[s].clone());
                let cs = CenteredStats::from_raw(&est.stats[s], g.mu());
                let j = surrogate(&cs, prev.dynamics()[s].a(), prev.dynamics()[s].q());
                reports.push(StateReport {
                    weight: est.stats[s].w,
                    a_status: StepStatus::Skipped,
                    q_status: StepStatus::Skipped,
                    surrogate_before: j,
                    surrogate_after: j,
                    fw_iterations: 0,
                });
            }
            Some(up) => {
                dynamics.push(StateDynamics::anchored(up.a, up.q, g, cfg.q_floor_rel)?);
                reports.push(up.report);
            }
        }
    }
    let params = ModelParams::new(trans, pi, dynamics, prev.gaussians().to_vec())?.with_first_frame(prev.first_frame());
    Ok((params, reports))
}

/// M-step for the Gaussian-HMM baseline: `trans` and `pi`, and optionally the
/// envelopes re-estimated from all frames. Dynamics stay `A = 0, Q = Σ`.
pub fn mstep_hmm(
    est: &EStepResult,
    trajectories: &[Trajectory],
    prev: &ModelParams,
    update_envelopes: bool,
    sigma_floor_rel: f64,
    trans_floor: f64,
) -> Result<(ModelParams, Vec<StateReport>)> {
    let k = prev.n_states();
    let trans = update_transition(&est.per_trajectory, trans_floor);
    let pi = update_initial(&est.per_trajectory);
    let mut gaussians = prev.gaussians().to_vec();
    if update_envelopes {
        let d = prev.dim();
        for (s, g) in gaussians.iter_mut().enumerate() {
            let mut w = CompensatedSum::default();
            let mut sx = linalg::CompensatedMatrix::zeros(d, 1);
            let mut sxx = linalg::CompensatedMatrix::zeros(d, d);
            for (post, tr) in est.per_trajectory.iter().zip(trajectories) {
                for t in 0..tr.len() {
                    let gt = post.gamma[(t, s)];
                    if gt == 0.0 {
                        continue;
                    }
                    let x: Vec<f64> = tr.data().row(t).iter().copied().collect();
                    w.add(gt);
                    sx.add_scaled(gt, &x);
                    sxx.add_outer(gt, &x, &x);
                }
            }
            let w = w.value();
            if w < 1e-8 {
                continue;
            }
            let mu = sx.to_matrix().column(0) / w;
            let cov = sxx.to_matrix() / w - &mu * mu.transpose();
            *g = StateGaussian::with_floor(mu, cov, sigma_floor_rel)?;
        }
    }
    let mut dynamics = Vec::with_capacity(k);
    let mut reports = Vec::with_capacity(k);
    for g in &gaussians {
        let d = g.dim();
        dynamics.push(StateDynamics::new(DMatrix::zeros(d, d), g.mu().clone(), g.sigma().clone())?);
        reports.push(StateReport {
            weight: 0.0,
            a_status: StepStatus::Skipped,
            q_status: StepStatus::Skipped,
            surrogate_before: 0.0,
            surrogate_after: 0.0,
            fw_iterations: 0,
        });
    }
    let params = ModelParams::new(trans, pi, dynamics, gaussians)?.with_first_frame(prev.first_frame());
    Ok((params, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hard_posterior(states: &[usize], k: usize) -> TrajectoryPosterior {
        let t_len = states.len();
        let gamma = DMatrix::from_fn(t_len, k, |t, s| if states[t] == s { 1.0 } else { 0.0 });
        let xi = DMatrix::from_fn(t_len - 1, k * k, |t, c| if c == states[t] * k + states[t + 1] { 1.0 } else { 0.0 });
        TrajectoryPosterior { gamma, xi, loglik: 0.0 }
    }

    #[test]
    fn transition_from_hard_sequence() {
        let p = hard_posterior(&[0, 0, 1, 1], 2);
        let t = update_transition(&[p], 1e-8);
        assert_eq!(t, DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.0, 1.0]));
    }

    #[test]
    fn single_state_and_empty_rows() {
        let p = hard_posterior(&[0, 0, 0], 1);
        assert_eq!(update_transition(&[p], 1e-8), DMatrix::identity(1, 1));
        let p = hard_posterior(&[0, 0, 0], 2);
        let t = update_transition(&[p], 1e-8);
        assert_eq!(t.row(1).iter().copied().collect::<Vec<_>>(), vec![0.5, 0.5]);
    }

    #[test]
    fn initial_distribution_averages_first_frames() {
        let a = hard_posterior(&[0, 1], 2);
        let b = hard_posterior(&[1, 1], 2);
        assert_eq!(update_initial(&[a.clone()]), DVector::from_vec(vec![1.0, 0.0]));
        assert_eq!(update_initial(&[a, b]), DVector::from_vec(vec![0.5, 0.5]));
    }
}
