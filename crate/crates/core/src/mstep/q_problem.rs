//! The per-state `Q` update in the inverse variable `R = Q⁻¹`: minimize
//! `−log det R + tr(R F̄)` subject to `R ⪰ (Σ − AΣAᵀ)⁻¹`.
//!
//! Whitening with `S = Σ − AΣAᵀ` turns the constraint into `R̃ ⪰ I` for
//! `R̃ = S^{1/2} R S^{1/2}`. The block LMI `[[I, I], [I, R̃]] ⪰ 0` is the same
//! condition; its Schur complement `Z = R̃ − I ⪰ 0` is used directly as the
//! solver variable, so the problem has no constraints beyond `Z ⪰ 0`.

use std::sync::Arc;

use nalgebra::DMatrix;

use super::MstepConfig;
use crate::error::{MsldsError, Result};
use crate::linalg;
use crate::sdp::{feasibility_search_from, BlockLayout, BlockRole, ConvexProblem, Functional, SearchStatus};

/// `−log det R̃ + tr(R̃ F̃)` with `R̃ = I + Z`, `+∞` outside the PD cone.
pub struct QObjective {
    layout: BlockLayout,
    f_tilde: DMatrix<f64>,
}

impl QObjective {
    fn r_tilde(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let z = self.layout.read(x, "z");
        let n = z.nrows();
        z + DMatrix::identity(n, n)
    }

    pub fn at(&self, r: &DMatrix<f64>) -> f64 {
        match linalg::log_det_spd(r) {
            Some(ld) => -ld + self.f_tilde.dot(r),
            None => f64::INFINITY,
        }
    }
}

impl Functional for QObjective {
    fn value(&self, x: &DMatrix<f64>) -> f64 {
        self.at(&self.r_tilde(x))
    }

    fn gradient(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(x.nrows(), x.ncols());
        if let Some(r_inv) = linalg::inverse_spd(&self.r_tilde(x)) {
            let gr = &self.f_tilde - r_inv;
            self.layout.scatter_gradient(&mut g, "z", &linalg::symmetrize(&gr));
        }
        g
    }
}

pub struct QProblem {
    pub problem: ConvexProblem,
    pub s_half: DMatrix<f64>,
    pub s_inv_half: DMatrix<f64>,
    pub objective: Arc<QObjective>,
    pub floor: f64,
}

impl QProblem {
    /// Solver variable `Z = R̃ − I` for a model-space `Q`.
    pub fn embed(&self, q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let d = self.s_half.nrows();
        let r = linalg::inverse_spd(q)?;
        let rt = linalg::symmetrize(&(&self.s_half * r * &self.s_half));
        Some(rt - DMatrix::identity(d, d))
    }

    /// Model-space `Q` with the whitened constraint `Q̃ ⪯ I` enforced and
    /// the eigenvalue floor applied.
    pub fn extract(&self, x: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let qt = linalg::inverse_spd(&self.objective.r_tilde(x))?;
        Some(self.restore(&qt))
    }

    pub fn restore(&self, q_tilde: &DMatrix<f64>) -> DMatrix<f64> {
        let qt = linalg::clamp_eigenvalues(q_tilde, 0.0, 1.0);
        let q = linalg::symmetrize(&(&self.s_half * qt * &self.s_half));
        linalg::floor_eigenvalues(&q, self.floor)
    }

    /// The exact minimizer: `F̃` with its eigenvalues clipped at 1, mapped back.
    pub fn closed_form(&self) -> DMatrix<f64> {
        self.restore(&self.objective.f_tilde)
    }

    pub fn objective_at_q(&self, q: &DMatrix<f64>) -> f64 {
        match linalg::inverse_spd(q) {
            Some(r) => self.objective.at(&linalg::symmetrize(&(&self.s_half * r * &self.s_half))),
            None => f64::INFINITY,
        }
    }
}

pub fn q_layout(d: usize) -> BlockLayout {
    BlockLayout::new(d).with_block("z", 0..d, 0..d, BlockRole::Free)
}

/// `f_cov` is the residual second moment `F / w` (already PSD-floored).
/// `q_prev` only sizes the trace bound so the warm start fits. The bound
/// covers the unconstrained minimizer `F̃⁻¹ − I` with headroom.
pub fn assemble_q_problem(
    f_cov: &DMatrix<f64>,
    a: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    q_prev: Option<&DMatrix<f64>>,
    cfg: &MstepConfig,
) -> Result<QProblem> {
    let d = sigma.nrows();
    let floor = cfg.q_floor_rel * linalg::mean_diag(sigma).abs().max(f64::MIN_POSITIVE);
    let s = linalg::symmetrize(&(sigma - a * sigma * a.transpose()));
    if linalg::min_eigenvalue(&s) <= 0.0 {
        return Err(MsldsError::NotPositiveDefinite("sigma - a sigma aᵀ for the Q problem".into()));
    }
    let (s_half, s_inv_half) = linalg::sqrt_and_inv_sqrt(&s, floor);
    let f_floored = linalg::floor_eigenvalues(f_cov, floor);
    let f_tilde = linalg::symmetrize(&(&s_inv_half * &f_floored * &s_inv_half));
    let f_tilde_inv = linalg::inverse_spd(&f_tilde)
        .ok_or_else(|| MsldsError::NotPositiveDefinite("whitened residual covariance".into()))?;
    let layout = q_layout(d);
    let mut needed = f_tilde_inv.trace();
    if let Some(qp) = q_prev {
        if let Some(r) = linalg::inverse_spd(qp) {
            needed = needed.max((&s_half * r * &s_half).trace());
        }
    }
    // unconstrained minimum at R̃ = F̃⁻¹
    let objective_floor = linalg::log_det_spd(&f_tilde).map(|ld| d as f64 + ld);
    let objective = Arc::new(QObjective { layout: layout.clone(), f_tilde });
    let problem = ConvexProblem {
        dim: d,
        objective: objective.clone(),
        ineq: vec![],
        eq: vec![],
        lmi: vec![],
        trace_bound: cfg.trace_headroom * needed.max(d as f64),
        layout,
        objective_floor,
    };
    Ok(QProblem { problem, s_half, s_inv_half, objective, floor })
}

#[derive(Debug, Clone)]
pub struct QSolve {
    pub q: DMatrix<f64>,
    pub status: SearchStatus,
    pub raw_objective: f64,
    pub fw_iterations: usize,
}

pub fn solve_q(prob: &QProblem, q_prev: &DMatrix<f64>, cfg: &MstepConfig) -> Result<QSolve> {
    // projecting Z onto the PSD cone clamps the whitened Q̃ to ⪯ I
    let start = prob.embed(q_prev).map(|z| linalg::clamp_eigenvalues(&z, 0.0, f64::INFINITY));
    let res = feasibility_search_from(&prob.problem, &cfg.solver, start.as_ref())?;
    let q = prob.extract(&res.x).unwrap_or_else(|| q_prev.clone());
    Ok(QSolve { q, status: res.status, raw_objective: res.objective, fw_iterations: res.fw_iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdp::SmoothObjective;

    #[test]
    fn gradient_matches_finite_differences() {
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.4]);
        let f = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]);
        let prob = assemble_q_problem(&f, &a, &sigma, None, &MstepConfig::default()).unwrap();
        let x = prob.embed(&(&sigma * 0.3)).unwrap();
        let obj = prob.problem.objective.clone();
        let g = obj.gradient(&x);
        let h = 1e-6;
        for i in 0..2 {
            for j in i..2 {
                let mut e = DMatrix::zeros(2, 2);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                let fd = (obj.value(&(&x + &e * h)) - obj.value(&(&x - &e * h))) / (2.0 * h);
                assert!((fd - g.dot(&e)).abs() < 1e-5 * (1.0 + fd.abs()), "({i},{j})");
            }
        }
        let zero = DMatrix::zeros(2, 2);
        let along = SmoothObjective::along(obj.as_ref(), &x, &zero);
        assert_eq!(along(0.5), obj.value(&x));
    }

    #[test]
    fn closed_form_clips_whitened_spectrum() {
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.4]);
        let f = DMatrix::from_row_slice(2, 2, &[3.0, 0.1, 0.1, 0.05]);
        let prob = assemble_q_problem(&f, &a, &sigma, None, &MstepConfig::default()).unwrap();
        let q = prob.closed_form();
        let slack = linalg::symmetrize(&(&sigma - &q - &a * &sigma * a.transpose()));
        assert!(linalg::min_eigenvalue(&slack) > -1e-12);
        // no feasible perturbation does better
        let h0 = prob.objective_at_q(&q);
        for (i, j) in [(0, 0), (1, 1), (0, 1)] {
            let mut e = DMatrix::zeros(2, 2);
            e[(i, j)] = 1e-4;
            e[(j, i)] = 1e-4;
            for cand in [&q - &e, &q + &e] {
                let s = linalg::symmetrize(&(&sigma - &cand - &a * &sigma * a.transpose()));
                if linalg::min_eigenvalue(&s) >= 0.0 {
                    assert!(prob.objective_at_q(&cand) >= h0 - 1e-12);
                }
            }
        }
    }

    #[test]
    fn extract_inverts_embed_for_feasible_q() {
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let a = DMatrix::zeros(2, 2);
        let f = DMatrix::identity(2, 2) * 0.2;
        let prob = assemble_q_problem(&f, &a, &sigma, None, &MstepConfig::default()).unwrap();
        let q = &sigma * 0.5;
        let back = prob.extract(&prob.embed(&q).unwrap()).unwrap();
        assert!((back - q).abs().max() < 1e-12);
    }
}
