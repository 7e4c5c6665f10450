//! The per-state `A` update: minimize `tr Q⁻¹(−B̄Aᵀ − AB̄ᵀ + AĒAᵀ)` subject to
//! `Q + AΣAᵀ ⪯ Σ` and `‖A‖₂ <= η`.
//!
//! In whitened form `Ã = S^{-1/2} A Σ^{1/2}`, `S = Σ − Q`, the first
//! constraint reads `‖Ã‖₂ <= 1`. The solver variable is
//!
//! ```text
//! [ P   Ã ]
//! [ Ãᵀ  R ] ⪰ 0,   P ⪯ I,  R ⪯ I
//! ```
//!
//! which holds exactly when `‖Ã‖₂ <= 1` (take `P = R = I` for one direction,
//! `Ã = P^{1/2} C R^{1/2}` with `‖C‖ <= 1` for the other). The norm bound on
//! `A` is a further matrix inequality on the dilation of `S^{1/2} Ã Σ^{-1/2}`.

use std::sync::Arc;

use nalgebra::DMatrix;

use super::{CenteredStats, MstepConfig};
use crate::error::{MsldsError, Result};
use crate::linalg;
use crate::sdp::{
    feasibility_search_from, BlockLayout, BlockRole, ConvexProblem, Functional, LinearMatrixIneq, SearchStatus,
};

/// Whitening transforms shared by the objective, the constraints and extraction.
#[derive(Debug, Clone)]
pub struct AWhitening {
    pub d: usize,
    pub eta: f64,
    pub s_half: DMatrix<f64>,
    pub s_inv_half: DMatrix<f64>,
    pub sig_half: DMatrix<f64>,
    pub sig_inv_half: DMatrix<f64>,
}

impl AWhitening {
    pub fn new(sigma: &DMatrix<f64>, q: &DMatrix<f64>, eta: f64, floor: f64) -> Result<Self> {
        let s = linalg::symmetrize(&(sigma - q));
        if linalg::min_eigenvalue(&s) < -floor.max(1e-12) * 1e3 {
            return Err(MsldsError::NotPositiveDefinite("sigma - q for the A problem".into()));
        }
        let (s_half, s_inv_half) = linalg::sqrt_and_inv_sqrt(&s, floor);
        let (sig_half, sig_inv_half) = linalg::sqrt_and_inv_sqrt(sigma, floor);
        Ok(Self { d: sigma.nrows(), eta, s_half, s_inv_half, sig_half, sig_inv_half })
    }

    /// `Ã = S^{-1/2} A Σ^{1/2}`.
    pub fn whiten(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        &self.s_inv_half * a * &self.sig_half
    }

    /// `A = S^{1/2} Ã Σ^{-1/2}`.
    pub fn unwhiten(&self, a_tilde: &DMatrix<f64>) -> DMatrix<f64> {
        &self.s_half * a_tilde * &self.sig_inv_half
    }
}

/// `h(A) = tr Q⁻¹(−B̄Aᵀ − AB̄ᵀ + AĒAᵀ)` read through the layout.
pub struct AObjective {
    layout: BlockLayout,
    wh: AWhitening,
    q_inv: DMatrix<f64>,
    bbar: DMatrix<f64>,
    ebar: DMatrix<f64>,
}

impl AObjective {
    fn model_a(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.wh.unwhiten(&self.layout.read(x, "a"))
    }

    pub fn at(&self, a: &DMatrix<f64>) -> f64 {
        let m = -(&self.bbar * a.transpose()) - a * self.bbar.transpose() + a * &self.ebar * a.transpose();
        self.q_inv.dot(&m)
    }

    fn grad_a(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        &self.q_inv * (a * &self.ebar - &self.bbar) * 2.0
    }
}

impl Functional for AObjective {
    fn value(&self, x: &DMatrix<f64>) -> f64 {
        self.at(&self.model_a(x))
    }

    fn gradient(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let ga = self.grad_a(&self.model_a(x));
        let mut g = DMatrix::zeros(x.nrows(), x.ncols());
        self.layout.scatter_gradient(&mut g, "a", &(&self.wh.s_half * ga * &self.wh.sig_inv_half));
        g
    }

    /// Exact quadratic along the segment.
    fn along<'a>(&'a self, x: &'a DMatrix<f64>, dir: &'a DMatrix<f64>) -> Box<dyn Fn(f64) -> f64 + 'a> {
        let a0 = self.model_a(x);
        let da = self.model_a(dir);
        let h0 = self.at(&a0);
        let slope = self.grad_a(&a0).dot(&da);
        let curv = self.q_inv.dot(&(&da * &self.ebar * da.transpose()));
        Box::new(move |t| h0 + t * slope + t * t * curv)
    }
}

/// A solver-ready `A` problem with the pieces needed to map back.
pub struct AProblem {
    pub problem: ConvexProblem,
    pub whitening: AWhitening,
    pub objective: Arc<AObjective>,
}

impl AProblem {
    pub fn embed(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.whitening.d;
        let mut x = DMatrix::identity(2 * d, 2 * d);
        self.problem.layout.write(&mut x, "a", &self.whitening.whiten(a));
        x
    }

    pub fn extract(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.objective.model_a(x)
    }

    /// Objective in model space.
    pub fn objective_at(&self, a: &DMatrix<f64>) -> f64 {
        self.objective.at(a)
    }
}

pub fn a_layout(d: usize) -> BlockLayout {
    BlockLayout::new(2 * d)
        .with_block("p", 0..d, 0..d, BlockRole::Free)
        .with_block("a", 0..d, d..2 * d, BlockRole::Free)
        .with_block("r", d..2 * d, d..2 * d, BlockRole::Free)
}

pub fn assemble_a_problem(
    cs: &CenteredStats,
    q: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    eta: f64,
    cfg: &MstepConfig,
) -> Result<AProblem> {
    let d = sigma.nrows();
    if !(cs.w > 0.0) {
        return Err(MsldsError::InvalidParams("A problem needs positive posterior weight".into()));
    }
    let floor = cfg.q_floor_rel * linalg::mean_diag(sigma).abs().max(f64::MIN_POSITIVE);
    let q_inv = linalg::inverse_spd(q).ok_or_else(|| MsldsError::NotPositiveDefinite("q for the A problem".into()))?;
    let wh = AWhitening::new(sigma, q, eta, floor)?;
    let layout = a_layout(d);
    let lmi = vec![
        LinearMatrixIneq::block_upper(2 * d, 0..d, 1.0),
        LinearMatrixIneq::block_upper(2 * d, d..2 * d, 1.0),
        LinearMatrixIneq::norm_bound(2 * d, 0..d, d..2 * d, &wh.s_half, &wh.sig_inv_half, eta),
    ];
    let bbar = &cs.btil / cs.w;
    let ebar = linalg::symmetrize(&(&cs.etil / cs.w));
    // unconstrained minimum −tr Q⁻¹ B̄ Ē⁻¹ B̄ᵀ, a lower bound on h
    let objective_floor = linalg::inverse_spd(&ebar).map(|e_inv| -q_inv.dot(&(&bbar * e_inv * bbar.transpose())));
    let objective = Arc::new(AObjective { layout: layout.clone(), wh: wh.clone(), q_inv, bbar, ebar });
    let problem = ConvexProblem {
        dim: 2 * d,
        objective: objective.clone(),
        ineq: vec![],
        eq: vec![],
        lmi,
        trace_bound: cfg.trace_headroom * (2 * d) as f64,
        layout,
        objective_floor: objective_floor.filter(|f| f.is_finite()),
    };
    Ok(AProblem { problem, whitening: wh, objective })
}

/// Pulls `A` back into the feasible set: alternately clamp the singular
/// values of the two whitened copies, then scale uniformly if still outside.
pub fn restore_a(a: &DMatrix<f64>, wh: &AWhitening) -> DMatrix<f64> {
    let mut a = a.clone();
    for _ in 0..4 {
        let lyap = linalg::spectral_norm(&wh.whiten(&a));
        let norm = linalg::spectral_norm(&a);
        if lyap <= 1.0 && norm <= wh.eta {
            return a;
        }
        if lyap > 1.0 {
            a = wh.unwhiten(&clamp_singular_values(&wh.whiten(&a), 1.0));
        }
        if linalg::spectral_norm(&a) > wh.eta {
            a = clamp_singular_values(&a, wh.eta);
        }
    }
    let lyap = linalg::spectral_norm(&wh.whiten(&a));
    let norm = linalg::spectral_norm(&a) / wh.eta;
    let worst = lyap.max(norm);
    if worst > 1.0 {
        a /= worst * (1.0 + 1e-12);
    }
    a
}

fn clamp_singular_values(m: &DMatrix<f64>, cap: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let s = svd.singular_values.map(|v| v.min(cap));
    svd.u.expect("u requested") * DMatrix::from_diagonal(&s) * svd.v_t.expect("v_t requested")
}

/// Outcome of one constrained `A` solve.
#[derive(Debug, Clone)]
pub struct ASolve {
    pub a: DMatrix<f64>,
    pub status: SearchStatus,
    pub raw_objective: f64,
    pub fw_iterations: usize,
}

/// Runs the feasibility search warm-started at `a_prev` and maps the result
/// back to a feasible model matrix.
pub fn solve_a(prob: &AProblem, a_prev: &DMatrix<f64>, cfg: &MstepConfig) -> Result<ASolve> {
    let start = prob.embed(&restore_a(a_prev, &prob.whitening));
    let res = feasibility_search_from(&prob.problem, &cfg.solver, Some(&start))?;
    let raw = prob.extract(&res.x);
    let a = if linalg::is_finite_matrix(&raw) { restore_a(&raw, &prob.whitening) } else { a_prev.clone() };
    Ok(ASolve { a, status: res.status, raw_objective: res.objective, fw_iterations: res.fw_iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdp::SmoothObjective;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        let l = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &l * l.transpose() + DMatrix::identity(d, d) * 0.5
    }

    fn instance(rng: &mut ChaCha8Rng, d: usize) -> (CenteredStats, DMatrix<f64>, DMatrix<f64>) {
        let sigma = random_spd(rng, d);
        let q = &sigma * 0.4;
        let etil = random_spd(rng, d) * 10.0;
        let btil = DMatrix::from_fn(d, d, |_, _| rng.random_range(-3.0..3.0));
        let cs = CenteredStats { w: 10.0, btil, etil: etil.clone(), ctil: etil };
        (cs, q, sigma)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (cs, q, sigma) = instance(&mut rng, 2);
        let prob = assemble_a_problem(&cs, &q, &sigma, 0.99, &MstepConfig::default()).unwrap();
        let obj = prob.problem.objective.clone();
        let x = {
            let m = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-0.3..0.3));
            &m + m.transpose() + DMatrix::identity(4, 4)
        };
        let g = obj.gradient(&x);
        let h = 1e-6;
        for i in 0..4 {
            for j in i..4 {
                let mut e = DMatrix::zeros(4, 4);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                let fd = (obj.value(&(&x + &e * h)) - obj.value(&(&x - &e * h))) / (2.0 * h);
                assert!((fd - g.dot(&e)).abs() < 1e-6 * (1.0 + fd.abs()), "({i},{j}) fd {fd} vs {}", g.dot(&e));
            }
        }
        let dir = DMatrix::from_fn(4, 4, |i, j| ((i + 2 * j) as f64).sin());
        let dir = &dir + dir.transpose();
        let along = SmoothObjective::along(obj.as_ref(), &x, &dir);
        assert!((along(0.37) - obj.value(&(&x + &dir * 0.37))).abs() < 1e-10);
    }

    #[test]
    fn embed_extract_round_trip_and_constraints_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (cs, q, sigma) = instance(&mut rng, 3);
        let prob = assemble_a_problem(&cs, &q, &sigma, 0.99, &MstepConfig::default()).unwrap();
        let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-0.2..0.2));
        let x = prob.embed(&a);
        assert!((prob.extract(&x) - &a).abs().max() < 1e-12);
        for l in &prob.problem.lmi {
            assert!(linalg::max_eigenvalue(&l.eval(&x)) <= 1e-12);
        }
    }

    #[test]
    fn restoration_lands_in_feasible_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (_, q, sigma) = instance(&mut rng, 3);
            let wh = AWhitening::new(&sigma, &q, 0.99, 1e-12).unwrap();
            let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-2.0..2.0));
            let r = restore_a(&a, &wh);
            assert!(linalg::spectral_norm(&r) <= 0.99 + 1e-9);
            let lyap = &sigma - &q - &r * &sigma * r.transpose();
            assert!(linalg::min_eigenvalue(&lyap) >= -1e-9);
        }
    }
}
