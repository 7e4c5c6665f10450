//! Change of variables from `{X ⪰ 0, tr X <= R}` (side `N`) to the unit-trace
//! spectrahedron of side `N + 1`: `X = R · Y[0..N, 0..N]`, the extra diagonal
//! entry of `Y` holding the unused trace as slack.

use std::sync::Arc;

use nalgebra::DMatrix;

use super::problem::{ConvexProblem, Functional};
use crate::error::{MsldsError, Result};

/// Functional of `Y` defined through `X = scale · Y[0..n, 0..n]`.
pub struct Rescaled {
    inner: Arc<dyn Functional>,
    n: usize,
    scale: f64,
}

impl Rescaled {
    fn block(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        y.view((0, 0), (self.n, self.n)) * self.scale
    }
}

impl Functional for Rescaled {
    fn value(&self, y: &DMatrix<f64>) -> f64 {
        self.inner.value(&self.block(y))
    }

    fn gradient(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let gx = self.inner.gradient(&self.block(y));
        let mut g = DMatrix::zeros(y.nrows(), y.ncols());
        g.view_mut((0, 0), (self.n, self.n)).copy_from(&(gx * self.scale));
        g
    }

    fn along<'a>(&'a self, y: &'a DMatrix<f64>, dir: &'a DMatrix<f64>) -> Box<dyn Fn(f64) -> f64 + 'a> {
        let x0 = self.block(y);
        let dx = self.block(dir);
        Box::new(move |t| self.inner.value(&(&x0 + &dx * t)))
    }
}

/// A problem rewritten over the unit-trace spectrahedron.
#[derive(Debug, Clone)]
pub struct RescaledProblem {
    /// Side of the original variable.
    pub inner_dim: usize,
    /// Original trace bound `R`.
    pub scale: f64,
    /// Problem over `Y` (side `inner_dim + 1`, trace bound 1).
    pub problem: ConvexProblem,
}

impl RescaledProblem {
    /// `Y` with `R · Y_block = X` and the leftover trace in the slack entry.
    pub fn embed(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.inner_dim;
        let mut y = DMatrix::zeros(n + 1, n + 1);
        y.view_mut((0, 0), (n, n)).copy_from(&(x / self.scale));
        y[(n, n)] = 1.0 - x.trace() / self.scale;
        y
    }

    pub fn extract(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        y.view((0, 0), (self.inner_dim, self.inner_dim)) * self.scale
    }

    pub fn slack(&self, y: &DMatrix<f64>) -> f64 {
        y[(self.inner_dim, self.inner_dim)]
    }
}

pub fn rescale(prob: &ConvexProblem) -> Result<RescaledProblem> {
    let r = prob.trace_bound;
    if !(r > 0.0) || !r.is_finite() {
        return Err(MsldsError::InvalidConfig(format!("trace bound must be positive and finite, got {r}")));
    }
    let n = prob.dim;
    let wrap = |f: &Arc<dyn Functional>| -> Arc<dyn Functional> { Arc::new(Rescaled { inner: Arc::clone(f), n, scale: r }) };
    let problem = ConvexProblem {
        dim: n + 1,
        objective: wrap(&prob.objective),
        ineq: prob
            .ineq
            .iter()
            .map(|f| match f.as_affine() {
                Some(g) => Arc::new(g.rescaled(r, n + 1)) as Arc<dyn Functional>,
                None => wrap(f),
            })
            .collect(),
        eq: prob.eq.iter().map(|g| g.rescaled(r, n + 1)).collect(),
        lmi: prob.lmi.iter().map(|l| l.rescaled(r, n + 1)).collect(),
        trace_bound: 1.0,
        layout: prob.layout.clone(),
        objective_floor: prob.objective_floor,
    };
    Ok(RescaledProblem { inner_dim: n, scale: r, problem })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdp::problem::{AffineFunctional, BlockLayout, FnFunctional, LinearMatrixIneq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(r: f64) -> ConvexProblem {
        let n = 3;
        ConvexProblem {
            dim: n,
            objective: Arc::new(FnFunctional::new(|x: &DMatrix<f64>| x.norm_squared(), |x: &DMatrix<f64>| x * 2.0)),
            ineq: vec![Arc::new(AffineFunctional::trace(n, 1.0, -1.0))],
            eq: vec![AffineFunctional::entry(n, 0, 1, 0.25)],
            lmi: vec![LinearMatrixIneq::block_upper(n, 1..3, 0.5)],
            trace_bound: r,
            layout: BlockLayout::new(n),
            objective_floor: None,
        }
    }

    #[test]
    fn zero_puts_all_trace_in_slack() {
        let rp = rescale(&toy(2.0)).unwrap();
        let y = rp.embed(&DMatrix::zeros(3, 3));
        let mut expect = DMatrix::zeros(4, 4);
        expect[(3, 3)] = 1.0;
        assert_eq!(y, expect);
    }

    #[test]
    fn full_trace_leaves_no_slack() {
        let rp = rescale(&toy(3.0)).unwrap();
        let y = rp.embed(&DMatrix::identity(3, 3));
        assert_eq!(rp.slack(&y), 0.0);
    }

    #[test]
    fn round_trip_and_functionals_agree() {
        let prob = toy(5.0);
        let rp = rescale(&prob).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let l = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let x = &l * l.transpose();
            let y = rp.embed(&x);
            let back = rp.extract(&y);
            assert!((&back - &x).abs().max() <= 1e-15 * x.abs().max().max(1.0));
            assert!((y.trace() - 1.0).abs() < 1e-14);
            assert!((rp.problem.objective.value(&y) - prob.objective.value(&x)).abs() < 1e-12);
            assert!((rp.problem.eq[0].value(&y) - prob.eq[0].value(&x)).abs() < 1e-14);
            assert!((rp.problem.ineq[0].value(&y) - prob.ineq[0].value(&x)).abs() < 1e-14);
            assert!((rp.problem.lmi[0].eval(&y) - prob.lmi[0].eval(&x)).abs().max() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_bound() {
        assert!(rescale(&toy(0.0)).is_err());
    }
}
