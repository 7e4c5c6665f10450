//! Log-sum-exp penalty aggregating constraint violations into one smooth
//! convex function:
//!
//! `Φ(X) = (1/M) log( Σ_i exp(M f_i(X)) + Σ_j exp(M g_j(X)²) )`.
//!
//! With `M = log(n + m) / ε`, `Φ <= ε` certifies every `f_i <= ε` and
//! `g_j² <= ε`, and any point with violations at most `ε` has `Φ <= 2ε`.
//! A matrix inequality `L(X) ⪯ 0` of size `k` contributes `tr exp(M L(X))`,
//! i.e. one term per eigenvalue, and counts as `k` constraints.

use nalgebra::{DMatrix, SymmetricEigen};

use super::problem::{ConvexProblem, Functional, LinearMatrixIneq};
use crate::error::{MsldsError, Result};
use crate::linalg;

/// Sharpness `M` for `ell` constraints at accuracy `eps`.
///
/// For a single constraint the penalty equals the constraint for every
/// `M > 0`; `1/eps` is used so the value stays well defined.
pub fn sharpness(ell: usize, eps: f64) -> f64 {
    if ell >= 2 {
        (ell as f64).ln() / eps
    } else {
        1.0 / eps
    }
}

/// Anything Frank-Wolfe can minimize.
pub trait SmoothObjective {
    fn value(&self, x: &DMatrix<f64>) -> f64;
    fn gradient(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
    fn along<'a>(&'a self, x: &'a DMatrix<f64>, dir: &'a DMatrix<f64>) -> Box<dyn Fn(f64) -> f64 + 'a> {
        Box::new(move |t| self.value(&(x + dir * t)))
    }
}

impl<F: Functional + ?Sized> SmoothObjective for F {
    fn value(&self, x: &DMatrix<f64>) -> f64 {
        Functional::value(self, x)
    }
    fn gradient(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        Functional::gradient(self, x)
    }
    fn along<'a>(&'a self, x: &'a DMatrix<f64>, dir: &'a DMatrix<f64>) -> Box<dyn Fn(f64) -> f64 + 'a> {
        Functional::along(self, x, dir)
    }
}

/// The penalty over a borrowed set of constraints. Inequalities carry a
/// scale and an offset so that `c f(X) - offset <= 0` can be added without
/// wrapping.
pub struct Penalty<'a> {
    ineq: Vec<(&'a dyn Functional, f64, f64)>,
    eq: Vec<&'a dyn Functional>,
    lmi: Vec<&'a LinearMatrixIneq>,
    m: f64,
}

impl<'a> Penalty<'a> {
    pub fn new(ineq: Vec<(&'a dyn Functional, f64)>, eq: Vec<&'a dyn Functional>, m: f64) -> Result<Self> {
        if ineq.is_empty() && eq.is_empty() {
            return Err(MsldsError::InvalidConfig("penalty needs at least one constraint".into()));
        }
        if !(m > 0.0) {
            return Err(MsldsError::InvalidConfig(format!("penalty sharpness must be positive, got {m}")));
        }
        let ineq = ineq.into_iter().map(|(f, off)| (f, 1.0, off)).collect();
        Ok(Self { ineq, eq, lmi: Vec::new(), m })
    }

    /// Penalty of the problem's own constraints with `M = log(ℓ)/eps`, `ℓ`
    /// the number of scalar terms.
    pub fn for_problem(prob: &'a ConvexProblem, eps: f64) -> Result<Self> {
        if prob.n_constraints() == 0 {
            return Err(MsldsError::InvalidConfig("penalty needs at least one constraint".into()));
        }
        let ineq = prob.ineq.iter().map(|f| (f.as_ref() as &dyn Functional, 1.0, 0.0)).collect();
        let eq = prob.eq.iter().map(|g| g as &dyn Functional).collect();
        let lmi = prob.lmi.iter().collect();
        Ok(Self { ineq, eq, lmi, m: sharpness(prob.n_terms(), eps) })
    }

    /// Penalty of the single constraint `scale f(X) - offset <= 0`.
    pub fn single(f: &'a dyn Functional, scale: f64, offset: f64, eps: f64) -> Self {
        Self { ineq: vec![(f, scale, offset)], eq: Vec::new(), lmi: Vec::new(), m: sharpness(1, eps) }
    }

    /// Adds `f(X) - offset <= 0` and resets `M` for the new constraint count.
    pub fn with_extra(self, f: &'a dyn Functional, offset: f64, eps: f64) -> Self {
        self.with_scaled_extra(f, 1.0, offset, eps)
    }

    /// Adds `scale f(X) - offset <= 0`; `scale` must be positive.
    pub fn with_scaled_extra(mut self, f: &'a dyn Functional, scale: f64, offset: f64, eps: f64) -> Self {
        debug_assert!(scale > 0.0);
        self.ineq.insert(0, (f, scale, offset));
        self.m = sharpness(self.len(), eps);
        self
    }

    pub fn sharpness(&self) -> f64 {
        self.m
    }

    /// Number of scalar terms.
    pub fn len(&self) -> usize {
        self.ineq.len() + self.eq.len() + self.lmi.iter().map(|l| l.size()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn terms(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.terms_with_eigen(x).0
    }

    fn terms_with_eigen(&self, x: &DMatrix<f64>) -> (Vec<f64>, Vec<SymmetricEigen<f64, nalgebra::Dyn>>) {
        let mut v = Vec::with_capacity(self.len());
        v.extend(self.ineq.iter().map(|(f, c, off)| c * f.value(x) - off));
        v.extend(self.eq.iter().map(|g| {
            let gv = g.value(x);
            gv * gv
        }));
        let eigs: Vec<_> = self.lmi.iter().map(|l| SymmetricEigen::new(l.eval(x))).collect();
        for e in &eigs {
            v.extend(e.eigenvalues.iter().copied());
        }
        (v, eigs)
    }

    /// Largest raw violation `max{f_i, g_j²}`.
    pub fn max_violation(&self, x: &DMatrix<f64>) -> f64 {
        self.terms(x).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn gradient_at(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (terms, eigs) = self.terms_with_eigen(x);
        let weights = softmax(&terms, self.m);
        let mut g = DMatrix::zeros(x.nrows(), x.ncols());
        let n_ineq = self.ineq.len();
        let n_scalar = n_ineq + self.eq.len();
        for (k, w) in weights[..n_scalar].iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            if k < n_ineq {
                let (f, c, _) = self.ineq[k];
                g += f.gradient(x) * (c * w);
            } else {
                let eqf = self.eq[k - n_ineq];
                let gv = eqf.value(x);
                g += eqf.gradient(x) * (2.0 * gv * w);
            }
        }
        let mut offset = n_scalar;
        for (l, e) in self.lmi.iter().zip(&eigs) {
            let k = l.size();
            let w = &weights[offset..offset + k];
            offset += k;
            if w.iter().all(|&wi| wi == 0.0) {
                continue;
            }
            let scaled = DMatrix::from_fn(k, k, |i, j| e.eigenvectors[(i, j)] * w[j]);
            g += l.adjoint(&(scaled * e.eigenvectors.transpose()));
        }
        linalg::symmetrize(&g)
    }
}

impl SmoothObjective for Penalty<'_> {
    fn value(&self, x: &DMatrix<f64>) -> f64 {
        log_sum_exp(&self.terms(x), self.m)
    }

    fn gradient(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.gradient_at(x)
    }

    fn along<'b>(&'b self, x: &'b DMatrix<f64>, dir: &'b DMatrix<f64>) -> Box<dyn Fn(f64) -> f64 + 'b> {
        let ineq: Vec<_> = self.ineq.iter().map(|(f, c, off)| (f.along(x, dir), *c, *off)).collect();
        let eq: Vec<_> = self.eq.iter().map(|g| g.along(x, dir)).collect();
        let lmi: Vec<_> = self.lmi.iter().map(|l| (l.eval(x), l.linear(dir))).collect();
        let m = self.m;
        let n = self.len();
        Box::new(move |t| {
            let mut terms = Vec::with_capacity(n);
            terms.extend(ineq.iter().map(|(f, c, off)| c * f(t) - off));
            terms.extend(eq.iter().map(|g| {
                let v = g(t);
                v * v
            }));
            for (l0, l1) in &lmi {
                terms.extend((l0 + l1 * t).symmetric_eigenvalues().iter().copied());
            }
            log_sum_exp(&terms, m)
        })
    }
}

/// `(1/m) log Σ exp(m v_k)` with max-subtraction.
pub fn log_sum_exp(values: &[f64], m: f64) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = values.iter().map(|v| (m * (v - max)).exp()).sum();
    max + s.ln() / m
}

fn softmax(values: &[f64], m: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = values.iter().map(|v| (m * (v - max)).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `Φ(X)` at `M = log(n+m)/eps` together with the largest raw violation.
pub fn penalty_bounds_check(prob: &ConvexProblem, eps: f64, x: &DMatrix<f64>) -> Result<(f64, f64)> {
    let p = Penalty::for_problem(prob, eps)?;
    Ok((p.value(x), p.max_violation(x)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdp::problem::{AffineFunctional, FnFunctional};
    use approx::assert_relative_eq;

    fn constant(c: f64) -> FnFunctional<impl Fn(&DMatrix<f64>) -> f64 + Send + Sync, impl Fn(&DMatrix<f64>) -> DMatrix<f64> + Send + Sync> {
        FnFunctional::new(move |_x: &DMatrix<f64>| c, |x: &DMatrix<f64>| DMatrix::zeros(x.nrows(), x.ncols()))
    }

    #[test]
    fn single_constant_constraint_is_exact() {
        let f = constant(0.37);
        let p = Penalty::new(vec![(&f, 0.0)], vec![], 123.0).unwrap();
        assert_eq!(p.value(&DMatrix::zeros(2, 2)), 0.37);
    }

    #[test]
    fn two_equal_constraints_add_log2_over_m() {
        let f = constant(0.2);
        let g = constant(0.2);
        let m = 50.0;
        let p = Penalty::new(vec![(&f, 0.0), (&g, 0.0)], vec![], m).unwrap();
        assert_relative_eq!(p.value(&DMatrix::zeros(2, 2)), 0.2 + 2f64.ln() / m, epsilon = 1e-15);
    }

    #[test]
    fn empty_constraint_list_is_rejected() {
        assert!(Penalty::new(vec![], vec![], 1.0).is_err());
    }

    #[test]
    fn overflow_safe() {
        let f = constant(1e3);
        let g = constant(-1e3);
        let p = Penalty::new(vec![(&f, 0.0), (&g, 0.0)], vec![], 1e6).unwrap();
        assert_relative_eq!(p.value(&DMatrix::zeros(1, 1)), 1e3, epsilon = 1e-9);
    }

    #[test]
    fn along_matches_value() {
        let f = AffineFunctional::trace(3, 1.0, -1.0);
        let g = AffineFunctional::entry(3, 0, 1, 0.3);
        let p = Penalty::new(vec![(&f, 0.1)], vec![&g], 40.0).unwrap();
        let x = DMatrix::identity(3, 3) * 0.2;
        let d = DMatrix::from_fn(3, 3, |i, j| if i == j { 0.1 } else { 0.05 });
        let along = p.along(&x, &d);
        for t in [0.0, 0.25, 1.0] {
            assert_relative_eq!(along(t), p.value(&(&x + &d * t)), epsilon = 1e-13);
        }
    }

    #[test]
    fn matrix_inequality_terms() {
        use crate::sdp::problem::{BlockLayout, LinearMatrixIneq};
        use std::sync::Arc;
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]);
        let prob = ConvexProblem {
            dim: 4,
            objective: Arc::new(AffineFunctional::trace(4, 1.0, 0.0)),
            ineq: vec![Arc::new(AffineFunctional::trace(4, 1.0, -3.0))],
            eq: vec![],
            lmi: vec![
                LinearMatrixIneq::block_upper(4, 0..2, 1.0),
                LinearMatrixIneq::norm_bound(4, 0..2, 2..4, &g, &DMatrix::identity(2, 2), 0.8),
            ],
            trace_bound: 1.0,
            layout: BlockLayout::new(4),
            objective_floor: None,
        };
        let p = Penalty::for_problem(&prob, 1e-2).unwrap();
        assert_eq!(p.len(), 1 + 2 + 4);
        let x = DMatrix::from_fn(4, 4, |i, j| ((i * 3 + j * 7) as f64).sin() * 0.4);
        let x = &x * x.transpose() + DMatrix::identity(4, 4) * 0.3;
        // value from the eigenvalues directly
        let mut terms = vec![x.trace() - 3.0];
        for l in &prob.lmi {
            terms.extend(l.eval(&x).symmetric_eigenvalues().iter().copied());
        }
        assert_relative_eq!(p.value(&x), log_sum_exp(&terms, p.sharpness()), epsilon = 1e-12);
        let grad = p.gradient(&x);
        let h = 1e-6;
        for i in 0..4 {
            for j in i..4 {
                let mut e = DMatrix::zeros(4, 4);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                let fd = (p.value(&(&x + &e * h)) - p.value(&(&x - &e * h))) / (2.0 * h);
                assert!((fd - grad.dot(&e)).abs() < 1e-5 * (1.0 + fd.abs()), "({i},{j}) {fd} vs {}", grad.dot(&e));
            }
        }
        let d = DMatrix::from_fn(4, 4, |i, j| ((i + j) as f64).cos() * 0.1);
        let along = p.along(&x, &d);
        for t in [0.0, 0.3, 1.0] {
            assert_relative_eq!(along(t), p.value(&(&x + &d * t)), epsilon = 1e-12);
        }
    }
}
