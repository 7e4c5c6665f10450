//! Top eigenvector of a symmetric matrix for the Frank-Wolfe linear oracle.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::SolverConfig;
use crate::linalg::deterministic_start;

const KRYLOV_DIM: usize = 40;

/// Unit vector approximating the eigenvector of the most positive eigenvalue.
///
/// Lanczos with full reorthogonalization first, then power iteration on
/// `S + c I` for each shift in the schedule, then a dense eigendecomposition.
/// Each candidate is accepted on its Rayleigh residual `‖Sv − (vᵀSv)v‖`.
pub fn approx_ev(s: &DMatrix<f64>, cfg: &SolverConfig) -> DVector<f64> {
    let n = s.nrows();
    if n == 1 {
        return DVector::from_element(1, 1.0);
    }
    let scale = inf_norm(s);
    if scale == 0.0 || !scale.is_finite() {
        return deterministic_start(n);
    }
    let tol = cfg.ev_tol * scale;
    if let Some(v) = lanczos_top(s, cfg.ev_iters, tol) {
        return v;
    }
    for &c in &cfg.ev_shift {
        if let Some(v) = shifted_power(s, c * scale, cfg.ev_iters, tol) {
            return v;
        }
    }
    log::debug!("approx_ev: iterative methods missed tolerance, using dense eigensolver (n = {n})");
    dense_top(s)
}

pub fn rayleigh_residual(s: &DMatrix<f64>, v: &DVector<f64>) -> (f64, f64) {
    let sv = s * v;
    let rho = v.dot(&sv);
    (rho, (sv - v * rho).norm())
}

fn inf_norm(s: &DMatrix<f64>) -> f64 {
    s.row_iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

fn dense_top(s: &DMatrix<f64>) -> DVector<f64> {
    let eig = SymmetricEigen::new((s + s.transpose()) * 0.5);
    let k = eig.eigenvalues.imax();
    let v = eig.eigenvectors.column(k).into_owned();
    canonical_sign(v)
}

/// Fixes the sign so the largest-magnitude entry is positive.
fn canonical_sign(v: DVector<f64>) -> DVector<f64> {
    let k = v.iamax();
    if v[k] < 0.0 {
        -v
    } else {
        v
    }
}

/// Explicitly restarted Lanczos; each restart begins from the best Ritz vector.
fn lanczos_top(s: &DMatrix<f64>, budget: usize, tol: f64) -> Option<DVector<f64>> {
    let n = s.nrows();
    let m = n.min(KRYLOV_DIM);
    let mut start = deterministic_start(n);
    let mut used = 0;
    while used < budget {
        let mut basis: Vec<DVector<f64>> = Vec::with_capacity(m);
        let mut alpha = Vec::with_capacity(m);
        let mut beta: Vec<f64> = Vec::with_capacity(m);
        let mut q = start.clone();
        for j in 0..m {
            let mut w = s * &q;
            used += 1;
            let a = q.dot(&w);
            alpha.push(a);
            basis.push(q.clone());
            // full reorthogonalization, applied twice for stability
            for _ in 0..2 {
                for b in &basis {
                    let c = b.dot(&w);
                    w.axpy(-c, b, 1.0);
                }
            }
            let nb = w.norm();
            if j + 1 == m || nb <= 1e-14 * tol.max(f64::MIN_POSITIVE).max(a.abs()) {
                break;
            }
            beta.push(nb);
            q = w / nb;
        }
        let k = alpha.len();
        let t = DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                alpha[i]
            } else if i + 1 == j || j + 1 == i {
                beta[i.min(j)]
            } else {
                0.0
            }
        });
        let eig = SymmetricEigen::new(t);
        let top = eig.eigenvalues.imax();
        let y = eig.eigenvectors.column(top);
        let mut v = DVector::zeros(n);
        for (i, b) in basis.iter().enumerate() {
            v.axpy(y[i], b, 1.0);
        }
        let nv = v.norm();
        if nv == 0.0 || !nv.is_finite() {
            return None;
        }
        v /= nv;
        let (_, resid) = rayleigh_residual(s, &v);
        if resid <= tol {
            return Some(canonical_sign(v));
        }
        if k == n {
            // full Krylov space and still inaccurate: rounding, let the fallbacks decide
            return None;
        }
        start = v;
    }
    None
}

fn shifted_power(s: &DMatrix<f64>, shift: f64, iters: usize, tol: f64) -> Option<DVector<f64>> {
    let n = s.nrows();
    let mut v = deterministic_start(n);
    for _ in 0..iters {
        let sv = s * &v;
        let rho = v.dot(&sv);
        if (&sv - &v * rho).norm() <= tol {
            return Some(canonical_sign(v));
        }
        let w = sv + &v * shift;
        let nw = w.norm();
        if nw == 0.0 || !nw.is_finite() {
            return None;
        }
        v = w / nw;
    }
    None
}
