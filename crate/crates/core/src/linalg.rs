//! Dense symmetric-matrix helpers shared by the model, the solver and the M-step.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

/// Power-iteration cap for [`spectral_norm`] before falling back to a dense SVD.
pub const SPECTRAL_NORM_ITERS: usize = 2_000;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigen-decomposition of the symmetric part of `m`.
pub fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(symmetrize(m))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    sym_eigen(m).eigenvalues.min()
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    sym_eigen(m).eigenvalues.max()
}

/// Rebuilds `m` with every eigenvalue clamped into `[lo, hi]`.
pub fn clamp_eigenvalues(m: &DMatrix<f64>, lo: f64, hi: f64) -> DMatrix<f64> {
    map_eigenvalues(m, |v| v.clamp(lo, hi))
}

pub fn map_eigenvalues(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = sym_eigen(m);
    let vals = eig.eigenvalues.map(f);
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&vals) * v.transpose()))
}

pub fn mean_diag(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.diagonal().sum() / m.nrows() as f64
}

/// Symmetrizes and raises every eigenvalue to at least `rel * mean_diag(m)`.
pub fn floor_covariance(m: &DMatrix<f64>, rel: f64) -> DMatrix<f64> {
    let scale = mean_diag(m).abs();
    let floor = if scale > 0.0 { rel * scale } else { rel };
    floor_eigenvalues(m, floor)
}

/// Raises eigenvalues below `floor`; a matrix already above the floor is only
/// symmetrized, so it round-trips bit-exactly when already symmetric.
pub fn floor_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = symmetrize(m);
    if sym.nrows() == 0 || sym_eigen(&sym).eigenvalues.min() >= floor {
        return sym;
    }
    map_eigenvalues(&sym, |v| v.max(floor))
}

/// Largest singular value.
///
/// Power iteration on `mᵀm` from a fixed start vector; accepted once the
/// eigen-residual drops below `1e-11` relative. Falls back to a dense SVD when
/// the iteration cap is hit.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let n = m.ncols();
    if n == 0 || m.nrows() == 0 {
        return 0.0;
    }
    let gram = m.transpose() * m;
    let mut v = deterministic_start(n);
    let mut rho = 0.0;
    for _ in 0..SPECTRAL_NORM_ITERS {
        let w = &gram * &v;
        rho = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            // v lies in the null space; either m = 0 or the start was unlucky.
            break;
        }
        let resid = (&w - &v * rho).norm();
        if resid <= 1e-11 * rho.abs().max(f64::MIN_POSITIVE) {
            return rho.max(0.0).sqrt();
        }
        v = w / norm;
    }
    if rho == 0.0 && m.iter().all(|x| *x == 0.0) {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Deterministic unit vector with no zero entries and no special symmetry.
pub fn deterministic_start(n: usize) -> DVector<f64> {
    let golden = 0.618_033_988_749_895_f64;
    let v = DVector::from_fn(n, |i, _| 1.0 + ((i as f64 + 1.0) * golden).fract());
    let norm = v.norm();
    v / norm
}

/// Symmetric square root and inverse square root of an SPD matrix, with
/// eigenvalues floored at `floor` before taking roots.
pub fn sqrt_and_inv_sqrt(m: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let eig = sym_eigen(m);
    let v = &eig.eigenvectors;
    let vals = eig.eigenvalues.map(|x| x.max(floor));
    let sq = v * DMatrix::from_diagonal(&vals.map(f64::sqrt)) * v.transpose();
    let isq = v * DMatrix::from_diagonal(&vals.map(|x| 1.0 / x.sqrt())) * v.transpose();
    (symmetrize(&sq), symmetrize(&isq))
}

pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    Cholesky::new(symmetrize(m))
}

/// `log det m` for SPD `m`, `None` otherwise.
pub fn log_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    let ch = cholesky(m)?;
    let l = ch.l_dirty();
    let mut acc = 0.0;
    for i in 0..m.nrows() {
        let d = l[(i, i)];
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        acc += d.ln();
    }
    Some(2.0 * acc)
}

pub fn inverse_spd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    cholesky(m).map(|c| symmetrize(&c.inverse()))
}

pub fn is_finite_matrix(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Entrywise compensated accumulation of matrices of a fixed shape.
#[derive(Debug, Clone)]
pub struct CompensatedMatrix {
    nrows: usize,
    ncols: usize,
    cells: Vec<CompensatedSum>,
}

impl CompensatedMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, cells: vec![CompensatedSum::default(); nrows * ncols] }
    }

    /// Adds `w * u vᵀ`.
    pub fn add_outer(&mut self, w: f64, u: &[f64], v: &[f64]) {
        for i in 0..self.nrows {
            let wu = w * u[i];
            for j in 0..self.ncols {
                self.cells[i * self.ncols + j].add(wu * v[j]);
            }
        }
    }

    pub fn add_scaled(&mut self, w: f64, u: &[f64]) {
        for (i, c) in self.cells.iter_mut().enumerate() {
            c.add(w * u[i]);
        }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.nrows, self.ncols, |i, j| self.cells[i * self.ncols + j].value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spectral_norm_identity_and_diagonal() {
        assert_relative_eq!(spectral_norm(&DMatrix::identity(5, 5)), 1.0, max_relative = 1e-12);
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -4.0]));
        assert_relative_eq!(spectral_norm(&m), 4.0, max_relative = 1e-12);
        assert_eq!(spectral_norm(&DMatrix::zeros(3, 3)), 0.0);
    }

    #[test]
    fn spectral_norm_matches_svd_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = DMatrix::from_fn(10, 10, |_, _| rng.random_range(-1.0..1.0));
            let svd = m.clone().svd(false, false).singular_values.max();
            assert_relative_eq!(spectral_norm(&m), svd, max_relative = 1e-8);
        }
    }

    #[test]
    fn clamp_reassembles() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let c = clamp_eigenvalues(&m, 0.0, 2.0);
        // eigenvalues 1 and 3 -> 1 and 2
        let e = sym_eigen(&c).eigenvalues;
        assert_relative_eq!(e.min(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(e.max(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn compensated_sum_beats_naive_on_cancellation() {
        let mut s = CompensatedSum::default();
        s.add(1e16);
        s.add(1.0);
        s.add(-1e16);
        assert_eq!(s.value(), 1.0);
    }

    #[test]
    fn log_det_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(log_det_spd(&m).is_none());
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        assert_relative_eq!(log_det_spd(&m).unwrap(), 6f64.ln(), epsilon = 1e-14);
    }
}
