//! Random instances and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use mslds::{FirstFrame, ModelParams, StateDynamics, StateGaussian, Trajectory};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| normal(rng))
}

pub fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = random_matrix(rng, n, n);
    (&m + m.transpose()) * 0.5
}

pub fn random_spd(rng: &mut ChaCha8Rng, d: usize, ridge: f64) -> DMatrix<f64> {
    let l = random_matrix(rng, d, d);
    &l * l.transpose() / d as f64 + DMatrix::identity(d, d) * ridge
}

pub fn min_eig(m: &DMatrix<f64>) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().min()
}

pub fn max_eig(m: &DMatrix<f64>) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().max()
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

/// Principal square root and its inverse of an SPD matrix.
pub fn sqrt_pair(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let e = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let f = |g: fn(f64) -> f64| {
        let d = DMatrix::from_diagonal(&e.eigenvalues.map(g));
        &e.eigenvectors * d * e.eigenvectors.transpose()
    };
    (f(f64::sqrt), f(|x| 1.0 / x.sqrt()))
}

/// A state passing every stability condition: `A` built in the coordinates
/// that whiten `Σ`, with `‖A‖ <= 0.95`, and `Q = c (Σ − AΣAᵀ)`, `c` in (0.2, 1).
pub fn random_stable_state(rng: &mut ChaCha8Rng, d: usize) -> (StateDynamics, StateGaussian) {
    let sigma = random_spd(rng, d, 0.3);
    let (half, inv_half) = sqrt_pair(&sigma);
    let raw = random_matrix(rng, d, d);
    let target: f64 = rng.random_range(0.05..0.95);
    let a_white = &raw * (target / spectral_norm(&raw));
    let mut a = &half * a_white * &inv_half;
    let n = spectral_norm(&a);
    if n > 0.95 {
        a *= 0.95 / n;
    }
    let c: f64 = rng.random_range(0.2..1.0);
    let s = &sigma - &a * &sigma * a.transpose();
    let q = (&s + s.transpose()) * (0.5 * c);
    let mu = DVector::from_fn(d, |_, _| 2.0 * normal(rng));
    let b = &mu - &a * &mu;
    (StateDynamics::new(a, b, q).unwrap(), StateGaussian::new(mu, sigma).unwrap())
}

pub fn random_stochastic(rng: &mut ChaCha8Rng, k: usize) -> DVector<f64> {
    let v = DVector::from_fn(k, |_, _| rng.random_range(0.05..1.0));
    let s = v.sum();
    v / s
}

pub fn random_model(rng: &mut ChaCha8Rng, k: usize, d: usize, first_frame: FirstFrame) -> ModelParams {
    let mut trans = DMatrix::zeros(k, k);
    for i in 0..k {
        trans.set_row(i, &random_stochastic(rng, k).transpose());
    }
    let pi = random_stochastic(rng, k);
    let (dy, g): (Vec<_>, Vec<_>) = (0..k).map(|_| random_stable_state(rng, d)).unzip();
    ModelParams::new(trans, pi, dy, g).unwrap().with_first_frame(first_frame)
}

pub fn random_trajectory(rng: &mut ChaCha8Rng, t: usize, d: usize, scale: f64) -> Trajectory {
    Trajectory::new(DMatrix::from_fn(t, d, |_, _| scale * normal(rng)), "random").unwrap()
}

/// Textbook multivariate normal log-density with explicit inverse and determinant.
pub fn mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = x.len() as f64;
    let r = x - mean;
    let inv = cov.clone().try_inverse().unwrap();
    let det = cov.determinant();
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + det.ln() + (r.transpose() * inv * &r)[(0, 0)])
}

pub struct Enumerated {
    pub gamma: DMatrix<f64>,
    /// Row `t`, column `i K + j`.
    pub xi: DMatrix<f64>,
    pub loglik: f64,
}

/// Posteriors by summing the joint density over every hidden sequence.
pub fn enumerate_posteriors(params: &ModelParams, traj: &Trajectory) -> Enumerated {
    let (t_len, k) = (traj.len(), params.n_states());
    let mut emis = DMatrix::zeros(t_len, k);
    for s in 0..k {
        let g = &params.gaussians()[s];
        let dy = &params.dynamics()[s];
        emis[(0, s)] = match params.first_frame() {
            FirstFrame::Context => 0.0,
            FirstFrame::Envelope => mvn_logpdf(&traj.frame(0), g.mu(), g.sigma()),
        };
        for t in 1..t_len {
            let mean = dy.a() * traj.frame(t - 1) + dy.b();
            emis[(t, s)] = mvn_logpdf(&traj.frame(t), &mean, dy.q());
        }
    }
    let n_seq = k.pow(t_len as u32);
    let mut logs = Vec::with_capacity(n_seq);
    let mut seq = vec![0usize; t_len];
    for code in 0..n_seq {
        let mut c = code;
        for slot in seq.iter_mut() {
            *slot = c % k;
            c /= k;
        }
        let mut lj = params.pi()[seq[0]].ln() + emis[(0, seq[0])];
        for t in 1..t_len {
            lj += params.trans()[(seq[t - 1], seq[t])].ln() + emis[(t, seq[t])];
        }
        logs.push(lj);
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    let loglik = max + total.ln();
    let mut gamma = DMatrix::zeros(t_len, k);
    let mut xi = DMatrix::zeros(t_len - 1, k * k);
    for (code, l) in logs.iter().enumerate() {
        let p = (l - loglik).exp();
        let mut c = code;
        for slot in seq.iter_mut() {
            *slot = c % k;
            c /= k;
        }
        for t in 0..t_len {
            gamma[(t, seq[t])] += p;
            if t + 1 < t_len {
                xi[(t, seq[t] * k + seq[t + 1])] += p;
            }
        }
    }
    Enumerated { gamma, xi, loglik }
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    (a - b).abs().max()
}

pub fn zero_objective() -> std::sync::Arc<dyn mslds::sdp::Functional> {
    std::sync::Arc::new(mslds::sdp::FnFunctional::new(
        |_x: &DMatrix<f64>| 0.0,
        |x: &DMatrix<f64>| DMatrix::zeros(x.nrows(), x.ncols()),
    ))
}

/// `tr(W X) + c` with every entry of `W` as a term.
pub fn dense_affine(w: &DMatrix<f64>, c: f64) -> mslds::sdp::AffineFunctional {
    let n = w.nrows();
    let terms = (0..n).flat_map(|i| (0..n).map(move |j| (i, j, w[(i, j)]))).collect();
    mslds::sdp::AffineFunctional::new(n, terms, c)
}

/// A random point of the unit-trace spectrahedron.
pub fn random_density(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let p = random_spd(rng, n, 1e-3);
    let t = p.trace();
    p / t
}
