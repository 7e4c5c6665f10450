//! Preliminary Gaussian-mixture fit that supplies the per-state envelopes
//! and a feasible starting model for EM.
//!
//! Frames are pooled across trajectories. The mixture uses full covariances,
//! seeded by k-means++, with a fixed eigenvalue floor so every M-step is the
//! exact constrained maximizer and the log-likelihood never decreases.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MsldsError, Result};
use crate::estep::{log_sum_exp, GaussFactor};
use crate::linalg;
use crate::model::{ModelParams, StateDynamics, StateGaussian, Trajectory, DEFAULT_SIGMA_FLOOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmConfig {
    pub max_iters: usize,
    /// Relative log-likelihood improvement below which EM stops.
    pub tol: f64,
    /// Covariance eigenvalue floor relative to the pooled mean variance.
    pub sigma_floor_rel: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self { max_iters: 200, tol: 1e-6, sigma_floor_rel: DEFAULT_SIGMA_FLOOR }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub weights: DVector<f64>,
    pub gaussians: Vec<StateGaussian>,
    /// `T×K`, rows sum to one.
    pub responsibilities: DMatrix<f64>,
    pub loglik: f64,
    /// Log-likelihood before each M-step, then at the returned parameters.
    pub loglik_trace: Vec<f64>,
    /// Components re-seeded after collapsing.
    pub rescues: usize,
}

/// Stacks every frame of every trajectory into one `T×d` matrix.
pub fn pool_frames(trajs: &[Trajectory]) -> Result<DMatrix<f64>> {
    let first = trajs.first().ok_or_else(|| MsldsError::EmptyInput("no trajectories".into()))?;
    let d = first.dim();
    let total: usize = trajs.iter().map(|t| t.len()).sum();
    let mut out = DMatrix::zeros(total, d);
    let mut row = 0;
    for t in trajs {
        crate::error::check_dim(d, t.dim())?;
        out.rows_mut(row, t.len()).copy_from(t.data());
        row += t.len();
    }
    Ok(out)
}

/// k-means++ seeding: each new centroid is drawn with probability
/// proportional to the squared distance from the nearest chosen one.
pub fn kmeanspp_seed(data: &DMatrix<f64>, k: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = data.nrows();
    if k == 0 {
        return Err(MsldsError::InvalidConfig("need at least one component".into()));
    }
    if n < k {
        return Err(MsldsError::Data(format!("{n} points cannot seed {k} centroids")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = DMatrix::zeros(k, data.ncols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from(&data.row(first));
    let mut dist: Vec<f64> = (0..n).map(|i| (data.row(i) - data.row(first)).norm_squared()).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        if !(total > 0.0) {
            return Err(MsldsError::Data(format!("fewer than {k} distinct points")));
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in dist.iter().enumerate() {
            if w > 0.0 {
                pick = i;
                if u < w {
                    break;
                }
                u -= w;
            }
        }
        centers.row_mut(c).copy_from(&data.row(pick));
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min((data.row(i) - data.row(pick)).norm_squared());
        }
    }
    Ok(centers)
}

fn sample_covariance(data: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = data.nrows() as f64;
    let mean = data.row_mean().transpose();
    let centered = DMatrix::from_fn(data.nrows(), data.ncols(), |i, j| data[(i, j)] - mean[j]);
    (mean, linalg::symmetrize(&(centered.transpose() * &centered / n)))
}

/// Per-point log-densities `log w_k + log N(x_i; mu_k, sigma_k)`, `T×K`.
fn log_joint(data: &DMatrix<f64>, weights: &DVector<f64>, means: &[DVector<f64>], covs: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let factors = covs
        .iter()
        .enumerate()
        .map(|(k, c)| GaussFactor::new(c, &format!("mixture covariance {k}")))
        .collect::<Result<Vec<_>>>()?;
    let k = means.len();
    let rows: Vec<Vec<f64>> = (0..data.nrows())
        .into_par_iter()
        .map(|i| {
            let x = data.row(i).transpose();
            (0..k).map(|c| weights[c].ln() + factors[c].log_density(&(&x - &means[c]))).collect()
        })
        .collect();
    Ok(DMatrix::from_fn(data.nrows(), k, |i, c| rows[i][c]))
}

/// Responsibilities and total log-likelihood; the sum runs in row order.
fn expectation(lj: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let mut resp = DMatrix::zeros(lj.nrows(), lj.ncols());
    let mut ll = linalg::CompensatedSum::default();
    for i in 0..lj.nrows() {
        let norm = log_sum_exp(lj.row(i).iter().copied());
        ll.add(norm);
        for c in 0..lj.ncols() {
            resp[(i, c)] = (lj[(i, c)] - norm).exp();
        }
    }
    (resp, ll.value())
}

/// Full-covariance EM from a k-means++ start.
pub fn gmm_em(data: &DMatrix<f64>, k: usize, seed: u64, cfg: &GmmConfig) -> Result<GmmFit> {
    let (n, d) = data.shape();
    if n == 0 || d == 0 {
        return Err(MsldsError::EmptyInput("mixture fit needs data".into()));
    }
    if !linalg::is_finite_matrix(data) {
        return Err(MsldsError::NonFinite("mixture data".into()));
    }
    if n < k * (d + 1) {
        log::warn!("only {n} points for {k} components in dimension {d}; covariances will lean on the floor");
    }
    let centers = kmeanspp_seed(data, k, seed)?;
    let (global_mean, global_cov) = sample_covariance(data);
    let floor = cfg.sigma_floor_rel * linalg::mean_diag(&global_cov).abs().max(f64::MIN_POSITIVE);
    let global_cov = linalg::floor_eigenvalues(&global_cov, floor);

    // hard assignment to the nearest seed starts the soft iterations
    let mut resp = DMatrix::zeros(n, k);
    for i in 0..n {
        let nearest = (0..k)
            .map(|c| (data.row(i) - centers.row(c)).norm_squared())
            .enumerate()
            .fold((0, f64::INFINITY), |best, (c, v)| if v < best.1 { (c, v) } else { best })
            .0;
        resp[(i, nearest)] = 1.0;
    }
    let mut rescues = 0;
    let (mut weights, mut means, mut covs) = maximize(data, &resp, floor, &global_mean, &global_cov, &mut rescues, None);
    let mut trace = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..cfg.max_iters {
        let lj = log_joint(data, &weights, &means, &covs)?;
        let (r, ll) = expectation(&lj);
        trace.push(ll);
        if !ll.is_finite() {
            return Err(MsldsError::NonFinite("mixture log-likelihood".into()));
        }
        let converged = prev.is_finite() && ll - prev < cfg.tol * ll.abs().max(1.0);
        prev = ll;
        resp = r;
        if converged {
            break;
        }
        (weights, means, covs) = maximize(data, &resp, floor, &global_mean, &global_cov, &mut rescues, Some(&lj));
    }
    let lj = log_joint(data, &weights, &means, &covs)?;
    let (resp, loglik) = expectation(&lj);
    if trace.last() != Some(&loglik) {
        trace.push(loglik);
    }
    let gaussians = means
        .into_iter()
        .zip(covs)
        .map(|(m, c)| StateGaussian::with_floor(m, c, cfg.sigma_floor_rel))
        .collect::<Result<Vec<_>>>()?;
    Ok(GmmFit { weights, gaussians, responsibilities: resp, loglik, loglik_trace: trace, rescues })
}

type Components = (DVector<f64>, Vec<DVector<f64>>, Vec<DMatrix<f64>>);

fn maximize(
    data: &DMatrix<f64>,
    resp: &DMatrix<f64>,
    floor: f64,
    global_mean: &DVector<f64>,
    global_cov: &DMatrix<f64>,
    rescues: &mut usize,
    log_joint: Option<&DMatrix<f64>>,
) -> Components {
    let (n, d) = data.shape();
    let k = resp.ncols();
    let mut weights = DVector::zeros(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    let mut taken = Vec::new();
    for c in 0..k {
        let nk: f64 = resp.column(c).sum();
        if nk < 1e-8 * n as f64 {
            // re-seed from the worst-explained point not already used
            let worst = match log_joint {
                Some(lj) => (0..n)
                    .filter(|i| !taken.contains(i))
                    .map(|i| (i, log_sum_exp(lj.row(i).iter().copied())))
                    .fold((0, f64::INFINITY), |b, (i, v)| if v < b.1 { (i, v) } else { b })
                    .0,
                None => 0,
            };
            taken.push(worst);
            log::info!("mixture component {c} collapsed; re-seeded at point {worst}");
            *rescues += 1;
            weights[c] = 1.0 / n as f64;
            means.push(if log_joint.is_some() { data.row(worst).transpose() } else { global_mean.clone() });
            covs.push(global_cov.clone());
            continue;
        }
        let mut mean = DVector::zeros(d);
        for i in 0..n {
            mean += data.row(i).transpose() * resp[(i, c)];
        }
        mean /= nk;
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..n {
            let r = data.row(i).transpose() - &mean;
            cov += &r * r.transpose() * resp[(i, c)];
        }
        cov /= nk;
        weights[c] = nk;
        means.push(mean);
        covs.push(linalg::floor_eigenvalues(&linalg::symmetrize(&cov), floor));
    }
    let total = weights.sum();
    weights /= total;
    (weights, means, covs)
}

/// Starting model: envelopes and `pi` from the mixture, sticky transitions,
/// `a = 0`, `b = mu`, `q = q_scale · sigma`. Any `q_scale` in `(0, 1]`
/// satisfies the stability conditions with `a = 0`.
pub fn init_model(fit: &GmmFit, p_stay: f64, q_scale: f64) -> Result<ModelParams> {
    let k = fit.gaussians.len();
    if !(0.0..=1.0).contains(&p_stay) || !(q_scale > 0.0 && q_scale <= 1.0) {
        return Err(MsldsError::InvalidConfig(format!("p_stay {p_stay} or q_scale {q_scale} out of range")));
    }
    let trans = if k == 1 {
        DMatrix::from_element(1, 1, 1.0)
    } else {
        let off = (1.0 - p_stay) / (k - 1) as f64;
        DMatrix::from_fn(k, k, |i, j| if i == j { p_stay } else { off })
    };
    let d = fit.gaussians[0].dim();
    let dynamics = fit
        .gaussians
        .iter()
        .map(|g| StateDynamics::new(DMatrix::zeros(d, d), g.mu().clone(), g.sigma() * q_scale))
        .collect::<Result<Vec<_>>>()?;
    let pi = &fit.weights / fit.weights.sum();
    ModelParams::new(trans, pi, dynamics, fit.gaussians.clone())
}
