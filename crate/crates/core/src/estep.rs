//! Forward-backward inference over the hidden metastable state and the
//! per-state sufficient statistics consumed by the M-step.
//!
//! Everything runs in log space with per-step normalization. The first frame
//! of each trajectory is conditioning context only unless the model asks for
//! envelope scoring ([`FirstFrame::Envelope`]).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_dim, MsldsError, Result};
use crate::linalg::{self, CompensatedMatrix, CompensatedSum};
use crate::model::{FirstFrame, ModelParams, Trajectory};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Cholesky factor and log-determinant of a Gaussian covariance.
#[derive(Debug, Clone)]
pub(crate) struct GaussFactor {
    l: DMatrix<f64>,
    log_det: f64,
}

impl GaussFactor {
    pub(crate) fn new(cov: &DMatrix<f64>, what: &str) -> Result<Self> {
        let ch = linalg::cholesky(cov).ok_or_else(|| MsldsError::NotPositiveDefinite(what.to_string()))?;
        let l = ch.l();
        let log_det = 2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(MsldsError::NotPositiveDefinite(what.to_string()));
        }
        Ok(Self { l, log_det })
    }

    pub(crate) fn log_density(&self, resid: &DVector<f64>) -> f64 {
        let z = self.l.solve_lower_triangular(resid).expect("cholesky factor has a positive diagonal");
        -0.5 * (resid.len() as f64 * LN_2PI + self.log_det + z.norm_squared())
    }
}

/// Per-state factorizations so each emission costs one triangular solve.
#[derive(Debug, Clone)]
pub struct EmissionCache {
    noise: Vec<GaussFactor>,
    envelope: Option<Vec<GaussFactor>>,
}

impl EmissionCache {
    pub fn new(params: &ModelParams) -> Result<Self> {
        let noise = params
            .dynamics()
            .iter()
            .enumerate()
            .map(|(s, d)| GaussFactor::new(d.q(), &format!("noise covariance of state {s}")))
            .collect::<Result<Vec<_>>>()?;
        let envelope = match params.first_frame() {
            FirstFrame::Context => None,
            FirstFrame::Envelope => Some(
                params
                    .gaussians()
                    .iter()
                    .enumerate()
                    .map(|(s, g)| GaussFactor::new(g.sigma(), &format!("envelope covariance of state {s}")))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        Ok(Self { noise, envelope })
    }

    /// `log N(x_cur; a_s x_prev + b_s, q_s)`.
    pub fn log_emission(&self, params: &ModelParams, s: usize, x_prev: &DVector<f64>, x_cur: &DVector<f64>) -> f64 {
        let dy = &params.dynamics()[s];
        let resid = x_cur - dy.a() * x_prev - dy.b();
        self.noise[s].log_density(&resid)
    }

    fn log_first(&self, params: &ModelParams, s: usize, x: &DVector<f64>) -> f64 {
        match &self.envelope {
            None => 0.0,
            Some(env) => env[s].log_density(&(x - params.gaussians()[s].mu())),
        }
    }
}

pub fn conditional_log_emission(
    params: &ModelParams,
    s: usize,
    x_prev: &DVector<f64>,
    x_cur: &DVector<f64>,
) -> Result<f64> {
    if s >= params.n_states() {
        return Err(MsldsError::InvalidParams(format!("state {s} out of range")));
    }
    check_dim(params.dim(), x_prev.len())?;
    check_dim(params.dim(), x_cur.len())?;
    let dy = &params.dynamics()[s];
    let f = GaussFactor::new(dy.q(), &format!("noise covariance of state {s}"))?;
    Ok(f.log_density(&(x_cur - dy.a() * x_prev - dy.b())))
}

/// `T×K` table; row 0 holds the first-frame term (zero in context mode).
pub fn log_emission_table(params: &ModelParams, traj: &Trajectory) -> Result<DMatrix<f64>> {
    check_dim(params.dim(), traj.dim())?;
    let cache = EmissionCache::new(params)?;
    Ok(emission_table(&cache, params, traj))
}

fn emission_table(cache: &EmissionCache, params: &ModelParams, traj: &Trajectory) -> DMatrix<f64> {
    let (t_len, k) = (traj.len(), params.n_states());
    let mut e = DMatrix::zeros(t_len, k);
    let mut prev = traj.frame(0);
    for s in 0..k {
        e[(0, s)] = cache.log_first(params, s, &prev);
    }
    for t in 1..t_len {
        let cur = traj.frame(t);
        for s in 0..k {
            e[(t, s)] = cache.log_emission(params, s, &prev, &cur);
        }
        prev = cur;
    }
    e
}

pub(crate) fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    max + v.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn log_matrix(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(f64::ln)
}

fn forward_table(params: &ModelParams, e: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let (t_len, k) = e.shape();
    let log_t = log_matrix(params.trans());
    let log_pi = params.pi().map(f64::ln);
    let mut alpha = DMatrix::zeros(t_len, k);
    let mut norm = DVector::zeros(t_len);
    let mut a = DVector::from_fn(k, |s, _| log_pi[s] + e[(0, s)]);
    for t in 0..t_len {
        if t > 0 {
            a = DVector::from_fn(k, |j, _| {
                log_sum_exp((0..k).map(|i| alpha[(t - 1, i)] + log_t[(i, j)])) + e[(t, j)]
            });
        }
        let c = log_sum_exp(a.iter().copied());
        norm[t] = c;
        for s in 0..k {
            alpha[(t, s)] = a[s] - c;
        }
    }
    (alpha, norm)
}

fn backward_table(params: &ModelParams, e: &DMatrix<f64>, norm: &DVector<f64>) -> DMatrix<f64> {
    let (t_len, k) = e.shape();
    let log_t = log_matrix(params.trans());
    let mut beta = DMatrix::zeros(t_len, k);
    for t in (0..t_len - 1).rev() {
        for i in 0..k {
            beta[(t, i)] =
                log_sum_exp((0..k).map(|j| log_t[(i, j)] + e[(t + 1, j)] + beta[(t + 1, j)])) - norm[t + 1];
        }
    }
    beta
}

/// Filtered log-posteriors `log P(s_t | x_{1:t})` and per-step log normalizers.
pub fn forward(params: &ModelParams, traj: &Trajectory) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let e = log_emission_table(params, traj)?;
    Ok(forward_table(params, &e))
}

/// Rescaled backward messages; the last row is zero.
pub fn backward(params: &ModelParams, traj: &Trajectory, log_normalizers: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_dim(traj.len(), log_normalizers.len())?;
    let e = log_emission_table(params, traj)?;
    Ok(backward_table(params, &e, log_normalizers))
}

/// Posteriors for one trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryPosterior {
    /// `T×K`; `gamma[(t, s)] = P(s_t = s | x_{1:T})`.
    pub gamma: DMatrix<f64>,
    /// `(T−1)×K²`, row `t` holding `P(s_t = i, s_{t+1} = j | x_{1:T})` at column `i K + j`.
    pub xi: DMatrix<f64>,
    pub loglik: f64,
}

impl TrajectoryPosterior {
    pub fn n_states(&self) -> usize {
        self.gamma.ncols()
    }

    pub fn xi_at(&self, t: usize) -> DMatrix<f64> {
        let k = self.n_states();
        DMatrix::from_fn(k, k, |i, j| self.xi[(t, i * k + j)])
    }

    /// `Σ_t xi[t]` as a `K×K` matrix.
    pub fn xi_sum(&self) -> DMatrix<f64> {
        let k = self.n_states();
        let mut acc = vec![CompensatedSum::default(); k * k];
        for row in self.xi.row_iter() {
            for (c, v) in acc.iter_mut().zip(row.iter()) {
                c.add(*v);
            }
        }
        DMatrix::from_fn(k, k, |i, j| acc[i * k + j].value())
    }
}

pub fn posteriors(
    params: &ModelParams,
    traj: &Trajectory,
    log_alpha: &DMatrix<f64>,
    log_beta: &DMatrix<f64>,
    log_normalizers: &DVector<f64>,
) -> Result<TrajectoryPosterior> {
    let e = log_emission_table(params, traj)?;
    Ok(posteriors_table(params, &e, log_alpha, log_beta, log_normalizers))
}

fn posteriors_table(
    params: &ModelParams,
    e: &DMatrix<f64>,
    alpha: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    norm: &DVector<f64>,
) -> TrajectoryPosterior {
    let (t_len, k) = e.shape();
    let log_t = log_matrix(params.trans());
    let mut gamma = DMatrix::zeros(t_len, k);
    for t in 0..t_len {
        let row: Vec<f64> = (0..k).map(|s| alpha[(t, s)] + beta[(t, s)]).collect();
        let z = log_sum_exp(row.iter().copied());
        for s in 0..k {
            gamma[(t, s)] = (row[s] - z).exp();
        }
    }
    let mut xi = DMatrix::zeros(t_len.saturating_sub(1), k * k);
    let mut cell = vec![0.0; k * k];
    for t in 0..t_len - 1 {
        for i in 0..k {
            for j in 0..k {
                cell[i * k + j] = alpha[(t, i)] + log_t[(i, j)] + e[(t + 1, j)] + beta[(t + 1, j)];
            }
        }
        let z = log_sum_exp(cell.iter().copied());
        for (c, v) in cell.iter().enumerate() {
            xi[(t, c)] = (v - z).exp();
        }
    }
    let mut ll = CompensatedSum::default();
    for c in norm.iter() {
        ll.add(*c);
    }
    TrajectoryPosterior { gamma, xi, loglik: ll.value() }
}

/// Posterior-weighted raw moments over frame pairs `(x_{t−1}, x_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawStats {
    pub w: f64,
    pub sxx_lag: DMatrix<f64>,
    pub sxx_prev: DMatrix<f64>,
    pub sxx_cur: DMatrix<f64>,
    pub sx_cur: DVector<f64>,
    pub sx_prev: DVector<f64>,
}

impl RawStats {
    pub fn zeros(d: usize) -> Self {
        Self {
            w: 0.0,
            sxx_lag: DMatrix::zeros(d, d),
            sxx_prev: DMatrix::zeros(d, d),
            sxx_cur: DMatrix::zeros(d, d),
            sx_cur: DVector::zeros(d),
            sx_prev: DVector::zeros(d),
        }
    }

    pub fn add(&mut self, other: &RawStats) {
        self.w += other.w;
        self.sxx_lag += &other.sxx_lag;
        self.sxx_prev += &other.sxx_prev;
        self.sxx_cur += &other.sxx_cur;
        self.sx_cur += &other.sx_cur;
        self.sx_prev += &other.sx_prev;
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite()
            && linalg::is_finite_matrix(&self.sxx_lag)
            && linalg::is_finite_matrix(&self.sxx_prev)
            && linalg::is_finite_matrix(&self.sxx_cur)
            && self.sx_cur.iter().all(|x| x.is_finite())
            && self.sx_prev.iter().all(|x| x.is_finite())
    }
}

/// Raw moments per state, summing over `t = 2..T` with weight `gamma[t][s]`.
pub fn accumulate_stats(gamma: &DMatrix<f64>, traj: &Trajectory) -> Result<Vec<RawStats>> {
    check_dim(traj.len(), gamma.nrows())?;
    let (t_len, d) = (traj.len(), traj.dim());
    let data = traj.data();
    let frame = |t: usize| -> Vec<f64> { data.row(t).iter().copied().collect() };
    let mut out = Vec::with_capacity(gamma.ncols());
    for s in 0..gamma.ncols() {
        let mut w = CompensatedSum::default();
        let mut lag = CompensatedMatrix::zeros(d, d);
        let mut prev = CompensatedMatrix::zeros(d, d);
        let mut cur = CompensatedMatrix::zeros(d, d);
        let mut x_cur = CompensatedMatrix::zeros(d, 1);
        let mut x_prev = CompensatedMatrix::zeros(d, 1);
        let mut xp = frame(0);
        for t in 1..t_len {
            let xc = frame(t);
            let g = gamma[(t, s)];
            if g != 0.0 {
                w.add(g);
                lag.add_outer(g, &xc, &xp);
                prev.add_outer(g, &xp, &xp);
                cur.add_outer(g, &xc, &xc);
                x_cur.add_scaled(g, &xc);
                x_prev.add_scaled(g, &xp);
            }
            xp = xc;
        }
        out.push(RawStats {
            w: w.value(),
            sxx_lag: lag.to_matrix(),
            sxx_prev: linalg::symmetrize(&prev.to_matrix()),
            sxx_cur: linalg::symmetrize(&cur.to_matrix()),
            sx_cur: x_cur.to_matrix().column(0).into_owned(),
            sx_prev: x_prev.to_matrix().column(0).into_owned(),
        });
    }
    Ok(out)
}

/// Full E-step output over a set of trajectories.
#[derive(Debug, Clone)]
pub struct EStepResult {
    /// One entry per input trajectory, in input order.
    pub per_trajectory: Vec<TrajectoryPosterior>,
    pub loglik: f64,
    pub stats: Vec<RawStats>,
}

impl EStepResult {
    /// Gammas of all trajectories stacked in input order.
    pub fn gamma(&self) -> DMatrix<f64> {
        stack(self.per_trajectory.iter().map(|p| &p.gamma))
    }

    /// Xi rows of all trajectories stacked in input order.
    pub fn xi(&self) -> DMatrix<f64> {
        stack(self.per_trajectory.iter().map(|p| &p.xi))
    }
}

fn stack<'a>(parts: impl Iterator<Item = &'a DMatrix<f64>> + Clone) -> DMatrix<f64> {
    let rows = parts.clone().map(|m| m.nrows()).sum();
    let cols = parts.clone().next().map_or(0, |m| m.ncols());
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for m in parts {
        out.view_mut((r, 0), m.shape()).copy_from(m);
        r += m.nrows();
    }
    out
}

/// Posteriors and statistics for one trajectory.
pub fn estep_single(params: &ModelParams, cache: &EmissionCache, traj: &Trajectory) -> Result<(TrajectoryPosterior, Vec<RawStats>)> {
    check_dim(params.dim(), traj.dim())?;
    let e = emission_table(cache, params, traj);
    let (alpha, norm) = forward_table(params, &e);
    let beta = backward_table(params, &e, &norm);
    let post = posteriors_table(params, &e, &alpha, &beta, &norm);
    if !post.loglik.is_finite() {
        return Err(MsldsError::NonFinite(format!("log-likelihood of trajectory {}", traj.source_id())));
    }
    let stats = accumulate_stats(&post.gamma, traj)?;
    Ok((post, stats))
}

/// Runs trajectories on the current rayon pool and folds results in input
/// order, so the output does not depend on the thread count.
pub fn estep(params: &ModelParams, trajectories: &[Trajectory]) -> Result<EStepResult> {
    if trajectories.is_empty() {
        return Err(MsldsError::EmptyInput("no trajectories".into()));
    }
    let cache = EmissionCache::new(params)?;
    let parts: Vec<Result<(TrajectoryPosterior, Vec<RawStats>)>> =
        trajectories.par_iter().map(|tr| estep_single(params, &cache, tr)).collect();
    let mut per_trajectory = Vec::with_capacity(parts.len());
    let mut stats = vec![RawStats::zeros(params.dim()); params.n_states()];
    let mut ll = CompensatedSum::default();
    for part in parts {
        let (post, st) = part?;
        ll.add(post.loglik);
        for (acc, s) in stats.iter_mut().zip(&st) {
            acc.add(s);
        }
        per_trajectory.push(post);
    }
    Ok(EStepResult { per_trajectory, loglik: ll.value(), stats })
}

/// E-step where trajectory `i` counts `weights[i]` times: its posteriors,
/// statistics and log-likelihood are all scaled by the weight.
pub fn estep_weighted(params: &ModelParams, trajectories: &[Trajectory], weights: &[f64]) -> Result<EStepResult> {
    if weights.len() != trajectories.len() {
        return Err(MsldsError::DimensionMismatch { expected: trajectories.len(), found: weights.len() });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(MsldsError::Data("trajectory weights must be positive and finite".into()));
    }
    let mut est = estep(params, trajectories)?;
    if weights.iter().all(|&w| w == 1.0) {
        return Ok(est);
    }
    let mut stats = vec![RawStats::zeros(params.dim()); params.n_states()];
    let mut ll = CompensatedSum::default();
    for ((post, tr), &w) in est.per_trajectory.iter_mut().zip(trajectories).zip(weights) {
        post.gamma *= w;
        post.xi *= w;
        post.loglik *= w;
        ll.add(post.loglik);
        for (acc, s) in stats.iter_mut().zip(&accumulate_stats(&post.gamma, tr)?) {
            acc.add(s);
        }
    }
    est.stats = stats;
    est.loglik = ll.value();
    Ok(est)
}

/// Observed-data log-likelihood per trajectory (forward pass only).
pub fn log_likelihoods(params: &ModelParams, trajectories: &[Trajectory]) -> Result<Vec<f64>> {
    let cache = EmissionCache::new(params)?;
    trajectories
        .par_iter()
        .map(|tr| {
            check_dim(params.dim(), tr.dim())?;
            let e = emission_table(&cache, params, tr);
            let (_, norm) = forward_table(params, &e);
            let mut ll = CompensatedSum::default();
            for c in norm.iter() {
                ll.add(*c);
            }
            Ok(ll.value())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{StateDynamics, StateGaussian};
    use std::f64::consts::PI;

    fn scalar_model(a: f64, q: f64) -> ModelParams {
        let g = StateGaussian::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let dy = StateDynamics::new(DMatrix::from_element(1, 1, a), DVector::zeros(1), DMatrix::from_element(1, 1, q)).unwrap();
        ModelParams::new(DMatrix::identity(1, 1), DVector::from_element(1, 1.0), vec![dy], vec![g]).unwrap()
    }

    #[test]
    fn standard_normal_at_origin() {
        let p = scalar_model(0.0, 1.0);
        let v = conditional_log_emission(&p, 0, &DVector::from_element(1, 3.0), &DVector::zeros(1)).unwrap();
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        let p = scalar_model(0.5, 1.0);
        let v = conditional_log_emission(&p, 0, &DVector::from_element(1, 2.0), &DVector::from_element(1, 1.0)).unwrap();
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn single_state_forward_backward() {
        let p = scalar_model(0.5, 0.7);
        let traj = Trajectory::new(DMatrix::from_column_slice(4, 1, &[0.1, -0.3, 0.8, 0.2]), "t").unwrap();
        let (alpha, norm) = forward(&p, &traj).unwrap();
        assert!(alpha.iter().all(|x| *x == 0.0));
        assert_eq!(norm[0], 0.0);
        for t in 1..4 {
            let v = conditional_log_emission(&p, 0, &traj.frame(t - 1), &traj.frame(t)).unwrap();
            assert!((norm[t] - v).abs() < 1e-14);
        }
        let beta = backward(&p, &traj, &norm).unwrap();
        assert!(beta.iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn hand_summed_stats() {
        let traj = Trajectory::new(DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]), "t").unwrap();
        let st = accumulate_stats(&DMatrix::from_element(3, 1, 1.0), &traj).unwrap();
        assert_eq!(st[0].w, 2.0);
        assert_eq!(st[0].sxx_lag[(0, 0)], 8.0);
        assert_eq!(st[0].sxx_prev[(0, 0)], 5.0);
        assert_eq!(st[0].sxx_cur[(0, 0)], 13.0);
        let zero = accumulate_stats(&DMatrix::zeros(3, 1), &traj).unwrap();
        assert_eq!(zero[0], RawStats::zeros(1));
    }
}
