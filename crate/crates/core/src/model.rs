//! Model parameterization, stability predicates, closed-form iterated moments
//! and trajectory sampling.
//!
//! A metastable state `s` carries a Gaussian envelope `N(mu_s, sigma_s)` and
//! local affine dynamics `x_t = a_s x_{t-1} + b_s + w_t`, `w_t ~ N(0, q_s)`.
//! The model is stable when `||a_s||_2 <= eta`, `q_s + a_s sigma_s a_sᵀ ⪯ sigma_s`
//! and `b_s = mu_s - a_s mu_s`: the iterated mean then converges to `mu_s` and
//! the iterated covariance never exceeds `sigma_s`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, MsldsError, Result};
use crate::linalg;

/// Default spectral-norm bound on every `a_s`.
pub const DEFAULT_ETA: f64 = 0.99;
/// Default envelope eigenvalue floor, relative to the mean diagonal.
pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-6;
/// Default noise eigenvalue floor, relative to the paired envelope's mean diagonal.
pub const DEFAULT_Q_FLOOR: f64 = 1e-8;
/// Default tolerance on the Lyapunov and norm conditions.
pub const DEFAULT_FEAS_TOL: f64 = 1e-6;

const STOCHASTIC_TOL: f64 = 1e-12;
const SHIFT_REL_TOL: f64 = 1e-8;

/// How the first frame of a trajectory enters the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FirstFrame {
    /// `x_1` only conditions the first transition; the hidden chain starts from `pi`.
    #[default]
    Context,
    /// `x_1` is scored under the state envelope `N(mu_s, sigma_s)`.
    Envelope,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateGaussian {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
}

impl StateGaussian {
    /// Builds an envelope with the default eigenvalue floor.
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        Self::with_floor(mu, sigma, DEFAULT_SIGMA_FLOOR)
    }

    /// Symmetrizes `sigma` and clamps its eigenvalues to `floor_rel * mean_diag`.
    pub fn with_floor(mu: DVector<f64>, sigma: DMatrix<f64>, floor_rel: f64) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(MsldsError::InvalidParams("zero-dimensional envelope".into()));
        }
        check_dim(d, sigma.nrows())?;
        check_dim(d, sigma.ncols())?;
        if !mu.iter().all(|x| x.is_finite()) || !linalg::is_finite_matrix(&sigma) {
            return Err(MsldsError::NonFinite("state envelope".into()));
        }
        let sigma = linalg::floor_covariance(&sigma, floor_rel);
        Ok(Self { mu, sigma })
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateDynamics {
    a: DMatrix<f64>,
    b: DVector<f64>,
    q: DMatrix<f64>,
}

impl StateDynamics {
    /// Raw constructor: checks shapes, finiteness and that `q` is positive definite.
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, q: DMatrix<f64>) -> Result<Self> {
        let d = b.len();
        check_dim(d, a.nrows())?;
        check_dim(d, a.ncols())?;
        check_dim(d, q.nrows())?;
        check_dim(d, q.ncols())?;
        if !linalg::is_finite_matrix(&a) || !b.iter().all(|x| x.is_finite()) || !linalg::is_finite_matrix(&q) {
            return Err(MsldsError::NonFinite("state dynamics".into()));
        }
        let q = linalg::symmetrize(&q);
        if linalg::cholesky(&q).is_none() {
            return Err(MsldsError::NotPositiveDefinite("noise covariance q".into()));
        }
        Ok(Self { a, b, q })
    }

    /// Dynamics anchored to an envelope: `b = mu - a mu` and `q` floored at
    /// `q_floor_rel * mean_diag(sigma)`.
    pub fn anchored(a: DMatrix<f64>, q: DMatrix<f64>, g: &StateGaussian, q_floor_rel: f64) -> Result<Self> {
        let b = shift_from_mean(&a, g.mu())?;
        check_dim(g.dim(), q.nrows())?;
        let floor = q_floor_rel * linalg::mean_diag(g.sigma()).abs().max(f64::MIN_POSITIVE);
        let q = linalg::floor_eigenvalues(&q, floor);
        Self::new(a, b, q)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }
}

/// Full parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    trans: DMatrix<f64>,
    pi: DVector<f64>,
    dynamics: Vec<StateDynamics>,
    gaussians: Vec<StateGaussian>,
    first_frame: FirstFrame,
}

impl ModelParams {
    /// Validates the structural invariants (stochastic `trans` and `pi`,
    /// consistent shapes). Stability is checked separately by
    /// [`ModelParams::stability_reports`], since unconstrained baselines are
    /// allowed to violate it.
    pub fn new(
        trans: DMatrix<f64>,
        pi: DVector<f64>,
        dynamics: Vec<StateDynamics>,
        gaussians: Vec<StateGaussian>,
    ) -> Result<Self> {
        let k = pi.len();
        if k == 0 {
            return Err(MsldsError::InvalidParams("no hidden states".into()));
        }
        check_dim(k, trans.nrows())?;
        check_dim(k, trans.ncols())?;
        check_dim(k, dynamics.len())?;
        check_dim(k, gaussians.len())?;
        let d = gaussians[0].dim();
        for (dy, g) in dynamics.iter().zip(&gaussians) {
            check_dim(d, dy.dim())?;
            check_dim(d, g.dim())?;
        }
        check_stochastic_vector(pi.as_slice(), "pi")?;
        for i in 0..k {
            let row: Vec<f64> = trans.row(i).iter().copied().collect();
            check_stochastic_vector(&row, &format!("trans row {i}"))?;
        }
        Ok(Self { trans, pi, dynamics, gaussians, first_frame: FirstFrame::Context })
    }

    pub fn with_first_frame(mut self, first_frame: FirstFrame) -> Self {
        self.first_frame = first_frame;
        self
    }

    pub fn n_states(&self) -> usize {
        self.pi.len()
    }

    pub fn dim(&self) -> usize {
        self.gaussians[0].dim()
    }

    pub fn trans(&self) -> &DMatrix<f64> {
        &self.trans
    }

    pub fn pi(&self) -> &DVector<f64> {
        &self.pi
    }

    pub fn dynamics(&self) -> &[StateDynamics] {
        &self.dynamics
    }

    pub fn gaussians(&self) -> &[StateGaussian] {
        &self.gaussians
    }

    pub fn first_frame(&self) -> FirstFrame {
        self.first_frame
    }

    pub fn stability_reports(&self, eta: f64, tol: f64) -> Vec<StabilityReport> {
        self.dynamics
            .iter()
            .zip(&self.gaussians)
            .map(|(dy, g)| check_stability(dy, g, eta, tol))
            .collect()
    }

    pub fn is_stable(&self, eta: f64, tol: f64) -> bool {
        self.stability_reports(eta, tol).iter().all(StabilityReport::passes)
    }

    /// Returns a copy with state `s` replaced.
    pub fn with_state(&self, s: usize, dynamics: StateDynamics, gaussian: StateGaussian) -> Result<Self> {
        let mut dyns = self.dynamics.clone();
        let mut gs = self.gaussians.clone();
        dyns[s] = dynamics;
        gs[s] = gaussian;
        Ok(Self::new(self.trans.clone(), self.pi.clone(), dyns, gs)?.with_first_frame(self.first_frame))
    }
}

fn check_stochastic_vector(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(MsldsError::InvalidParams(format!("{what} has negative or non-finite entries")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > STOCHASTIC_TOL {
        return Err(MsldsError::InvalidParams(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// A contiguous observation sequence; row `t` is frame `x_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    data: DMatrix<f64>,
    source_id: String,
}

impl Trajectory {
    pub fn new(data: DMatrix<f64>, source_id: impl Into<String>) -> Result<Self> {
        if data.nrows() < 2 {
            return Err(MsldsError::Data(format!("trajectory needs at least 2 frames, got {}", data.nrows())));
        }
        if data.ncols() == 0 {
            return Err(MsldsError::Data("trajectory has zero dimensions".into()));
        }
        if !linalg::is_finite_matrix(&data) {
            return Err(MsldsError::NonFinite("trajectory data".into()));
        }
        Ok(Self { data, source_id: source_id.into() })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn frame(&self, t: usize) -> DVector<f64> {
        self.data.row(t).transpose()
    }
}

/// `b = mu - a mu`: the shift that makes `mu` the fixed point of `x -> a x + b`.
pub fn shift_from_mean(a: &DMatrix<f64>, mu: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(mu.len(), a.nrows())?;
    check_dim(mu.len(), a.ncols())?;
    Ok(mu - a * mu)
}

/// Outcome of [`check_stability`]. Margins are slacks: positive means satisfied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityReport {
    pub spectral_norm: f64,
    /// `eta - ||a||_2`.
    pub norm_margin: f64,
    pub norm_ok: bool,
    /// Smallest eigenvalue of `sigma - q - a sigma aᵀ`.
    pub lyapunov_margin: f64,
    pub lyapunov_ok: bool,
    /// `||b - (mu - a mu)|| / max(1, ||mu||)`.
    pub shift_residual: f64,
    pub shift_ok: bool,
}

impl StabilityReport {
    pub fn passes(&self) -> bool {
        self.norm_ok && self.lyapunov_ok && self.shift_ok
    }
}

pub fn check_stability(dy: &StateDynamics, g: &StateGaussian, eta: f64, tol: f64) -> StabilityReport {
    let a = dy.a();
    let norm = linalg::spectral_norm(a);
    let lyap = g.sigma() - dy.q() - a * g.sigma() * a.transpose();
    let lyap_min = linalg::min_eigenvalue(&lyap);
    let expected_b = g.mu() - a * g.mu();
    let shift_residual = (dy.b() - expected_b).norm() / g.mu().norm().max(1.0);
    StabilityReport {
        spectral_norm: norm,
        norm_margin: eta - norm,
        norm_ok: norm <= eta + tol,
        lyapunov_margin: lyap_min,
        lyapunov_ok: lyap_min >= -tol,
        shift_residual,
        shift_ok: shift_residual <= SHIFT_REL_TOL,
    }
}

/// Exact mean and covariance of `x_n` after `n` steps of one state's dynamics
/// from the deterministic start `x0`.
pub fn iterated_moments(dy: &StateDynamics, x0: &DVector<f64>, n: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if n == 0 {
        return Err(MsldsError::InvalidParams("iterated_moments needs n >= 1".into()));
    }
    check_dim(dy.dim(), x0.len())?;
    let a = dy.a();
    let at = a.transpose();
    let mut mean = x0.clone();
    let mut cov = DMatrix::zeros(dy.dim(), dy.dim());
    for step in 0..n {
        mean = a * &mean + dy.b();
        cov = dy.q() + a * &cov * &at;
        if !mean.iter().all(|x| x.is_finite()) || !linalg::is_finite_matrix(&cov) {
            return Err(MsldsError::Overflow(format!("iterated moments diverged at step {}", step + 1)));
        }
    }
    Ok((mean, linalg::symmetrize(&cov)))
}

/// A sampled hidden-state path and its observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    pub states: Vec<usize>,
    pub obs: DMatrix<f64>,
}

/// Samples `n_steps` frames. Bit-reproducible for a fixed seed.
///
/// With `x0 = None` the first frame is drawn from the first state's envelope;
/// otherwise `x0` plays the role of the frame preceding the first sample.
/// Explosive (unconstrained) parameter sets are sampled as-is.
pub fn sample_trajectory(params: &ModelParams, n_steps: usize, seed: u64, x0: Option<&DVector<f64>>) -> Result<SampledPath> {
    sample_trajectory_stream(params, n_steps, seed, 0, x0)
}

/// Like [`sample_trajectory`], drawing from an independent stream per
/// trajectory index so that batches can be sampled in parallel.
pub fn sample_trajectory_stream(
    params: &ModelParams,
    n_steps: usize,
    seed: u64,
    stream: u64,
    x0: Option<&DVector<f64>>,
) -> Result<SampledPath> {
    if n_steps == 0 {
        return Err(MsldsError::InvalidParams("n_steps must be positive".into()));
    }
    let d = params.dim();
    if let Some(x) = x0 {
        check_dim(d, x.len())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);

    let noise_chol: Vec<DMatrix<f64>> = params
        .dynamics()
        .iter()
        .map(|dy| {
            linalg::cholesky(dy.q())
                .map(|c| c.l())
                .ok_or_else(|| MsldsError::NotPositiveDefinite("noise covariance q".into()))
        })
        .collect::<Result<_>>()?;

    let mut states = Vec::with_capacity(n_steps);
    let mut obs = DMatrix::zeros(n_steps, d);
    let mut z = DVector::zeros(d);

    let mut s = draw_categorical(&mut rng, params.pi().iter().copied());
    let mut x = match x0 {
        Some(prev) => {
            let dy = &params.dynamics()[s];
            fill_normal(&mut rng, &mut z);
            dy.a() * prev + dy.b() + &noise_chol[s] * &z
        }
        None => {
            let g = &params.gaussians()[s];
            let l = linalg::cholesky(g.sigma())
                .map(|c| c.l())
                .ok_or_else(|| MsldsError::NotPositiveDefinite("envelope sigma".into()))?;
            fill_normal(&mut rng, &mut z);
            g.mu() + l * &z
        }
    };
    states.push(s);
    obs.set_row(0, &x.transpose());

    for t in 1..n_steps {
        s = draw_categorical(&mut rng, params.trans().row(s).iter().copied());
        let dy = &params.dynamics()[s];
        fill_normal(&mut rng, &mut z);
        x = dy.a() * &x + dy.b() + &noise_chol[s] * &z;
        states.push(s);
        obs.set_row(t, &x.transpose());
    }
    Ok(SampledPath { states, obs })
}

fn fill_normal(rng: &mut ChaCha8Rng, z: &mut DVector<f64>) {
    for v in z.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

/// Inverse-CDF draw; the last positive-probability index absorbs rounding.
pub(crate) fn draw_categorical(rng: &mut ChaCha8Rng, probs: impl Iterator<Item = f64> + Clone) -> usize {
    let u: f64 = rand::Rng::random(rng);
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        if p > 0.0 {
            last = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last
}
