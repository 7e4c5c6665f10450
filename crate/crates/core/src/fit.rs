//! The EM driver: mixture initialization, then alternating E- and M-steps
//! until the observed log-likelihood stops improving.

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MsldsError, Result};
use crate::estep::{estep_weighted, log_likelihoods};
use crate::gmm::{gmm_em, init_model, pool_frames, GmmConfig};
use crate::io::Dataset;
use crate::model::{FirstFrame, ModelParams, StateDynamics, DEFAULT_SIGMA_FLOOR};
use crate::mstep::{mstep, mstep_hmm, MstepConfig, StateReport, StepStatus};

/// Consecutive small improvements required before declaring convergence.
pub const PATIENCE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Stability-constrained switching model.
    #[default]
    Mslds,
    /// Same model without the stability constraints.
    Slds,
    /// Gaussian HMM: independent emissions `N(mu_s, sigma_s)`.
    Hmm,
}

impl std::str::FromStr for Mode {
    type Err = MsldsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mslds" => Ok(Mode::Mslds),
            "slds" => Ok(Mode::Slds),
            "hmm" => Ok(Mode::Hmm),
            _ => Err(MsldsError::InvalidConfig(format!("unknown mode {s:?} (expected mslds, slds or hmm)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub n_states: usize,
    pub mode: Mode,
    pub max_em_iters: usize,
    /// Relative observed log-likelihood improvement counted as "no progress".
    pub em_tol: f64,
    pub seed: u64,
    /// Worker threads; 0 uses rayon's default.
    pub threads: usize,
    /// Diagonal of the initial transition matrix.
    pub p_stay: f64,
    /// Initial `Q = q_init_scale · Σ`.
    pub q_init_scale: f64,
    /// Start every state from `A = c·I` instead of `A = 0`. Meant for
    /// probing the unconstrained model; rejected in mslds mode when the start
    /// is not stable.
    pub init_a_norm: Option<f64>,
    /// Envelope eigenvalue floor relative to the mean variance.
    pub sigma_floor_rel: f64,
    /// Re-estimate `mu` and `sigma` in hmm mode.
    pub hmm_update_envelopes: bool,
    pub first_frame: FirstFrame,
    pub gmm: GmmConfig,
    /// `constrained` is overridden by the mode.
    pub mstep: MstepConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_states: 2,
            mode: Mode::Mslds,
            max_em_iters: 100,
            em_tol: 1e-5,
            seed: 0,
            threads: 0,
            p_stay: 0.95,
            q_init_scale: 0.5,
            init_a_norm: None,
            sigma_floor_rel: DEFAULT_SIGMA_FLOOR,
            hmm_update_envelopes: true,
            first_frame: FirstFrame::Context,
            gmm: GmmConfig::default(),
            mstep: MstepConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 {
            return Err(MsldsError::InvalidConfig("n_states must be positive".into()));
        }
        if !(self.em_tol > 0.0) || !(self.sigma_floor_rel > 0.0) || !(self.gmm.tol > 0.0) {
            return Err(MsldsError::InvalidConfig("tolerances and floors must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_stay) || !(self.q_init_scale > 0.0 && self.q_init_scale <= 1.0) {
            return Err(MsldsError::InvalidConfig("p_stay must lie in [0, 1] and q_init_scale in (0, 1]".into()));
        }
        if let Some(c) = self.init_a_norm {
            if !(c.is_finite() && c >= 0.0) {
                return Err(MsldsError::InvalidConfig(format!("init_a_norm must be finite and >= 0, got {c}")));
            }
        }
        self.effective_mstep().validate()
    }

    fn effective_mstep(&self) -> MstepConfig {
        MstepConfig { constrained: self.mode == Mode::Mslds, ..self.mstep.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convergence {
    /// `PATIENCE` consecutive relative improvements below `em_tol`.
    Tolerance,
    MaxIterations,
}

/// One EM iteration. Record `i` describes the parameters after `i` M-steps;
/// record 0 is the initial model and carries no state reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loglik: f64,
    /// Per-state surrogate at these parameters, under the statistics of the
    /// E-step that preceded the M-step producing them.
    pub surrogates: Vec<f64>,
    pub states: Vec<StateReport>,
    /// Every state passes the stability check.
    pub stable: bool,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub mode: Mode,
    pub iterations: Vec<IterationRecord>,
    pub convergence: Convergence,
    /// Log-likelihood of the mixture used for initialization (frames treated as independent).
    pub gmm_loglik: f64,
}

impl FitReport {
    pub fn final_loglik(&self) -> f64 {
        self.iterations.last().map_or(f64::NAN, |r| r.loglik)
    }

    /// Iteration trace as CSV: one row per iteration, then per state the
    /// surrogate and the two solver statuses.
    pub fn write_csv(&self, out: &mut dyn Write) -> Result<()> {
        let k = self.iterations.iter().map(|r| r.surrogates.len()).max().unwrap_or(0);
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["iteration".to_string(), "loglik".into(), "stable".into(), "wall_seconds".into()];
        for s in 0..k {
            header.extend([format!("surrogate_{s}"), format!("a_status_{s}"), format!("q_status_{s}")]);
        }
        w.write_record(&header)?;
        for r in &self.iterations {
            let mut row = vec![r.iteration.to_string(), format!("{:e}", r.loglik), r.stable.to_string(), format!("{:.6}", r.wall_seconds)];
            for s in 0..k {
                row.push(r.surrogates.get(s).map_or(String::new(), |v| format!("{v:e}")));
                let st = r.states.get(s);
                row.push(st.map_or(String::new(), |x| status_name(x.a_status).into()));
                row.push(st.map_or(String::new(), |x| status_name(x.q_status).into()));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn status_name(s: StepStatus) -> &'static str {
    match s {
        StepStatus::Skipped => "skipped",
        StepStatus::Accepted => "accepted",
        StepStatus::Regressed => "regressed",
        StepStatus::Failed => "failed",
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub params: ModelParams,
    pub report: FitReport,
}

/// Mixture fit on pooled frames turned into the starting model for `cfg.mode`.
pub fn initial_model(data: &Dataset, cfg: &FitConfig) -> Result<(ModelParams, f64)> {
    let pooled = pool_frames(&data.trajectories)?;
    let gcfg = GmmConfig { sigma_floor_rel: cfg.sigma_floor_rel, ..cfg.gmm.clone() };
    let g = gmm_em(&pooled, cfg.n_states, cfg.seed, &gcfg)?;
    let mut params = init_model(&g, cfg.p_stay, cfg.q_init_scale)?;
    match cfg.mode {
        Mode::Hmm => params = hmm_form(&params)?,
        _ => {
            if let Some(c) = cfg.init_a_norm {
                params = with_scaled_identity(&params, c)?;
            }
            params = params.with_first_frame(cfg.first_frame);
        }
    }
    Ok((params, g.loglik))
}

/// `A = 0, b = mu, Q = Σ` with the first frame scored under the envelope.
fn hmm_form(params: &ModelParams) -> Result<ModelParams> {
    let dynamics = params
        .gaussians()
        .iter()
        .map(|g| StateDynamics::new(DMatrix::zeros(g.dim(), g.dim()), g.mu().clone(), g.sigma().clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelParams::new(params.trans().clone(), params.pi().clone(), dynamics, params.gaussians().to_vec())?
        .with_first_frame(FirstFrame::Envelope))
}

fn with_scaled_identity(params: &ModelParams, c: f64) -> Result<ModelParams> {
    let d = params.dim();
    let dynamics = params
        .dynamics()
        .iter()
        .zip(params.gaussians())
        .map(|(dy, g)| StateDynamics::anchored(DMatrix::identity(d, d) * c, dy.q().clone(), g, 0.0))
        .collect::<Result<Vec<_>>>()?;
    ModelParams::new(params.trans().clone(), params.pi().clone(), dynamics, params.gaussians().to_vec())
}

/// Fits a model from the mixture initialization.
pub fn fit(data: &Dataset, cfg: &FitConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    with_pool(cfg.threads, || {
        let (init, gmm_loglik) = initial_model(data, cfg)?;
        let mut out = fit_from_inner(data, init, cfg)?;
        out.report.gmm_loglik = gmm_loglik;
        Ok(out)
    })
}

/// Runs EM from a given starting model.
pub fn fit_from(data: &Dataset, init: ModelParams, cfg: &FitConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    with_pool(cfg.threads, || fit_from_inner(data, init, cfg))
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| MsldsError::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn check_data(data: &Dataset, params: &ModelParams) -> Result<()> {
    if data.trajectories.is_empty() {
        return Err(MsldsError::EmptyInput("dataset has no trajectories".into()));
    }
    for tr in &data.trajectories {
        if tr.dim() != params.dim() {
            return Err(MsldsError::DimensionMismatch { expected: params.dim(), found: tr.dim() });
        }
    }
    Ok(())
}

fn fit_from_inner(data: &Dataset, init: ModelParams, cfg: &FitConfig) -> Result<FitOutcome> {
    check_data(data, &init)?;
    let mcfg = cfg.effective_mstep();
    let eta = mcfg.eta;
    let feas_tol = mcfg.feas_tol;
    if cfg.mode == Mode::Mslds && !init.is_stable(eta, feas_tol) {
        return Err(MsldsError::InvalidConfig("mslds mode needs a stable starting model".into()));
    }
    let start = Instant::now();
    let mut params = init;
    let mut iterations: Vec<IterationRecord> = Vec::new();
    let mut pending: Option<(Vec<StateReport>, Vec<f64>)> = None;
    let mut quiet = 0;
    let mut convergence = Convergence::MaxIterations;
    for iter in 0..=cfg.max_em_iters {
        let est = estep_weighted(&params, &data.trajectories, &data.weights)?;
        if !est.loglik.is_finite() {
            return Err(MsldsError::NonFinite(format!("log-likelihood at iteration {iter}")));
        }
        let (states, surrogates) = pending.take().unwrap_or_default();
        if let Some(prev) = iterations.last() {
            let rel = (est.loglik - prev.loglik) / prev.loglik.abs().max(f64::MIN_POSITIVE);
            quiet = if rel < cfg.em_tol { quiet + 1 } else { 0 };
        }
        iterations.push(IterationRecord {
            iteration: iter,
            loglik: est.loglik,
            surrogates,
            states,
            stable: params.is_stable(eta, feas_tol),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        log::info!("iteration {iter}: loglik {:.6e}", est.loglik);
        if quiet >= PATIENCE {
            convergence = Convergence::Tolerance;
            break;
        }
        if iter == cfg.max_em_iters {
            break;
        }
        let (next, reports) = match cfg.mode {
            Mode::Hmm => mstep_hmm(
                &est,
                &data.trajectories,
                &params,
                cfg.hmm_update_envelopes,
                cfg.sigma_floor_rel,
                mcfg.trans_floor,
            )?,
            _ => mstep(&est, &params, &mcfg)?,
        };
        let surrogates = match cfg.mode {
            Mode::Hmm => vec![0.0; next.n_states()],
            _ => reports.iter().map(|r| r.surrogate_after).collect(),
        };
        pending = Some((reports, surrogates));
        params = next;
    }
    let report = FitReport { mode: cfg.mode, iterations, convergence, gmm_loglik: f64::NAN };
    Ok(FitOutcome { params, report })
}

/// Per-trajectory observed log-likelihoods and their weighted total.
pub fn score(params: &ModelParams, data: &Dataset) -> Result<(Vec<f64>, f64)> {
    check_data(data, params)?;
    let ll = log_likelihoods(params, &data.trajectories)?;
    let total = ll.iter().zip(&data.weights).map(|(l, w)| l * w).sum();
    Ok((ll, total))
}
