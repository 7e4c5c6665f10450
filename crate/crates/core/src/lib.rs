//! Metastable switching linear dynamical systems.
//!
//! Learns per-state affine Gaussian dynamics `x_t = A_s x_{t-1} + b_s + w` with
//! a hidden Markov switching state, constraining every state to be stable
//! around its Gaussian envelope `N(mu_s, Sigma_s)`:
//! `||A_s||_2 <= eta` and `Q_s + A_s Sigma_s A_sᵀ ⪯ Sigma_s`.
//! The constrained M-step runs on a Frank-Wolfe solver over bounded-trace PSD
//! matrices ([`sdp`]).

pub mod error;
pub mod estep;
pub mod fit;
pub mod gmm;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod mstep;
pub mod sdp;
pub mod synth;

pub use error::{MsldsError, Result};
pub use model::{
    check_stability, iterated_moments, sample_trajectory, shift_from_mean, FirstFrame, ModelParams, SampledPath,
    StabilityReport, StateDynamics, StateGaussian, Trajectory,
};
