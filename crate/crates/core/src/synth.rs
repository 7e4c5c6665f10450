//! Piecewise Ornstein-Uhlenbeck generator: a sticky Markov chain over wells,
//! and within well `w` the relaxation `x' = x + kappa (c_w - x) + noise z`.
//!
//! Each well is exactly one MSLDS state with `A = (1 - kappa) I`,
//! `b = kappa c_w`, `Q = noise² I`, so [`ground_truth`] is available in
//! closed form.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MsldsError, Result};
use crate::model::{ModelParams, StateDynamics, StateGaussian, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Well {
    pub center: Vec<f64>,
    pub stiffness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WellsSpec {
    pub wells: Vec<Well>,
    pub noise: f64,
    /// Per-step probability of leaving the current well (uniform over the others).
    #[serde(default = "default_hop")]
    pub hop: f64,
}

fn default_hop() -> f64 {
    0.005
}

impl WellsSpec {
    pub fn dim(&self) -> usize {
        self.wells.first().map_or(0, |w| w.center.len())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.wells.is_empty() || d == 0 {
            return Err(MsldsError::InvalidConfig("wells spec needs at least one well with a non-empty center".into()));
        }
        for (i, w) in self.wells.iter().enumerate() {
            if w.center.len() != d {
                return Err(MsldsError::DimensionMismatch { expected: d, found: w.center.len() });
            }
            if w.center.iter().any(|c| !c.is_finite()) {
                return Err(MsldsError::InvalidConfig(format!("well {i}: non-finite center")));
            }
            if !(w.stiffness > 0.0 && w.stiffness < 2.0) {
                return Err(MsldsError::InvalidConfig(format!("well {i}: stiffness must lie in (0, 2), got {}", w.stiffness)));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(MsldsError::InvalidConfig(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.hop) {
            return Err(MsldsError::InvalidConfig(format!("hop must lie in [0, 1], got {}", self.hop)));
        }
        Ok(())
    }

    /// Stationary variance per coordinate inside well `i`.
    pub fn well_variance(&self, i: usize) -> f64 {
        let a = 1.0 - self.wells[i].stiffness;
        self.noise * self.noise / (1.0 - a * a)
    }

    fn trans(&self) -> DMatrix<f64> {
        let k = self.wells.len();
        if k == 1 {
            return DMatrix::identity(1, 1);
        }
        let off = self.hop / (k - 1) as f64;
        DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 - self.hop } else { off })
    }
}

/// Observations and the well index of every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPath {
    pub traj: Trajectory,
    pub states: Vec<usize>,
}

/// The first well is uniform and the first frame is drawn from that well's
/// stationary distribution, so the path is stationary from the start.
pub fn synth_double_well(spec: &WellsSpec, n_steps: usize, seed: u64) -> Result<SynthPath> {
    spec.validate()?;
    if n_steps == 0 {
        return Err(MsldsError::InvalidConfig("n_steps must be positive".into()));
    }
    let d = spec.dim();
    let k = spec.wells.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let mut w = rng.random_range(0..k);
    let sd0 = spec.well_variance(w).sqrt();
    let mut x: Vec<f64> = spec.wells[w].center.iter().map(|c| c + sd0 * normal(&mut rng)).collect();
    let mut obs = DMatrix::zeros(n_steps, d);
    let mut states = Vec::with_capacity(n_steps);
    for t in 0..n_steps {
        if t > 0 {
            if k > 1 && rng.random::<f64>() < spec.hop {
                // uniform over the other wells
                let j = rng.random_range(0..k - 1);
                w = if j >= w { j + 1 } else { j };
            }
            let well = &spec.wells[w];
            for (xi, c) in x.iter_mut().zip(&well.center) {
                *xi += well.stiffness * (c - *xi) + spec.noise * normal(&mut rng);
            }
        }
        for (j, v) in x.iter().enumerate() {
            obs[(t, j)] = *v;
        }
        states.push(w);
    }
    Ok(SynthPath { traj: Trajectory::new(obs, format!("synth-{seed}"))?, states })
}

/// The generator as a model: uniform `pi`, the hop chain as `trans`, and per
/// well the exact dynamics plus the stationary envelope.
pub fn ground_truth(spec: &WellsSpec) -> Result<ModelParams> {
    spec.validate()?;
    if !(spec.noise > 0.0) {
        return Err(MsldsError::InvalidConfig("ground truth needs noise > 0".into()));
    }
    let d = spec.dim();
    let k = spec.wells.len();
    let eye = DMatrix::<f64>::identity(d, d);
    let mut dynamics = Vec::with_capacity(k);
    let mut gaussians = Vec::with_capacity(k);
    for (i, well) in spec.wells.iter().enumerate() {
        let c = DVector::from_column_slice(&well.center);
        dynamics.push(StateDynamics::new(&eye * (1.0 - well.stiffness), &c * well.stiffness, &eye * spec.noise.powi(2))?);
        gaussians.push(StateGaussian::new(c, &eye * spec.well_variance(i))?);
    }
    ModelParams::new(spec.trans(), DVector::from_element(k, 1.0 / k as f64), dynamics, gaussians)
}
