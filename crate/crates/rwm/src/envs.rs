//! Deterministic desk-scale plants.
//!
//! Two environments: a 2D point mass reaching a goal under damped
//! velocity-level dynamics, and a linear plant `z' = Az + Ba + w` used as an
//! oracle testbed where every Jacobian is known in closed form. Observations
//! are the state vector verbatim; there is no encoder.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Clips each component into `[lo, hi]`.
pub fn clip_to_bounds(a: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    a.iter().map(|&x| x.clamp(lo, hi)).collect()
}

/// Effective actuation under multiplicative gain error:
/// `a_eff[i] = a_total[i] * (1 + p[i])`, clipped to the action bounds.
pub fn apply_perturbation(a_total: &[f64], p: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    assert_eq!(a_total.len(), p.len(), "perturbation length mismatch");
    a_total
        .iter()
        .zip(p)
        .map(|(&a, &pi)| (a * (1.0 + pi)).clamp(lo, hi))
        .collect()
}

// ── Point mass ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PointMassConfig {
    pub dt: f64,
    pub damping: f64,
    pub goal: [f64; 2],
    pub action_low: f64,
    pub action_high: f64,
    pub episode_len: u64,
    /// Constant external force added to every acceleration, e.g. a
    /// gravity-like load. Holding position then requires a nonzero action,
    /// which makes actuator-gain errors visible at steady state instead of
    /// only during transients.
    pub bias_force: [f64; 2],
    /// Draw the goal uniformly from the unit square on reset instead of
    /// using the fixed goal.
    pub randomize_goal: bool,
    /// Draw the start position uniformly from the unit square on reset
    /// instead of starting at the origin.
    pub randomize_start: bool,
}

impl Default for PointMassConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            damping: 0.9,
            goal: [0.5, 0.5],
            action_low: -2.0,
            action_high: 2.0,
            episode_len: 200,
            bias_force: [0.0, 0.0],
            randomize_goal: false,
            randomize_start: false,
        }
    }
}

impl PointMassConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidConfig("dt must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping < 1.0) {
            return Err(Error::InvalidConfig("damping must be in (0, 1)".into()));
        }
        if self.action_low >= self.action_high {
            return Err(Error::InvalidConfig("action bounds inverted".into()));
        }
        if self.episode_len == 0 {
            return Err(Error::InvalidConfig("episode_len must be >= 1".into()));
        }
        if self.bias_force.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidConfig("bias_force must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMassState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub goal: [f64; 2],
    pub t: u64,
}

impl PointMassState {
    pub fn at_origin(goal: [f64; 2]) -> Self {
        Self {
            position: [0.0, 0.0],
            velocity: [0.0, 0.0],
            goal,
            t: 0,
        }
    }

    /// Direct state observation: position, velocity, goal.
    pub fn observation(&self) -> Vec<f64> {
        vec![
            self.position[0],
            self.position[1],
            self.velocity[0],
            self.velocity[1],
            self.goal[0],
            self.goal[1],
        ]
    }

    pub fn distance_to_goal(&self) -> f64 {
        let dx = self.position[0] - self.goal[0];
        let dy = self.position[1] - self.goal[1];
        (dx * dx + dy * dy).sqrt()
    }
}

/// Observation width of the point mass (position, velocity, goal).
pub const POINT_MASS_OBS_DIM: usize = 6;
pub const POINT_MASS_ACTION_DIM: usize = 2;

#[derive(Debug, Clone)]
pub struct StepResult {
    pub next_state: PointMassState,
    pub reward: f64,
    pub observation: Vec<f64>,
}

/// One step of the damped point mass:
/// `v' = damping * v + dt * (a_eff + bias_force)`, `x' = x + dt * v'`,
/// reward `-||x' - goal||`. The action is clipped to the configured bounds
/// before it enters the dynamics; the bias force is not.
pub fn pointmass_step(
    cfg: &PointMassConfig,
    state: &PointMassState,
    a_eff: &[f64],
) -> Result<StepResult> {
    if a_eff.len() != POINT_MASS_ACTION_DIM {
        return Err(Error::DimMismatch {
            context: "point-mass action",
            expected: POINT_MASS_ACTION_DIM,
            got: a_eff.len(),
        });
    }
    if a_eff.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("point-mass action".into()));
    }
    let a = clip_to_bounds(a_eff, cfg.action_low, cfg.action_high);
    let mut velocity = [0.0; 2];
    let mut position = [0.0; 2];
    for i in 0..2 {
        velocity[i] = cfg.damping * state.velocity[i] + cfg.dt * (a[i] + cfg.bias_force[i]);
        position[i] = state.position[i] + cfg.dt * velocity[i];
    }
    let next = PointMassState {
        position,
        velocity,
        goal: state.goal,
        t: state.t + 1,
    };
    let reward = -next.distance_to_goal();
    let observation = next.observation();
    Ok(StepResult {
        next_state: next,
        reward,
        observation,
    })
}

// ── Linear testbed ───────────────────────────────────────────────────

/// Stable linear plant `z' = A z + B a + w`. Every Jacobian of the true
/// dynamics is a constant matrix, which makes analytic bounds exact.
#[derive(Debug, Clone)]
pub struct LinearPlant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub noise_std: f64,
}

impl LinearPlant {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, noise_std: f64) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::InvalidConfig("A must be square".into()));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::InvalidConfig("B row count must match A".into()));
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::InvalidConfig("noise_std must be >= 0".into()));
        }
        let rho = a
            .complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max);
        if rho >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "A must be open-loop stable, spectral radius {rho:.4}"
            )));
        }
        if b.rank(1e-10) < b.ncols() {
            return Err(Error::InvalidConfig("B must have full column rank".into()));
        }
        Ok(Self { a, b, noise_std })
    }

    /// `kappa * I` for A, identity B: the testbed used in most oracle runs.
    pub fn scaled_identity(dim: usize, kappa: f64, noise_std: f64) -> Result<Self> {
        Self::new(
            DMatrix::identity(dim, dim) * kappa,
            DMatrix::identity(dim, dim),
            noise_std,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }
}

/// `z' = A z + B a_eff + w` with `w ~ N(0, noise_std^2 I)` drawn from the
/// supplied stream. A zero noise_std consumes no randomness.
pub fn linear_step(
    plant: &LinearPlant,
    z: &[f64],
    a_eff: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if z.len() != plant.state_dim() {
        return Err(Error::DimMismatch {
            context: "linear plant state",
            expected: plant.state_dim(),
            got: z.len(),
        });
    }
    if a_eff.len() != plant.action_dim() {
        return Err(Error::DimMismatch {
            context: "linear plant action",
            expected: plant.action_dim(),
            got: a_eff.len(),
        });
    }
    let n = plant.state_dim();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += plant.a[(i, j)] * z[j];
        }
        for j in 0..plant.action_dim() {
            acc += plant.b[(i, j)] * a_eff[j];
        }
        out[i] = acc;
    }
    if plant.noise_std > 0.0 {
        let normal = Normal::new(0.0, plant.noise_std).expect("validated noise_std");
        for v in &mut out {
            *v += normal.sample(rng);
        }
    }
    Ok(out)
}

// ── Environment trait ────────────────────────────────────────────────

/// Episode-level interface the experiment runner drives. Implementations are
/// deterministic given the reset seed.
pub trait Environment {
    fn observation_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn action_bounds(&self) -> (f64, f64);
    fn episode_len(&self) -> u64;
    /// Resets to an initial state derived from `seed` and returns the first
    /// observation.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    /// Advances one step with an already-perturbed action. Returns
    /// (observation, reward).
    fn step(&mut self, a_eff: &[f64]) -> Result<(Vec<f64>, f64)>;
}

#[derive(Debug, Clone)]
pub struct PointMassEnv {
    pub cfg: PointMassConfig,
    pub state: PointMassState,
}

impl PointMassEnv {
    pub fn new(cfg: PointMassConfig) -> Result<Self> {
        cfg.validate()?;
        let state = PointMassState::at_origin(cfg.goal);
        Ok(Self { cfg, state })
    }
}

impl Environment for PointMassEnv {
    fn observation_dim(&self) -> usize {
        POINT_MASS_OBS_DIM
    }

    fn action_dim(&self) -> usize {
        POINT_MASS_ACTION_DIM
    }

    fn action_bounds(&self) -> (f64, f64) {
        (self.cfg.action_low, self.cfg.action_high)
    }

    fn episode_len(&self) -> u64 {
        self.cfg.episode_len
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = rng_for(seed, "env-reset");
        let position = if self.cfg.randomize_start {
            [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]
        } else {
            [0.0, 0.0]
        };
        let goal = if self.cfg.randomize_goal {
            [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]
        } else {
            self.cfg.goal
        };
        self.state = PointMassState {
            position,
            velocity: [0.0, 0.0],
            goal,
            t: 0,
        };
        self.state.observation()
    }

    fn step(&mut self, a_eff: &[f64]) -> Result<(Vec<f64>, f64)> {
        let res = pointmass_step(&self.cfg, &self.state, a_eff)?;
        self.state = res.next_state;
        Ok((res.observation, res.reward))
    }
}
