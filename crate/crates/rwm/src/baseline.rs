//! Frozen base policies and the thresholded action cost.
//!
//! The default base policy is a scripted PD controller on the point mass.
//! An optional learned policy (small tanh network, trained with the
//! cross-entropy method against episodic reward minus action cost) covers the
//! case where the base controller itself came from optimization. Both are
//! frozen during adaptation; nothing here ever updates online.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffnet::{Activation, Network, NetworkSpec, OutputActivation};
use crate::envs::{
    clip_to_bounds, pointmass_step, PointMassConfig, PointMassState, POINT_MASS_ACTION_DIM,
    POINT_MASS_OBS_DIM,
};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// A state-feedback controller. Implementations are pure: same observation,
/// same action.
pub trait Policy {
    fn action(&self, z: &[f64]) -> Result<Vec<f64>>;
    fn action_dim(&self) -> usize;
}

/// Quadratic penalty outside a per-component deadband:
/// `lambda * sum_i max(0, |a_i| - c)^2`. Zero on `[-c, c]^m` and C1 at the
/// splice.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ActionCostParams {
    pub c: f64,
    pub lambda: f64,
}

impl Default for ActionCostParams {
    fn default() -> Self {
        Self { c: 0.5, lambda: 0.2 }
    }
}

impl ActionCostParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(Error::InvalidConfig("cost threshold must be >= 0".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig("cost coefficient must be >= 0".into()));
        }
        Ok(())
    }
}

pub fn thresholded_action_cost(a: &[f64], params: &ActionCostParams) -> f64 {
    params.lambda
        * a.iter()
            .map(|&ai| {
                let over = (ai.abs() - params.c).max(0.0);
                over * over
            })
            .sum::<f64>()
}

// ── PD controller ────────────────────────────────────────────────────

/// `a0 = clip(k_p (goal - position) - k_d velocity)` on the point-mass
/// observation layout (position, velocity, goal).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        Self { kp: 4.0, kd: 3.0 }
    }
}

#[derive(Debug, Clone)]
pub struct PdPolicy {
    pub gains: PdGains,
    /// Feedforward added to the PD term, e.g. the action that cancels a known
    /// constant load at the goal. A competent pre-trained policy holds its
    /// target exactly, so the hold term belongs to the policy, not the
    /// adaptation layer.
    pub hold: [f64; 2],
    pub action_low: f64,
    pub action_high: f64,
}

impl PdPolicy {
    pub fn new(gains: PdGains, action_low: f64, action_high: f64) -> Result<Self> {
        Self::with_hold(gains, [0.0, 0.0], action_low, action_high)
    }

    pub fn with_hold(
        gains: PdGains,
        hold: [f64; 2],
        action_low: f64,
        action_high: f64,
    ) -> Result<Self> {
        if !(gains.kp > 0.0 && gains.kd > 0.0) {
            return Err(Error::InvalidConfig("PD gains must be positive".into()));
        }
        if hold.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidConfig("PD hold must be finite".into()));
        }
        Ok(Self {
            gains,
            hold,
            action_low,
            action_high,
        })
    }
}

impl Policy for PdPolicy {
    fn action(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != POINT_MASS_OBS_DIM {
            return Err(Error::DimMismatch {
                context: "PD observation",
                expected: POINT_MASS_OBS_DIM,
                got: z.len(),
            });
        }
        let (pos, vel, goal) = (&z[0..2], &z[2..4], &z[4..6]);
        let raw: Vec<f64> = (0..2)
            .map(|i| self.gains.kp * (goal[i] - pos[i]) - self.gains.kd * vel[i] + self.hold[i])
            .collect();
        Ok(clip_to_bounds(&raw, self.action_low, self.action_high))
    }

    fn action_dim(&self) -> usize {
        POINT_MASS_ACTION_DIM
    }
}

// ── Learned policy ───────────────────────────────────────────────────

/// Network policy whose raw output is clipped to the action range, so
/// returned actions are always within bounds. Clipping rather than a squashed
/// output keeps boundary saturation observable: a policy that wants more than
/// the bound sits exactly at it.
#[derive(Debug, Clone)]
pub struct LearnedPolicy {
    pub net: Network,
    pub action_low: f64,
    pub action_high: f64,
}

impl LearnedPolicy {
    pub fn new(net: Network, action_low: f64, action_high: f64) -> Result<Self> {
        if action_low >= action_high {
            return Err(Error::InvalidConfig("action bounds inverted".into()));
        }
        Ok(Self {
            net,
            action_low,
            action_high,
        })
    }
}

impl Policy for LearnedPolicy {
    fn action(&self, z: &[f64]) -> Result<Vec<f64>> {
        let (y, _) = self.net.forward(z)?;
        Ok(clip_to_bounds(&y, self.action_low, self.action_high))
    }

    fn action_dim(&self) -> usize {
        self.net.output_dim()
    }
}

/// Fixed action regardless of state. Used on the linear testbed where the
/// base policy must be trivially predictable.
#[derive(Debug, Clone)]
pub struct ConstantPolicy {
    pub a: Vec<f64>,
}

impl Policy for ConstantPolicy {
    fn action(&self, _z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.a.clone())
    }

    fn action_dim(&self) -> usize {
        self.a.len()
    }
}

/// The frozen base policy of an experiment.
#[derive(Debug, Clone)]
pub enum BaselinePolicy {
    Pd(PdPolicy),
    Learned(LearnedPolicy),
    Constant(ConstantPolicy),
}

impl Policy for BaselinePolicy {
    fn action(&self, z: &[f64]) -> Result<Vec<f64>> {
        match self {
            BaselinePolicy::Pd(p) => p.action(z),
            BaselinePolicy::Learned(p) => p.action(z),
            BaselinePolicy::Constant(p) => p.action(z),
        }
    }

    fn action_dim(&self) -> usize {
        match self {
            BaselinePolicy::Pd(p) => p.action_dim(),
            BaselinePolicy::Learned(p) => p.action_dim(),
            BaselinePolicy::Constant(p) => p.action_dim(),
        }
    }
}

// ── Pre-training via the cross-entropy method ────────────────────────

/// Per-iteration training record plus final evaluation, kept so tests and
/// reports can inspect how the optimization went.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub iterations: usize,
    pub episodes_used: usize,
    /// Best population fitness (return minus cost) per iteration.
    pub best_fitness: Vec<f64>,
    /// Mean action norm of the mean-parameter policy; index 0 is the
    /// untrained policy, then one entry per iteration.
    pub mean_action_norm: Vec<f64>,
    /// Saturation rate of the mean-parameter policy, aligned with
    /// `mean_action_norm`.
    pub saturation_rate: Vec<f64>,
    /// Plain episodic return (no cost) of the returned policy.
    pub final_return: f64,
    pub final_saturation_rate: f64,
    pub pd_return: f64,
    /// False if the budget ran out before the policy reached the PD target.
    pub target_reached: bool,
}

struct EpisodeStats {
    fitness: f64,
    ret: f64,
    mean_action_norm: f64,
    saturation_rate: f64,
}

/// Runs one episode from the origin start and accumulates reward, cost,
/// and saturation of the executed (clipped) actions.
fn evaluate_episode(
    cfg: &PointMassConfig,
    policy: &dyn Policy,
    cost: &ActionCostParams,
) -> Result<EpisodeStats> {
    let mut state = PointMassState::at_origin(cfg.goal);
    let mut ret = 0.0;
    let mut cost_total = 0.0;
    let mut norm_sum = 0.0;
    let mut saturated = 0u64;
    let sat_level = 0.99 * cfg.action_high.abs().max(cfg.action_low.abs());
    for _ in 0..cfg.episode_len {
        let a = clip_to_bounds(
            &policy.action(&state.observation())?,
            cfg.action_low,
            cfg.action_high,
        );
        if a.iter().any(|&ai| ai.abs() >= sat_level) {
            saturated += 1;
        }
        norm_sum += a.iter().map(|&x| x * x).sum::<f64>().sqrt();
        cost_total += thresholded_action_cost(&a, cost);
        let r = pointmass_step(cfg, &state, &a)?;
        ret += r.reward;
        state = r.next_state;
    }
    let steps = cfg.episode_len as f64;
    Ok(EpisodeStats {
        fitness: ret - cost_total,
        ret,
        mean_action_norm: norm_sum / steps,
        saturation_rate: saturated as f64 / steps,
    })
}

const CEM_POPULATION: usize = 64;
const CEM_ELITES: usize = 8;
const CEM_INIT_STD: f64 = 0.5;
const CEM_STD_FLOOR: f64 = 0.01;

fn policy_spec() -> NetworkSpec {
    NetworkSpec::new(
        vec![POINT_MASS_OBS_DIM, 8, POINT_MASS_ACTION_DIM],
        Activation::Tanh,
        OutputActivation::Identity,
    )
    .expect("static spec")
}

/// Cross-entropy-method search over policy-network parameters, maximizing
/// episodic return minus the thresholded action cost. Deterministic for a
/// fixed seed. Returns the best policy found; `target_reached` in the report
/// is false if it never matched 90% of the PD controller's return.
pub fn pretrain_policy(
    cfg: &PointMassConfig,
    cost: &ActionCostParams,
    budget_episodes: usize,
    seed: u64,
) -> Result<(LearnedPolicy, PretrainReport)> {
    cfg.validate()?;
    cost.validate()?;
    if budget_episodes < CEM_POPULATION {
        return Err(Error::InvalidConfig(format!(
            "budget must cover at least one population of {CEM_POPULATION}"
        )));
    }
    let spec = policy_spec();
    let dim = spec.parameter_count();
    let template = Network::init(spec.clone(), seed)?;
    let make_policy = |params: Vec<f64>| -> Result<LearnedPolicy> {
        LearnedPolicy::new(
            template.with_params(params)?,
            cfg.action_low,
            cfg.action_high,
        )
    };

    let pd = PdPolicy::new(PdGains::default(), cfg.action_low, cfg.action_high)?;
    let pd_return = evaluate_episode(cfg, &pd, cost)?.ret;
    // Negative episodic returns: "90% of PD" means at most 10% more negative.
    let target = pd_return * if pd_return < 0.0 { 1.0 / 0.9 } else { 0.9 };

    let mut rng = rng_for(seed, "cem");
    let mut mu = template.params().to_vec();
    let mut sigma = vec![CEM_INIT_STD; dim];
    let iterations = budget_episodes / CEM_POPULATION;

    let mut best_params = mu.clone();
    let mut best_fitness = f64::NEG_INFINITY;
    let mut report = PretrainReport {
        iterations,
        episodes_used: iterations * CEM_POPULATION,
        best_fitness: Vec::with_capacity(iterations),
        mean_action_norm: Vec::with_capacity(iterations + 1),
        saturation_rate: Vec::with_capacity(iterations + 1),
        final_return: 0.0,
        final_saturation_rate: 0.0,
        pd_return,
        target_reached: false,
    };

    // index 0 of the per-iteration histories is the untrained mean policy
    let init_stats = evaluate_episode(cfg, &make_policy(mu.clone())?, cost)?;
    report.mean_action_norm.push(init_stats.mean_action_norm);
    report.saturation_rate.push(init_stats.saturation_rate);

    for _ in 0..iterations {
        let mut scored: Vec<(f64, Vec<f64>)> = Vec::with_capacity(CEM_POPULATION);
        for _ in 0..CEM_POPULATION {
            let params: Vec<f64> = mu
                .iter()
                .zip(&sigma)
                .map(|(&m, &s)| {
                    let n = Normal::new(m, s).expect("positive sigma");
                    n.sample(&mut rng)
                })
                .collect();
            let stats = evaluate_episode(cfg, &make_policy(params.clone())?, cost)?;
            scored.push((stats.fitness, params));
        }
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite fitness"));
        if scored[0].0 > best_fitness {
            best_fitness = scored[0].0;
            best_params = scored[0].1.clone();
        }

        let elites = &scored[..CEM_ELITES];
        for i in 0..dim {
            let mean = elites.iter().map(|(_, p)| p[i]).sum::<f64>() / CEM_ELITES as f64;
            let var = elites
                .iter()
                .map(|(_, p)| (p[i] - mean) * (p[i] - mean))
                .sum::<f64>()
                / CEM_ELITES as f64;
            mu[i] = mean;
            sigma[i] = (var.sqrt()).max(CEM_STD_FLOOR);
        }

        let stats = evaluate_episode(cfg, &make_policy(mu.clone())?, cost)?;
        report.best_fitness.push(scored[0].0);
        report.mean_action_norm.push(stats.mean_action_norm);
        report.saturation_rate.push(stats.saturation_rate);
    }

    let final_policy = make_policy(best_params)?;
    let final_stats = evaluate_episode(cfg, &final_policy, cost)?;
    report.final_return = final_stats.ret;
    report.final_saturation_rate = final_stats.saturation_rate;
    report.target_reached = final_stats.ret >= target;
    Ok((final_policy, report))
}
