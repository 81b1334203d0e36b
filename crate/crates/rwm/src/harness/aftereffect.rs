//! Aftereffect probe: the signature of internal-model adaptation.
//!
//! An agent that adapted to a sustained perturbation keeps compensating for
//! a short while after the perturbation disappears, overshooting opposite
//! to the deviation the perturbation used to cause. A purely reactive agent
//! shows no such bias. Deviations are measured against the nominal
//! trajectory: a No-Adaptation rollout of the same seed with the schedule
//! disabled, which in a deterministic environment is the exact counterfactual.

use serde::{Deserialize, Serialize};

use crate::envs::POINT_MASS_ACTION_DIM;
use crate::error::{Error, Result};
use crate::harness::config::{AdaptationMode, ExperimentConfig};
use crate::harness::runner::{prepare_phase1, run_phase2};
use crate::perturb::ScheduleSpec;

/// Steps of the OFF segment over which the post-removal deviation is
/// averaged.
pub const AFTEREFFECT_WINDOW: u64 = 50;

/// One ON-to-OFF transition of one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionEffect {
    pub seed: u64,
    pub cycle: u64,
    /// Unit vector along the cycle's perturbation (actuator space).
    pub direction: Vec<f64>,
    /// Mean projection of the perturbation-induced deviation onto
    /// `direction` during the ON segment, measured on the No-Adaptation run.
    pub on_deviation: f64,
    /// Mean projection of the probed mode's deviation during the first
    /// [`AFTEREFFECT_WINDOW`] OFF steps.
    pub off_deviation: f64,
    /// The two deviations have strictly opposite signs.
    pub opposite: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AftereffectReport {
    pub mode: AdaptationMode,
    pub transitions: Vec<TransitionEffect>,
    /// Fraction of transitions with an opposite-signed overshoot.
    pub fraction_opposite: f64,
    /// Mean of sign(off_deviation); near zero for unbiased agents.
    pub mean_off_sign: f64,
}

impl AftereffectReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Deviations below this magnitude count as zero-signed; keeps float dust
/// from registering as a bias.
const SIGN_FLOOR: f64 = 1e-9;

fn sign_of(x: f64) -> f64 {
    if x.abs() < SIGN_FLOOR {
        0.0
    } else {
        x.signum()
    }
}

fn positions(rows: &[(u64, Vec<f64>)]) -> Vec<[f64; 2]> {
    rows.iter().map(|(_, z)| [z[0], z[1]]).collect()
}

fn mean_projection(
    probe: &[[f64; 2]],
    nominal: &[[f64; 2]],
    range: std::ops::Range<usize>,
    dir: &[f64],
) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for t in range {
        if t >= probe.len() || t >= nominal.len() {
            break;
        }
        let dx = [
            probe[t][0] - nominal[t][0],
            probe[t][1] - nominal[t][1],
        ];
        total += dx[0] * dir[0] + dx[1] * dir[1];
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Runs the configured mode on the alternating schedule and reports, per
/// ON-to-OFF transition, the deviation from the nominal trajectory before
/// and after removal. Three rollouts per seed share one phase-1 model: the
/// probed mode and No-Adaptation under the schedule, plus No-Adaptation
/// with the schedule disabled as the nominal reference.
pub fn aftereffect_experiment(cfg: &ExperimentConfig) -> Result<AftereffectReport> {
    cfg.validate()?;
    let params = match &cfg.schedule {
        ScheduleSpec::Alternating(p) => p.clone(),
        other => {
            return Err(Error::InvalidConfig(format!(
                "aftereffect needs an alternating schedule, got {other:?}"
            )))
        }
    };
    let period = params.on_steps + params.off_steps;
    if cfg.run.total_steps < period {
        return Err(Error::InvalidConfig(
            "total_steps shorter than one perturbation cycle".into(),
        ));
    }

    let mut nominal_cfg = cfg.clone();
    nominal_cfg.schedule = ScheduleSpec::None;

    let configured_dir: Vec<f64> = {
        // the schedule treats an empty direction as all ones
        let raw = if params.direction.is_empty() {
            vec![1.0; POINT_MASS_ACTION_DIM]
        } else {
            params.direction.clone()
        };
        normalize(&raw)
    };

    let mut transitions = Vec::new();
    for &seed in &cfg.run.seeds {
        let phase1 = prepare_phase1(cfg, seed)?;
        // every trace logs each position: stride 1
        let probe = run_phase2(cfg, seed, cfg.run.mode, &phase1, 1)?;
        let na = run_phase2(cfg, seed, AdaptationMode::NoAdaptation, &phase1, 1)?;
        let nominal = run_phase2(&nominal_cfg, seed, AdaptationMode::NoAdaptation, &phase1, 1)?;
        let sched = cfg.schedule_for(seed)?;

        let probe_pos = positions(&probe.states);
        let na_pos = positions(&na.states);
        let nominal_pos = positions(&nominal.states);

        let cycles = cfg.run.total_steps / period;
        for cycle in 0..cycles {
            let on_start = (cycle * period) as usize;
            let off_start = on_start + params.on_steps as usize;
            let off_end = off_start + (AFTEREFFECT_WINDOW.min(params.off_steps)) as usize;
            if off_end > probe_pos.len() {
                break;
            }
            let p_on = sched.at(cycle * period);
            let magnitude: f64 = p_on.iter().map(|x| x * x).sum::<f64>().sqrt();
            let direction = if magnitude > 0.0 {
                normalize(&p_on)
            } else {
                configured_dir.clone()
            };
            let on_deviation =
                mean_projection(&na_pos, &nominal_pos, on_start..off_start, &direction);
            let off_deviation =
                mean_projection(&probe_pos, &nominal_pos, off_start..off_end, &direction);
            transitions.push(TransitionEffect {
                seed,
                cycle,
                direction,
                on_deviation,
                off_deviation,
                opposite: sign_of(on_deviation) * sign_of(off_deviation) < 0.0,
            });
        }
    }

    let n = transitions.len().max(1) as f64;
    let fraction_opposite = transitions.iter().filter(|t| t.opposite).count() as f64 / n;
    let mean_off_sign = transitions.iter().map(|t| sign_of(t.off_deviation)).sum::<f64>() / n;
    Ok(AftereffectReport {
        mode: cfg.run.mode,
        transitions,
        fraction_opposite,
        mean_off_sign,
    })
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / norm).collect()
}
