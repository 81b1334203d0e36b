//! The two-phase experiment protocol.
//!
//! Phase 1 rolls the frozen base policy under nominal dynamics and trains
//! the forward model on those trajectories. Phase 2 activates the
//! perturbation schedule together with the selected adaptation mode and
//! logs every step. Seeds run as independent jobs; within a seed, all modes
//! share the same phase-1 model, so mode comparisons are paired.

use std::collections::BTreeMap;
use std::thread;

use crate::baseline::{PdGains, PdPolicy, Policy};
use crate::envs::{
    apply_perturbation, clip_to_bounds, Environment, PointMassEnv,
    POINT_MASS_ACTION_DIM, POINT_MASS_OBS_DIM,
};
use crate::error::{Error, Result};
use crate::harness::config::{AdaptationMode, ExperimentConfig};
use crate::harness::metrics::{MetricsLog, MetricsRow};
use crate::perturb::{PerturbationSchedule, ScheduleSpec};
use crate::reflex::{clip_total, AnalyticReflex, ReflexController};
use crate::rng::{derive_seed, rng_for};
use crate::theory::{estimate_jacobian_bounds, samples_from_records};
use crate::worldmodel::{
    encode, gather_nominal, train_forward_model, ForwardModel, ReplayBuffer, TrainReport,
    TransitionRecord,
};

pub fn build_env(cfg: &ExperimentConfig) -> Result<PointMassEnv> {
    PointMassEnv::new(cfg.env.clone())
}

pub fn build_policy(cfg: &ExperimentConfig) -> Result<PdPolicy> {
    PdPolicy::with_hold(
        PdGains {
            kp: cfg.baseline.kp,
            kd: cfg.baseline.kd,
        },
        cfg.baseline.hold,
        cfg.env.action_low,
        cfg.env.action_high,
    )
}

/// Phase-1 gathering with the perturbation schedule active: the
/// domain-randomized variant. Records keep the executed (noisy) action as
/// the base action and the step's perturbation vector, so OFF-segment rows
/// still count as nominal.
pub fn gather_with_schedule(
    env: &mut dyn Environment,
    policy: &dyn Policy,
    episodes: usize,
    exploration_std: f64,
    seed: u64,
    spec: &ScheduleSpec,
) -> Result<ReplayBuffer> {
    let (lo, hi) = env.action_bounds();
    let sched = PerturbationSchedule::new(
        spec.clone(),
        env.action_dim(),
        derive_seed(seed, "phase1-schedule"),
    )?;
    let mut buf = ReplayBuffer::new(episodes * env.episode_len() as usize);
    let mut noise = rng_for(seed, "phase1-explore");
    let mut t_global: u64 = 0;
    for ep in 0..episodes {
        let mut obs = env.reset(derive_seed(seed, &format!("phase1-ep{ep}")));
        for t in 0..env.episode_len() {
            let mut a = policy.action(&obs)?;
            if exploration_std > 0.0 {
                for ai in &mut a {
                    *ai += exploration_std * standard_normal(&mut noise);
                }
            }
            let a = clip_to_bounds(&a, lo, hi);
            let p = sched.at(t_global);
            let a_eff = apply_perturbation(&a, &p, lo, hi);
            let (next_obs, reward) = env.step(&a_eff)?;
            buf.push(TransitionRecord {
                z: encode(&obs),
                a0: a.clone(),
                a_c: vec![0.0; a.len()],
                a_eff,
                z_next: encode(&next_obs),
                z_hat_next: None,
                reward,
                t,
                p,
            });
            obs = next_obs;
            t_global += 1;
        }
    }
    Ok(buf)
}

fn standard_normal(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Everything phase 1 produces for one seed.
#[derive(Debug, Clone)]
pub struct Phase1 {
    pub model: ForwardModel,
    pub buffer: ReplayBuffer,
    pub report: TrainReport,
}

/// Phase-1 gathering splits its episode budget: half run the environment
/// as configured, keeping the model sharp at the operating point, and half
/// randomize start and goal. The coverage half matters because the model's
/// action Jacobian is queried wherever the adapted system wanders,
/// including held positions away from the configured goal, and only
/// randomized resets put such states in the training set.
pub fn prepare_phase1(cfg: &ExperimentConfig, seed: u64) -> Result<Phase1> {
    let mut coverage_env_cfg = cfg.env.clone();
    coverage_env_cfg.randomize_start = true;
    coverage_env_cfg.randomize_goal = true;
    let mut configured_env = build_env(cfg)?;
    let mut coverage_env = PointMassEnv::new(coverage_env_cfg)?;
    let policy = build_policy(cfg)?;

    let coverage_episodes = cfg.world_model.episodes / 2;
    let configured_episodes = cfg.world_model.episodes - coverage_episodes;
    let coverage_seed = derive_seed(seed, "phase1-coverage");
    let parts: [(&mut PointMassEnv, usize, u64); 2] = [
        (&mut configured_env, configured_episodes, seed),
        (&mut coverage_env, coverage_episodes, coverage_seed),
    ];
    let mut buffer = ReplayBuffer::new(cfg.world_model.episodes * cfg.env.episode_len as usize);
    for (env, episodes, part_seed) in parts {
        if episodes == 0 {
            continue;
        }
        let part = if cfg.run.pretrain_with_perturbations {
            gather_with_schedule(
                env,
                &policy,
                episodes,
                cfg.world_model.exploration_std,
                part_seed,
                &cfg.schedule,
            )?
        } else {
            gather_nominal(
                env,
                &policy,
                episodes,
                cfg.world_model.exploration_std,
                part_seed,
            )?
        };
        for record in part.iter() {
            buffer.push(record.clone());
        }
    }
    let mut model_cfg = cfg.world_model.model.clone();
    model_cfg.allow_perturbed_data |= cfg.run.pretrain_with_perturbations;
    let (model, report) = train_forward_model(
        &buffer,
        POINT_MASS_OBS_DIM,
        POINT_MASS_ACTION_DIM,
        &model_cfg,
        seed,
    )?;
    Ok(Phase1 {
        model,
        buffer,
        report,
    })
}

/// Analytic-reflex step size from the configured scale and the Jacobian
/// bound estimated on phase-1 data.
pub fn analytic_reflex_for(cfg: &ExperimentConfig, phase1: &Phase1) -> Result<AnalyticReflex> {
    let records: Vec<TransitionRecord> = phase1.buffer.iter().cloned().collect();
    let stride = (records.len() / cfg.analytic.jacobian_samples).max(1);
    let sub: Vec<TransitionRecord> = records.into_iter().step_by(stride).collect();
    let samples = samples_from_records(&sub);
    let (l_hat, _) = estimate_jacobian_bounds(&phase1.model, &samples)?;
    AnalyticReflex::new(cfg.analytic.eta_scale / (l_hat * l_hat), l_hat)
}

/// One phase-2 rollout.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: MetricsLog,
    /// Latent states visited during the run, sampled every `state_stride`
    /// steps; input for post-hoc value-gap measurements.
    pub states: Vec<(u64, Vec<f64>)>,
    /// Reflex-controller constructions plus parameter updates. The control
    /// condition must never touch the controller, so this stays 0 outside
    /// rwm mode.
    pub reflex_activity: u64,
    /// Final parametric controller, serialized; rwm mode only.
    pub reflex_checkpoint: Option<String>,
}

pub fn run_phase2(
    cfg: &ExperimentConfig,
    seed: u64,
    mode: AdaptationMode,
    phase1: &Phase1,
    state_stride: u64,
) -> Result<RunOutput> {
    let mut env = build_env(cfg)?;
    let policy = build_policy(cfg)?;
    let sched = cfg.schedule_for(seed)?;
    let fm = &phase1.model;
    let (lo, hi) = env.action_bounds();
    let episode_len = env.episode_len();

    let mut reflex_activity: u64 = 0;
    let mut reflex = match mode {
        AdaptationMode::Rwm => {
            reflex_activity += 1;
            Some(ReflexController::new(
                POINT_MASS_OBS_DIM,
                POINT_MASS_ACTION_DIM,
                &cfg.reflex,
                derive_seed(seed, "reflex-init"),
            )?)
        }
        _ => None,
    };
    let mut analytic = match mode {
        AdaptationMode::AnalyticReflex => Some(analytic_reflex_for(cfg, phase1)?),
        _ => None,
    };

    let mut log = MetricsLog::new(POINT_MASS_ACTION_DIM);
    let mut states = Vec::new();
    let mut obs = env.reset(derive_seed(seed, "phase2-ep0"));
    for t in 0..cfg.run.total_steps {
        if t > 0 && t % episode_len == 0 {
            let ep = t / episode_len;
            obs = env.reset(derive_seed(seed, &format!("phase2-ep{ep}")));
            // transitions must not straddle a reset
            if let Some(c) = reflex.as_mut() {
                c.clear_window();
            }
            if let Some(a) = analytic.as_mut() {
                a.reset();
            }
        }
        if t % state_stride == 0 {
            states.push((t, obs.clone()));
        }
        let p = sched.at(t);
        let a0 = policy.action(&obs)?;
        let a_c = match (&reflex, &analytic) {
            (Some(c), _) => c.action(&obs)?,
            (_, Some(a)) => a.action(fm, &obs, &a0)?,
            _ => vec![0.0; a0.len()],
        };
        let total: Vec<f64> = a0.iter().zip(&a_c).map(|(x, y)| x + y).collect();
        let (total, saturated) = clip_total(&total, lo, hi);
        let a_eff = apply_perturbation(&total, &p, lo, hi);

        let z_hat = fm.predict(&obs, &a0)?;
        let (next_obs, reward) = env.step(&a_eff)?;
        let e: Vec<f64> = next_obs.iter().zip(&z_hat).map(|(a, b)| a - b).collect();
        let control_error: f64 = e.iter().map(|x| x * x).sum();

        let row = MetricsRow {
            t,
            seed,
            mode,
            reward,
            control_error,
            a0_norm: a0.iter().map(|x| x * x).sum::<f64>().sqrt(),
            ac_norm: a_c.iter().map(|x| x * x).sum::<f64>().sqrt(),
            p,
        };
        if !row.is_finite() {
            return Err(Error::RunAborted {
                step: t,
                reason: "non-finite logged quantity".into(),
            });
        }
        log.push(row)?;

        // saturated steps carry no usable gradient: the executed action no
        // longer varies with the command, and the training data has no
        // action variation at the rail either, so the model's action
        // Jacobian is unidentified there
        match (reflex.as_mut(), analytic.as_mut()) {
            (Some(c), _) if !saturated => {
                c.record_and_update(fm, &obs, &a0, &next_obs)?;
                reflex_activity += 1;
            }
            (_, Some(a)) if !saturated => a.observe(&e),
            _ => {}
        }
        obs = next_obs;
    }

    let reflex_checkpoint = match &reflex {
        Some(c) => Some(c.to_json()?),
        None => None,
    };
    Ok(RunOutput {
        log,
        states,
        reflex_activity,
        reflex_checkpoint,
    })
}

/// Phase-1 output plus every requested phase-2 mode for one seed.
#[derive(Debug)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub phase1: Phase1,
    pub runs: BTreeMap<AdaptationMode, RunOutput>,
}

/// A full experiment: per-seed artifacts and the merged step log.
#[derive(Debug)]
pub struct ExperimentArtifacts {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedArtifacts>,
    pub log: MetricsLog,
}

impl ExperimentArtifacts {
    pub fn reflex_activity(&self, mode: AdaptationMode) -> u64 {
        self.seeds
            .iter()
            .filter_map(|s| s.runs.get(&mode))
            .map(|r| r.reflex_activity)
            .sum()
    }
}

/// Default sampling stride for the visited-state log.
pub const STATE_STRIDE: u64 = 10;

/// Runs every seed as an independent job (thread-parallel) and, within each
/// seed, every requested mode against the shared phase-1 model. Output
/// ordering is by (mode, seed, t) regardless of scheduling.
pub fn run_modes(
    cfg: &ExperimentConfig,
    modes: &[AdaptationMode],
    state_stride: u64,
) -> Result<ExperimentArtifacts> {
    cfg.validate()?;
    if modes.is_empty() {
        return Err(Error::EmptyInput("modes"));
    }
    let mut unique = modes.to_vec();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() != modes.len() {
        return Err(Error::InvalidConfig("modes must be distinct".into()));
    }
    if state_stride == 0 {
        return Err(Error::InvalidConfig("state_stride must be >= 1".into()));
    }

    let seeds = thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .run
            .seeds
            .iter()
            .map(|&seed| {
                scope.spawn(move || -> Result<SeedArtifacts> {
                    let phase1 = prepare_phase1(cfg, seed)?;
                    let mut runs = BTreeMap::new();
                    for &mode in modes {
                        runs.insert(mode, run_phase2(cfg, seed, mode, &phase1, state_stride)?);
                    }
                    Ok(SeedArtifacts {
                        seed,
                        phase1,
                        runs,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("seed job panicked"))
            .collect::<Result<Vec<_>>>()
    })?;

    let logs: Vec<MetricsLog> = seeds
        .iter()
        .flat_map(|s| s.runs.values().map(|r| r.log.clone()))
        .collect();
    let log = MetricsLog::merged(logs)?;
    Ok(ExperimentArtifacts {
        config: cfg.clone(),
        seeds,
        log,
    })
}

/// The single-mode entry point: the configured adaptation mode only.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentArtifacts> {
    run_modes(cfg, &[cfg.run.mode], STATE_STRIDE)
}
