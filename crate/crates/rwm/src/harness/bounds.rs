//! Measured system constants and the bounds report for a finished run.
//!
//! The report pins down, from run artifacts alone, every quantity the error
//! and value ceilings depend on: Jacobian singular-value extremes over the
//! visited states, the one-step model error on nominal data, the
//! perturbation bound of the configured schedule, and the step size the
//! analytic update law would use on this model. Measured steady-state error
//! is taken over the tails of ON segments, where transients from both the
//! perturbation switch and episode resets have died out.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::harness::config::{AdaptationMode, ExperimentConfig};
use crate::harness::metrics::MetricsLog;
use crate::harness::output::{
    model_json_name, phase1_csv_name, states_csv_name, states_from_csv, CONFIG_FILE, METRICS_FILE,
};
use crate::harness::runner::ExperimentArtifacts;
use crate::perturb::{PerturbationSchedule, SegmentPhase};
use crate::theory::{
    contraction_factor, estimate_jacobian_bounds, estimate_model_error, samples_from_records,
    value_bound_check, BoundsReport, QuadraticValue, SystemConstants,
};
use crate::worldmodel::{ForwardModel, ReplayBuffer, TransitionRecord};

/// Weight on the goal slots of the observation. They are constants of each
/// episode and carry no control error, but the value Hessian must stay
/// positive definite, so they get a near-zero positive weight.
const GOAL_WEIGHT: f64 = 1e-6;
const POSITION_WEIGHT: f64 = 2.0;
const VELOCITY_WEIGHT: f64 = 0.5;

/// Quadratic value target for the point-mass observation layout
/// `[px, py, vx, vy, gx, gy]`: optimum at rest on the goal. The position
/// weight matches the reward's quadratic position penalty.
pub fn value_target(cfg: &ExperimentConfig) -> Result<QuadraticValue> {
    let [gx, gy] = cfg.env.goal;
    let h = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
        POSITION_WEIGHT,
        POSITION_WEIGHT,
        VELOCITY_WEIGHT,
        VELOCITY_WEIGHT,
        GOAL_WEIGHT,
        GOAL_WEIGHT,
    ]));
    QuadraticValue::new(h, vec![gx, gy, 0.0, 0.0, gx, gy], 0.0)
}

/// Half-open `[from, to)` ON spans of a segmented schedule over `0..total`.
fn on_spans(sched: &PerturbationSchedule, total: u64) -> Vec<(u64, u64)> {
    let mut spans: Vec<(u64, u64)> = Vec::new();
    for t in 0..total {
        if matches!(sched.phase(t), SegmentPhase::On { .. }) {
            match spans.last_mut() {
                Some((_, to)) if *to == t => *to = t + 1,
                _ => spans.push((t, t + 1)),
            }
        }
    }
    spans
}

/// Steps considered post-convergence: the second half of each ON segment,
/// or the second half of the whole run when the schedule has no segments.
fn tail_predicate(spans: &[(u64, u64)], total: u64) -> impl Fn(u64) -> bool + '_ {
    let whole_tail = total / 2;
    move |t| {
        if spans.is_empty() {
            t >= whole_tail
        } else {
            spans
                .iter()
                .any(|(from, to)| t >= from + (to - from) / 2 && t < *to)
        }
    }
}

/// Per-seed artifacts the constants are measured from.
pub struct BoundsInput<'a> {
    pub model: &'a ForwardModel,
    pub records: &'a [TransitionRecord],
    pub states: &'a [(u64, Vec<f64>)],
}

/// Conservative aggregation across seeds: largest `L` and `epsilon`,
/// smallest `alpha`, so the reported ceilings cover every seed's system.
pub fn compute_bounds(
    cfg: &ExperimentConfig,
    inputs: &[BoundsInput<'_>],
    log: &MetricsLog,
    mode: AdaptationMode,
) -> Result<BoundsReport> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput("bounds inputs"));
    }
    let cap = cfg.analytic.jacobian_samples.max(1);
    let mut l = 0.0_f64;
    let mut alpha = f64::INFINITY;
    let mut epsilon = 0.0_f64;
    for input in inputs {
        let all = samples_from_records(input.records);
        let stride = all.len().div_ceil(cap).max(1);
        let samples: Vec<_> = all.into_iter().step_by(stride).collect();
        let (l_hat, alpha_hat) = estimate_jacobian_bounds(input.model, &samples)?;
        l = l.max(l_hat);
        alpha = alpha.min(alpha_hat);
        epsilon = epsilon.max(estimate_model_error(input.model, input.records)?);
    }

    let sched = cfg.schedule_for(cfg.run.seeds[0])?;
    let p_bound = sched.bound_p();
    let eta = cfg.analytic.eta_scale / (l * l);
    let gamma = contraction_factor(eta, alpha, l);

    let total = log.rows.iter().map(|r| r.t).max().map_or(0, |t| t + 1);
    let spans = on_spans(&sched, total);
    let in_tail = tail_predicate(&spans, total);

    let tail_errors: Vec<f64> = log
        .by_mode(mode)
        .filter(|r| in_tail(r.t))
        .map(|r| r.control_error.sqrt())
        .collect();
    if tail_errors.is_empty() {
        return Err(Error::EmptyInput("post-convergence metric rows"));
    }
    let steady_state_error_measured = crate::harness::stats::median(&tail_errors)?;

    let value = value_target(cfg)?;
    let consts = SystemConstants {
        l,
        alpha,
        epsilon,
        p_bound,
        eta,
        gamma,
        h_m: value.h_max(),
    };
    consts.validate()?;

    let tail_states: Vec<Vec<f64>> = inputs
        .iter()
        .flat_map(|input| input.states.iter())
        .filter(|(t, _)| in_tail(*t))
        .map(|(_, z)| z.clone())
        .collect();
    if tail_states.is_empty() {
        return Err(Error::EmptyInput("post-convergence states"));
    }
    let value_report = value_bound_check(&value, &tail_states, &consts)?;

    Ok(BoundsReport {
        l,
        alpha,
        epsilon,
        p: p_bound,
        eta,
        gamma,
        steady_state_error_measured,
        steady_state_bound: consts.steady_state_bound()?,
        value_gap_measured: value_report.max_gap,
        value_bound: value_report.bound,
    })
}

/// Bounds for an in-memory experiment, measured on the given mode's runs.
pub fn bounds_for_artifacts(
    arts: &ExperimentArtifacts,
    mode: AdaptationMode,
) -> Result<BoundsReport> {
    let mut record_store: Vec<Vec<TransitionRecord>> = Vec::new();
    for seed_arts in &arts.seeds {
        record_store.push(seed_arts.phase1.buffer.iter().cloned().collect());
    }
    let mut inputs = Vec::new();
    for (seed_arts, records) in arts.seeds.iter().zip(&record_store) {
        let run = seed_arts.runs.get(&mode).ok_or_else(|| {
            Error::InvalidConfig(format!("no {mode} run for seed {}", seed_arts.seed))
        })?;
        inputs.push(BoundsInput {
            model: &seed_arts.phase1.model,
            records,
            states: &run.states,
        });
    }
    compute_bounds(&arts.config, &inputs, &arts.log, mode)
}

/// Adaptive mode to measure when several are present in one run directory.
fn preferred_mode(modes: &[AdaptationMode]) -> Result<AdaptationMode> {
    for want in [
        AdaptationMode::Rwm,
        AdaptationMode::AnalyticReflex,
        AdaptationMode::NoAdaptation,
    ] {
        if modes.contains(&want) {
            return Ok(want);
        }
    }
    Err(Error::EmptyInput("modes in metrics log"))
}

/// Recomputes the bounds report from a run directory on disk. Returns the
/// mode the measurements refer to alongside the report.
pub fn bounds_for_run(dir: &Path) -> Result<(AdaptationMode, BoundsReport)> {
    let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let log = MetricsLog::from_csv(&std::fs::read_to_string(dir.join(METRICS_FILE))?)?;
    let mode = preferred_mode(&log.modes())?;

    let mut models = Vec::new();
    let mut record_store = Vec::new();
    let mut state_store = Vec::new();
    for &seed in &cfg.run.seeds {
        let phase1_text = std::fs::read_to_string(dir.join(phase1_csv_name(seed)))?;
        let capacity = phase1_text.lines().count();
        let buffer = ReplayBuffer::from_csv(&phase1_text, capacity)?;
        record_store.push(buffer.iter().cloned().collect::<Vec<_>>());
        models.push(ForwardModel::from_json(&std::fs::read_to_string(
            dir.join(model_json_name(seed)),
        )?)?);
        state_store.push(states_from_csv(&std::fs::read_to_string(
            dir.join(states_csv_name(mode, seed)),
        )?)?);
    }
    let inputs: Vec<BoundsInput<'_>> = models
        .iter()
        .zip(&record_store)
        .zip(&state_store)
        .map(|((model, records), states)| BoundsInput {
            model,
            records,
            states,
        })
        .collect();
    let report = compute_bounds(&cfg, &inputs, &log, mode)?;
    Ok((mode, report))
}
