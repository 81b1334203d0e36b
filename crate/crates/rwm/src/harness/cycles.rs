//! Per-cycle segment statistics and cycle-relative normalization.
//!
//! Raw metric scales drift across cycles (each cycle draws its own
//! perturbation magnitudes), so cycle-level aggregation rescales values by
//! the No-Adaptation agent's performance range within the same cycle and
//! seed: `v_norm = (v - m) / (M - m)` where `m`, `M` are the smaller and
//! larger of No-Adaptation's ON and OFF segment means for that metric.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::AdaptationMode;
use crate::harness::metrics::MetricsLog;
use crate::harness::stats::{bootstrap_median_ci, median, BOOTSTRAP_LEVEL, BOOTSTRAP_RESAMPLES};
use crate::perturb::{PerturbationSchedule, SegmentPhase};
use crate::rng::derive_seed;

/// Metrics that get per-cycle treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Reward,
    ControlError,
}

impl Metric {
    fn pick(&self, reward: f64, control_error: f64) -> f64 {
        match self {
            Metric::Reward => reward,
            Metric::ControlError => control_error,
        }
    }
}

/// Raw and normalized location statistics for one metric over one segment,
/// pooled across seeds. Intervals are 95% percentile bootstrap intervals for
/// the median; pools above `CI_POOL_CAP` values are stride-subsampled for
/// the resampling loop only.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricStat {
    pub mean: f64,
    pub median: f64,
    pub ci: (f64, f64),
    pub norm_mean: f64,
    pub norm_median: f64,
    pub norm_ci: (f64, f64),
}

/// One segment (ON or OFF) of one cycle for one mode.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SegmentStat {
    pub reward: MetricStat,
    pub control_error: MetricStat,
    /// Set when any contributing seed-cycle had a zero No-Adaptation range
    /// (M = m); normalized values for that seed-cycle are defined as 0.
    pub degenerate_normalization: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CycleRow {
    pub mode: AdaptationMode,
    pub cycle: u64,
    pub on: SegmentStat,
    pub off: SegmentStat,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CycleStats {
    pub cycles: Vec<CycleRow>,
}

impl CycleStats {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn row(&self, mode: AdaptationMode, cycle: u64) -> Option<&CycleRow> {
        self.cycles.iter().find(|r| r.mode == mode && r.cycle == cycle)
    }
}

const CI_POOL_CAP: usize = 2000;

fn ci_of(values: &[f64], seed: u64) -> Result<(f64, f64)> {
    if values.len() <= CI_POOL_CAP {
        return bootstrap_median_ci(values, BOOTSTRAP_RESAMPLES, BOOTSTRAP_LEVEL, seed);
    }
    let stride = values.len().div_ceil(CI_POOL_CAP);
    let sub: Vec<f64> = values.iter().step_by(stride).cloned().collect();
    bootstrap_median_ci(&sub, BOOTSTRAP_RESAMPLES, BOOTSTRAP_LEVEL, seed)
}

fn mean_of(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Pools one metric's raw step values over a segment of one cycle, across
/// all seeds of one mode. Ordered by (seed, t), so downstream statistics are
/// reproducible.
pub fn pooled_segment_values(
    log: &MetricsLog,
    sched: &PerturbationSchedule,
    mode: AdaptationMode,
    on: bool,
    metric: Metric,
) -> Vec<f64> {
    let mut keyed: Vec<(u64, u64, f64)> = log
        .by_mode(mode)
        .filter(|r| match sched.phase(r.t) {
            SegmentPhase::On { .. } => on,
            SegmentPhase::Off { .. } => !on,
            SegmentPhase::Unsegmented => false,
        })
        .map(|r| (r.seed, r.t, metric.pick(r.reward, r.control_error)))
        .collect();
    keyed.sort_by_key(|&(seed, t, _)| (seed, t));
    keyed.into_iter().map(|(_, _, v)| v).collect()
}

/// Per (seed, cycle, segment) raw step values for one mode.
type SegmentPools = BTreeMap<(u64, u64, bool), Vec<f64>>;

fn collect_pools(
    log: &MetricsLog,
    sched: &PerturbationSchedule,
    mode: AdaptationMode,
    metric: Metric,
) -> SegmentPools {
    let mut rows: Vec<_> = log.by_mode(mode).collect();
    rows.sort_by_key(|r| (r.seed, r.t));
    let mut pools = SegmentPools::new();
    for r in rows {
        let (cycle, on) = match sched.phase(r.t) {
            SegmentPhase::On { cycle } => (cycle, true),
            SegmentPhase::Off { cycle } => (cycle, false),
            SegmentPhase::Unsegmented => continue,
        };
        pools
            .entry((r.seed, cycle, on))
            .or_default()
            .push(metric.pick(r.reward, r.control_error));
    }
    pools
}

/// `(m, M)` per (seed, cycle): the min and max of No-Adaptation's ON/OFF
/// segment means. `None` for segments the log does not cover.
fn na_ranges(pools: &SegmentPools) -> BTreeMap<(u64, u64), (f64, f64)> {
    let mut means: BTreeMap<(u64, u64), Vec<f64>> = BTreeMap::new();
    for ((seed, cycle, _), values) in pools {
        means.entry((*seed, *cycle)).or_default().push(mean_of(values));
    }
    means
        .into_iter()
        .map(|(key, ms)| {
            let lo = ms.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (key, (lo, hi))
        })
        .collect()
}

struct MetricAccumulator {
    raw: Vec<f64>,
    norm: Vec<f64>,
    degenerate: bool,
}

/// Cycle statistics for every mode in the log, normalized against the
/// No-Adaptation rows of the same seed and cycle. Fails when the log lacks a
/// No-Adaptation condition, when modes disagree on seeds, or when per-seed
/// logs have different lengths (which means they ran different schedules).
pub fn normalize_cycles(log: &MetricsLog, sched: &PerturbationSchedule) -> Result<CycleStats> {
    let modes = log.modes();
    if !modes.contains(&AdaptationMode::NoAdaptation) {
        return Err(Error::InvalidSpec(
            "cycle normalization needs a no_adaptation log".into(),
        ));
    }
    let na_seeds = {
        let mut s: Vec<u64> = log
            .by_mode(AdaptationMode::NoAdaptation)
            .map(|r| r.seed)
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    for &mode in &modes {
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for r in log.by_mode(mode) {
            *counts.entry(r.seed).or_default() += 1;
        }
        let seeds: Vec<u64> = counts.keys().cloned().collect();
        if seeds != na_seeds {
            return Err(Error::InvalidSpec(format!(
                "mode {mode} covers seeds {seeds:?}, no_adaptation covers {na_seeds:?}"
            )));
        }
        let na_counts: BTreeMap<u64, usize> = {
            let mut c: BTreeMap<u64, usize> = BTreeMap::new();
            for r in log.by_mode(AdaptationMode::NoAdaptation) {
                *c.entry(r.seed).or_default() += 1;
            }
            c
        };
        if counts != na_counts {
            return Err(Error::InvalidSpec(format!(
                "mode {mode} logged a different step count than no_adaptation; \
                 runs must share one schedule"
            )));
        }
    }

    let mut cycles: Vec<CycleRow> = Vec::new();
    let metrics = [Metric::Reward, Metric::ControlError];
    // pools per metric: [mode][metric] -> (seed, cycle, on) -> values
    let mut per_mode: BTreeMap<AdaptationMode, [SegmentPools; 2]> = BTreeMap::new();
    for &mode in &modes {
        per_mode.insert(
            mode,
            [
                collect_pools(log, sched, mode, metrics[0]),
                collect_pools(log, sched, mode, metrics[1]),
            ],
        );
    }
    let ranges = [
        na_ranges(&per_mode[&AdaptationMode::NoAdaptation][0]),
        na_ranges(&per_mode[&AdaptationMode::NoAdaptation][1]),
    ];
    let cycle_ids: Vec<u64> = {
        let mut ids: Vec<u64> = per_mode[&AdaptationMode::NoAdaptation][0]
            .keys()
            .map(|(_, cycle, _)| *cycle)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };

    for &mode in &modes {
        for &cycle in &cycle_ids {
            let mut segs: [Option<SegmentStat>; 2] = [None, None];
            for (si, on) in [true, false].into_iter().enumerate() {
                let mut acc: Vec<MetricAccumulator> = Vec::new();
                for (mi, _) in metrics.iter().enumerate() {
                    let pools = &per_mode[&mode][mi];
                    let mut raw = Vec::new();
                    let mut norm = Vec::new();
                    let mut degenerate = false;
                    for &seed in &na_seeds {
                        let Some(values) = pools.get(&(seed, cycle, on)) else {
                            continue;
                        };
                        let (m, big_m) = ranges[mi][&(seed, cycle)];
                        let span = big_m - m;
                        for &v in values {
                            raw.push(v);
                            if span == 0.0 {
                                degenerate = true;
                                norm.push(0.0);
                            } else {
                                norm.push((v - m) / span);
                            }
                        }
                    }
                    acc.push(MetricAccumulator { raw, norm, degenerate });
                }
                if acc.iter().any(|a| a.raw.is_empty()) {
                    continue; // trailing partial cycle not covered by the run
                }
                let mut stats = Vec::with_capacity(2);
                for (mi, a) in acc.iter().enumerate() {
                    let tag = format!("cycles-{mode}-{cycle}-{on}-{mi}");
                    let seed = derive_seed(0, &tag);
                    stats.push(MetricStat {
                        mean: mean_of(&a.raw),
                        median: median(&a.raw)?,
                        ci: ci_of(&a.raw, seed)?,
                        norm_mean: mean_of(&a.norm),
                        norm_median: median(&a.norm)?,
                        norm_ci: ci_of(&a.norm, derive_seed(1, &tag))?,
                    });
                }
                let control_error = stats.pop().expect("two metrics");
                let reward = stats.pop().expect("two metrics");
                segs[si] = Some(SegmentStat {
                    reward,
                    control_error,
                    degenerate_normalization: acc.iter().any(|a| a.degenerate),
                });
            }
            if let [Some(on), Some(off)] = segs {
                cycles.push(CycleRow {
                    mode,
                    cycle,
                    on,
                    off,
                });
            }
        }
    }
    Ok(CycleStats { cycles })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::metrics::MetricsRow;
    use crate::perturb::{ScheduleSpec, StepCycleParams};

    /// 2 steps ON then 2 steps OFF per cycle.
    fn tiny_schedule() -> PerturbationSchedule {
        PerturbationSchedule::new(
            ScheduleSpec::StepCycle(StepCycleParams {
                magnitude_low: -0.5,
                magnitude_high: 0.5,
                on_steps: 2,
                off_steps: 2,
                resample_each_cycle: true,
            }),
            2,
            0,
        )
        .unwrap()
    }

    fn push_series(
        log: &mut MetricsLog,
        mode: AdaptationMode,
        seed: u64,
        rewards: &[f64],
        errors: &[f64],
    ) {
        for (t, (&reward, &control_error)) in rewards.iter().zip(errors).enumerate() {
            log.push(MetricsRow {
                t: t as u64,
                seed,
                mode,
                reward,
                control_error,
                a0_norm: 0.0,
                ac_norm: 0.0,
                p: vec![0.0, 0.0],
            })
            .unwrap();
        }
    }

    /// Two full cycles; No-Adaptation rewards chosen so cycle 0 has ON mean
    /// 2, OFF mean 6 and cycle 1 has ON mean 10, OFF mean 20.
    fn two_cycle_log() -> MetricsLog {
        let mut log = MetricsLog::new(2);
        let na_r = [1.0, 3.0, 5.0, 7.0, 8.0, 12.0, 18.0, 22.0];
        let na_e = [4.0, 4.0, 2.0, 2.0, 9.0, 9.0, 3.0, 3.0];
        let rwm_r = [2.0, 4.0, 5.0, 7.0, 15.0, 15.0, 18.0, 22.0];
        let rwm_e = [3.0, 3.0, 2.0, 2.0, 6.0, 6.0, 3.0, 3.0];
        push_series(&mut log, AdaptationMode::NoAdaptation, 0, &na_r, &na_e);
        push_series(&mut log, AdaptationMode::Rwm, 0, &rwm_r, &rwm_e);
        log
    }

    #[test]
    fn no_adaptation_normalizes_to_unit_range() {
        let stats = normalize_cycles(&two_cycle_log(), &tiny_schedule()).unwrap();
        for cycle in [0, 1] {
            let row = stats.row(AdaptationMode::NoAdaptation, cycle).unwrap();
            // reward: ON mean is the cycle minimum, OFF mean the maximum
            assert!((row.on.reward.norm_mean - 0.0).abs() < 1e-12);
            assert!((row.off.reward.norm_mean - 1.0).abs() < 1e-12);
            // control error: ON mean is the maximum, OFF the minimum
            assert!((row.on.control_error.norm_mean - 1.0).abs() < 1e-12);
            assert!((row.off.control_error.norm_mean - 0.0).abs() < 1e-12);
            assert!(!row.on.degenerate_normalization);
        }
    }

    #[test]
    fn hand_computed_normalized_values() {
        let stats = normalize_cycles(&two_cycle_log(), &tiny_schedule()).unwrap();
        let row = stats.row(AdaptationMode::Rwm, 0).unwrap();
        // cycle 0 reward range from No-Adaptation: m = 2, M = 6
        // rwm ON rewards {2, 4} -> normalized {0, 0.5}
        assert!((row.on.reward.mean - 3.0).abs() < 1e-12);
        assert!((row.on.reward.median - 3.0).abs() < 1e-12);
        assert!((row.on.reward.norm_mean - 0.25).abs() < 1e-12);
        assert!((row.on.reward.norm_median - 0.25).abs() < 1e-12);
        // cycle 0 control-error range: ON mean 4, OFF mean 2 -> m = 2, M = 4
        // rwm ON errors {3, 3} -> normalized {0.5, 0.5}
        assert!((row.on.control_error.norm_median - 0.5).abs() < 1e-12);
        let row1 = stats.row(AdaptationMode::Rwm, 1).unwrap();
        // cycle 1 reward range: m = 10, M = 20; rwm ON {15, 15} -> 0.5
        assert!((row1.on.reward.norm_mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identical_logs_give_identical_stats() {
        let mut log = MetricsLog::new(2);
        let r = [1.0, 3.0, 5.0, 7.0];
        let e = [4.0, 4.0, 2.0, 2.0];
        push_series(&mut log, AdaptationMode::NoAdaptation, 0, &r, &e);
        push_series(&mut log, AdaptationMode::Rwm, 0, &r, &e);
        let stats = normalize_cycles(&log, &tiny_schedule()).unwrap();
        let na = stats.row(AdaptationMode::NoAdaptation, 0).unwrap();
        let rwm = stats.row(AdaptationMode::Rwm, 0).unwrap();
        assert_eq!(na.on.reward.median, rwm.on.reward.median);
        assert_eq!(na.on.reward.norm_median, rwm.on.reward.norm_median);
        assert_eq!(na.off.control_error.norm_mean, rwm.off.control_error.norm_mean);
    }

    #[test]
    fn degenerate_range_flags_and_zeroes() {
        let mut log = MetricsLog::new(2);
        // constant No-Adaptation reward: ON mean = OFF mean -> M = m
        push_series(
            &mut log,
            AdaptationMode::NoAdaptation,
            0,
            &[5.0; 4],
            &[1.0, 1.0, 3.0, 3.0],
        );
        let stats = normalize_cycles(&log, &tiny_schedule()).unwrap();
        let row = stats.row(AdaptationMode::NoAdaptation, 0).unwrap();
        assert!(row.on.degenerate_normalization);
        assert_eq!(row.on.reward.norm_mean, 0.0);
        assert_eq!(row.on.reward.norm_median, 0.0);
        // the control-error range is fine, so its values normalize normally
        assert!((row.on.control_error.norm_mean - 0.0).abs() < 1e-12);
    }

    #[test]
    fn missing_no_adaptation_rejected() {
        let mut log = MetricsLog::new(2);
        push_series(&mut log, AdaptationMode::Rwm, 0, &[1.0; 4], &[1.0; 4]);
        assert!(normalize_cycles(&log, &tiny_schedule()).is_err());
    }

    #[test]
    fn mismatched_seeds_rejected() {
        let mut log = two_cycle_log();
        push_series(&mut log, AdaptationMode::Rwm, 9, &[1.0; 8], &[1.0; 8]);
        assert!(normalize_cycles(&log, &tiny_schedule()).is_err());
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut log = two_cycle_log();
        log.push(MetricsRow {
            t: 8,
            seed: 0,
            mode: AdaptationMode::Rwm,
            reward: 0.0,
            control_error: 0.0,
            a0_norm: 0.0,
            ac_norm: 0.0,
            p: vec![0.0, 0.0],
        })
        .unwrap();
        assert!(normalize_cycles(&log, &tiny_schedule()).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let stats = normalize_cycles(&two_cycle_log(), &tiny_schedule()).unwrap();
        let back = CycleStats::from_json(&stats.to_json().unwrap()).unwrap();
        assert_eq!(stats, back);
    }

    #[test]
    fn pooled_values_select_segment_and_mode() {
        let log = two_cycle_log();
        let sched = tiny_schedule();
        let on =
            pooled_segment_values(&log, &sched, AdaptationMode::Rwm, true, Metric::Reward);
        assert_eq!(on, vec![2.0, 4.0, 15.0, 15.0]);
        let off =
            pooled_segment_values(&log, &sched, AdaptationMode::Rwm, false, Metric::Reward);
        assert_eq!(off, vec![5.0, 7.0, 18.0, 22.0]);
    }
}
