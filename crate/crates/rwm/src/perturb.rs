//! Actuator-gain perturbation schedules.
//!
//! A schedule produces the multiplicative gain error `p(t)` applied to the
//! total action. Every kind is a pure function of (parameters, seed, step):
//! the same schedule queried at the same step always returns the same vector,
//! with no hidden state. [`SchedulePlayer`] walks a schedule sequentially in
//! O(1) per step and is guaranteed to agree with [`PerturbationSchedule::at`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct StepCycleParams {
    pub magnitude_low: f64,
    pub magnitude_high: f64,
    pub on_steps: u64,
    pub off_steps: u64,
    /// Redraw per-actuator magnitudes at each ON segment; otherwise every
    /// cycle repeats the first draw.
    pub resample_each_cycle: bool,
}

impl Default for StepCycleParams {
    fn default() -> Self {
        Self {
            magnitude_low: -0.5,
            magnitude_high: 0.5,
            on_steps: 2000,
            off_steps: 2000,
            resample_each_cycle: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AlternatingParams {
    pub magnitude: f64,
    pub on_steps: u64,
    pub off_steps: u64,
    /// Per-actuator sign pattern scaled by `magnitude`; empty means all +1.
    pub direction: Vec<f64>,
}

impl Default for AlternatingParams {
    fn default() -> Self {
        Self {
            magnitude: 0.35,
            on_steps: 1000,
            off_steps: 1000,
            direction: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DriftParams {
    pub amplitude: f64,
    pub period: f64,
    pub noise_std: f64,
    /// First-order low-pass coefficient: `x <- (1-beta) x + beta xi`.
    pub beta: f64,
}

impl Default for DriftParams {
    fn default() -> Self {
        Self {
            amplitude: 0.3,
            period: 4000.0,
            noise_std: 0.03,
            beta: 0.01,
        }
    }
}

impl DriftParams {
    /// Per-component bound on the filtered-noise contribution. Draws are
    /// clamped at three standard deviations, so the filter output can never
    /// leave this envelope.
    pub fn noise_envelope(&self) -> f64 {
        3.0 * self.noise_std
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    None,
    StepCycle(StepCycleParams),
    Alternating(AlternatingParams),
    Drift(DriftParams),
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::None
    }
}

/// Where a step falls within the ON/OFF structure of a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentPhase {
    On { cycle: u64 },
    Off { cycle: u64 },
    /// Drift and the null schedule have no segment structure.
    Unsegmented,
}

#[derive(Debug, Clone)]
pub struct PerturbationSchedule {
    pub spec: ScheduleSpec,
    pub action_dim: usize,
    pub seed: u64,
}

impl PerturbationSchedule {
    pub fn new(spec: ScheduleSpec, action_dim: usize, seed: u64) -> Result<Self> {
        if action_dim == 0 {
            return Err(Error::InvalidConfig("action_dim must be >= 1".into()));
        }
        match &spec {
            ScheduleSpec::None => {}
            ScheduleSpec::StepCycle(p) => {
                if p.on_steps == 0 || p.off_steps == 0 {
                    return Err(Error::InvalidConfig(
                        "step-cycle segments must be nonempty".into(),
                    ));
                }
                if p.magnitude_low > p.magnitude_high {
                    return Err(Error::InvalidConfig("magnitude range inverted".into()));
                }
            }
            ScheduleSpec::Alternating(p) => {
                if p.on_steps == 0 {
                    return Err(Error::InvalidConfig(
                        "alternating ON segment must be nonempty".into(),
                    ));
                }
                if !p.direction.is_empty() && p.direction.len() != action_dim {
                    return Err(Error::DimMismatch {
                        context: "alternating direction",
                        expected: action_dim,
                        got: p.direction.len(),
                    });
                }
                if !(p.magnitude.is_finite() && p.magnitude >= 0.0) {
                    return Err(Error::InvalidConfig("magnitude must be >= 0".into()));
                }
            }
            ScheduleSpec::Drift(p) => {
                if !(p.period > 0.0) {
                    return Err(Error::InvalidConfig("drift period must be > 0".into()));
                }
                if !(p.amplitude >= 0.0 && p.noise_std >= 0.0) {
                    return Err(Error::InvalidConfig(
                        "drift amplitude and noise must be >= 0".into(),
                    ));
                }
                if !(p.beta > 0.0 && p.beta <= 1.0) {
                    return Err(Error::InvalidConfig("filter beta must be in (0, 1]".into()));
                }
            }
        }
        Ok(Self {
            spec,
            action_dim,
            seed,
        })
    }

    /// The perturbation vector at step `t`. Pure: no call order dependence.
    pub fn at(&self, t: u64) -> Vec<f64> {
        match &self.spec {
            ScheduleSpec::None => vec![0.0; self.action_dim],
            ScheduleSpec::StepCycle(p) => match self.phase(t) {
                SegmentPhase::On { cycle } => self.step_cycle_values(p, cycle),
                _ => vec![0.0; self.action_dim],
            },
            ScheduleSpec::Alternating(p) => match self.phase(t) {
                SegmentPhase::On { cycle } => {
                    let sign = if cycle % 2 == 0 { 1.0 } else { -1.0 };
                    (0..self.action_dim)
                        .map(|j| {
                            let dir = p.direction.get(j).copied().unwrap_or(1.0);
                            sign * p.magnitude * dir
                        })
                        .collect()
                }
                _ => vec![0.0; self.action_dim],
            },
            ScheduleSpec::Drift(p) => {
                let mut state = vec![0.0; self.action_dim];
                for i in 0..=t {
                    drift_filter_step(p, self.seed, i, &mut state);
                }
                let s = p.amplitude * (2.0 * std::f64::consts::PI * t as f64 / p.period).sin();
                state.iter().map(|x| s + x).collect()
            }
        }
    }

    /// ON/OFF position of step `t` for segmented kinds.
    pub fn phase(&self, t: u64) -> SegmentPhase {
        let (on, off) = match &self.spec {
            ScheduleSpec::StepCycle(p) => (p.on_steps, p.off_steps),
            ScheduleSpec::Alternating(p) => (p.on_steps, p.off_steps),
            _ => return SegmentPhase::Unsegmented,
        };
        let period = on + off;
        let cycle = t / period;
        if t % period < on {
            SegmentPhase::On { cycle }
        } else {
            SegmentPhase::Off { cycle }
        }
    }

    fn step_cycle_values(&self, p: &StepCycleParams, cycle: u64) -> Vec<f64> {
        let draw_cycle = if p.resample_each_cycle { cycle } else { 0 };
        let mut rng = rng_for(self.seed, &format!("step-cycle-{draw_cycle}"));
        (0..self.action_dim)
            .map(|_| {
                if p.magnitude_low == p.magnitude_high {
                    p.magnitude_low
                } else {
                    rng.gen_range(p.magnitude_low..p.magnitude_high)
                }
            })
            .collect()
    }

    /// Analytic bound on `||p(t)||` over all steps.
    pub fn bound_p(&self) -> f64 {
        let dim = self.action_dim as f64;
        match &self.spec {
            ScheduleSpec::None => 0.0,
            ScheduleSpec::StepCycle(p) => {
                dim.sqrt() * p.magnitude_low.abs().max(p.magnitude_high.abs())
            }
            ScheduleSpec::Alternating(p) => {
                let dir_max = if p.direction.is_empty() {
                    1.0
                } else {
                    p.direction.iter().fold(0.0f64, |m, d| m.max(d.abs()))
                };
                dim.sqrt() * p.magnitude * dir_max
            }
            ScheduleSpec::Drift(p) => dim.sqrt() * (p.amplitude + p.noise_envelope()),
        }
    }

    /// Per-component bound on `|p(t+1) - p(t)|` for the drift kind: the
    /// sinusoid moves at most `A 2 pi / T` and the filter at most
    /// `beta (|xi| + |x|) <= 6 beta sigma`.
    pub fn drift_smoothness_bound(&self) -> Option<f64> {
        match &self.spec {
            ScheduleSpec::Drift(p) => Some(
                p.amplitude * 2.0 * std::f64::consts::PI / p.period + 2.0 * p.beta * p.noise_envelope(),
            ),
            _ => None,
        }
    }
}

/// One low-pass update shared by the pure replay and the player. Draws are
/// clamped to three standard deviations so the envelope bound is strict.
fn drift_filter_step(p: &DriftParams, seed: u64, t: u64, state: &mut [f64]) {
    if p.noise_std == 0.0 {
        for x in state.iter_mut() {
            *x *= 1.0 - p.beta;
        }
        return;
    }
    let mut rng = rng_for(seed, &format!("drift-{t}"));
    let cap = 3.0 * p.noise_std;
    for x in state.iter_mut() {
        let xi: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            * p.noise_std;
        *x = (1.0 - p.beta) * *x + p.beta * xi.clamp(-cap, cap);
    }
}

/// Sequential walker over a schedule. Output at each step equals
/// `schedule.at(t)`; only the drift kind carries filter state.
#[derive(Debug, Clone)]
pub struct SchedulePlayer {
    sched: PerturbationSchedule,
    t: u64,
    drift_state: Vec<f64>,
}

impl SchedulePlayer {
    pub fn new(sched: PerturbationSchedule) -> Self {
        let dim = sched.action_dim;
        Self {
            sched,
            t: 0,
            drift_state: vec![0.0; dim],
        }
    }

    pub fn schedule(&self) -> &PerturbationSchedule {
        &self.sched
    }

    /// Returns p(t) for the current step and advances.
    pub fn next_p(&mut self) -> Vec<f64> {
        let t = self.t;
        self.t += 1;
        match &self.sched.spec {
            ScheduleSpec::Drift(p) => {
                drift_filter_step(p, self.sched.seed, t, &mut self.drift_state);
                let s = p.amplitude * (2.0 * std::f64::consts::PI * t as f64 / p.period).sin();
                self.drift_state.iter().map(|x| s + x).collect()
            }
            _ => self.sched.at(t),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn null_schedule_is_zero() {
        let s = PerturbationSchedule::new(ScheduleSpec::None, 3, 0).unwrap();
        for t in [0u64, 1, 5000, 1 << 40] {
            assert_eq!(s.at(t), vec![0.0; 3]);
        }
        assert_eq!(s.bound_p(), 0.0);
        assert_eq!(s.phase(7), SegmentPhase::Unsegmented);
    }

    fn short_cycle() -> PerturbationSchedule {
        PerturbationSchedule::new(
            ScheduleSpec::StepCycle(StepCycleParams {
                on_steps: 100,
                off_steps: 100,
                ..StepCycleParams::default()
            }),
            2,
            42,
        )
        .unwrap()
    }

    #[test]
    fn step_cycle_structure() {
        let s = short_cycle();
        let p50 = s.at(50);
        assert_eq!(p50, s.at(0), "constant within the ON segment");
        assert_eq!(p50, s.at(99));
        for v in &p50 {
            assert!((-0.5..=0.5).contains(v), "magnitude {v} outside range");
        }
        assert_eq!(s.at(150), vec![0.0, 0.0], "OFF segment is zero");
        assert_eq!(s.phase(50), SegmentPhase::On { cycle: 0 });
        assert_eq!(s.phase(150), SegmentPhase::Off { cycle: 0 });
        assert_eq!(s.phase(250), SegmentPhase::On { cycle: 1 });
    }

    #[test]
    fn step_cycle_determinism_and_resampling() {
        let a = short_cycle();
        let b = short_cycle();
        for t in 0..600 {
            assert_eq!(a.at(t), b.at(t));
        }
        let other_seed = PerturbationSchedule::new(
            ScheduleSpec::StepCycle(StepCycleParams {
                on_steps: 100,
                off_steps: 100,
                ..StepCycleParams::default()
            }),
            2,
            43,
        )
        .unwrap();
        assert_ne!(a.at(0), other_seed.at(0));

        assert_ne!(a.at(0), a.at(200), "resampled cycles draw fresh values");
        let frozen = PerturbationSchedule::new(
            ScheduleSpec::StepCycle(StepCycleParams {
                on_steps: 100,
                off_steps: 100,
                resample_each_cycle: false,
                ..StepCycleParams::default()
            }),
            2,
            42,
        )
        .unwrap();
        assert_eq!(frozen.at(0), frozen.at(200), "frozen cycles repeat");
    }

    #[test]
    fn alternating_flips_sign_each_segment() {
        let s = PerturbationSchedule::new(
            ScheduleSpec::Alternating(AlternatingParams {
                magnitude: 0.4,
                on_steps: 10,
                off_steps: 5,
                direction: vec![1.0, -1.0],
            }),
            2,
            0,
        )
        .unwrap();
        assert_eq!(s.at(0), vec![0.4, -0.4]);
        assert_eq!(s.at(9), vec![0.4, -0.4]);
        assert_eq!(s.at(12), vec![0.0, 0.0]);
        assert_eq!(s.at(15), vec![-0.4, 0.4], "second cycle flips");
        assert_eq!(s.at(30), vec![0.4, -0.4], "third cycle flips back");
    }

    #[test]
    fn bound_examples() {
        let step = short_cycle();
        assert!((step.bound_p() - 2.0f64.sqrt() * 0.5).abs() < 1e-12);

        let drift = PerturbationSchedule::new(
            ScheduleSpec::Drift(DriftParams {
                amplitude: 0.3,
                noise_std: 0.1 / 3.0,
                ..DriftParams::default()
            }),
            2,
            0,
        )
        .unwrap();
        assert!((drift.bound_p() - 2.0f64.sqrt() * 0.4).abs() < 1e-12);
    }

    #[test]
    fn norms_stay_under_bound_over_long_sweeps() {
        let schedules = vec![
            short_cycle(),
            PerturbationSchedule::new(
                ScheduleSpec::Alternating(AlternatingParams::default()),
                2,
                1,
            )
            .unwrap(),
            PerturbationSchedule::new(ScheduleSpec::Drift(DriftParams::default()), 2, 2).unwrap(),
        ];
        for s in schedules {
            let bound = s.bound_p();
            let mut player = SchedulePlayer::new(s.clone());
            for t in 0..1_000_000u64 {
                let p = player.next_p();
                let n = norm(&p);
                assert!(
                    n <= bound + 1e-12,
                    "step {t}: norm {n} exceeds bound {bound}"
                );
            }
        }
    }

    #[test]
    fn step_changes_only_at_segment_boundaries() {
        let s = short_cycle();
        let mut player = SchedulePlayer::new(s.clone());
        let mut prev = player.next_p();
        for t in 1..2000u64 {
            let cur = player.next_p();
            if cur != prev {
                assert!(
                    t % 100 == 0,
                    "value changed at step {t}, not a segment boundary"
                );
            }
            prev = cur;
        }
    }

    #[test]
    fn drift_is_smooth_and_bounded_componentwise() {
        let params = DriftParams::default();
        let s =
            PerturbationSchedule::new(ScheduleSpec::Drift(params.clone()), 2, 9).unwrap();
        let smooth = s.drift_smoothness_bound().unwrap();
        let per_component = params.amplitude + params.noise_envelope();
        let mut player = SchedulePlayer::new(s);
        let mut prev = player.next_p();
        for t in 1..200_000u64 {
            let cur = player.next_p();
            for j in 0..2 {
                assert!(
                    (cur[j] - prev[j]).abs() <= smooth + 1e-12,
                    "step {t} component {j}: jump {}",
                    (cur[j] - prev[j]).abs()
                );
                assert!(cur[j].abs() <= per_component + 1e-12);
            }
            prev = cur;
        }
    }

    #[test]
    fn player_agrees_with_pure_queries() {
        for spec in [
            ScheduleSpec::StepCycle(StepCycleParams {
                on_steps: 37,
                off_steps: 21,
                ..StepCycleParams::default()
            }),
            ScheduleSpec::Drift(DriftParams::default()),
            ScheduleSpec::Alternating(AlternatingParams::default()),
        ] {
            let s = PerturbationSchedule::new(spec, 2, 7).unwrap();
            let mut player = SchedulePlayer::new(s.clone());
            let walked: Vec<Vec<f64>> = (0..1500).map(|_| player.next_p()).collect();
            // spot-check the pure function against the walk, including
            // out-of-order access
            for &t in &[0u64, 1, 36, 37, 57, 58, 500, 1499, 700, 3] {
                assert_eq!(walked[t as usize], s.at(t), "mismatch at t={t}");
            }
        }
    }

    proptest! {
        #[test]
        fn all_kinds_respect_bound(
            seed in 0u64..1000,
            t in 0u64..5000,
            mag in 0.0f64..0.6,
            dim in 1usize..4,
        ) {
            let specs = vec![
                ScheduleSpec::StepCycle(StepCycleParams {
                    magnitude_low: -mag,
                    magnitude_high: mag.max(1e-9),
                    on_steps: 50,
                    off_steps: 30,
                    resample_each_cycle: true,
                }),
                ScheduleSpec::Alternating(AlternatingParams {
                    magnitude: mag,
                    on_steps: 40,
                    off_steps: 40,
                    direction: Vec::new(),
                }),
            ];
            for spec in specs {
                let s = PerturbationSchedule::new(spec, dim, seed).unwrap();
                prop_assert!(norm(&s.at(t)) <= s.bound_p() + 1e-12);
            }
        }
    }
}
