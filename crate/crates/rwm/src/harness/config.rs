//! Experiment configuration: one TOML document fully determines a run
//! together with the code version. Every table rejects unknown keys, so a
//! typo fails loudly instead of silently running defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envs::{PointMassConfig, POINT_MASS_ACTION_DIM};
use crate::error::{Error, Result};
use crate::perturb::{PerturbationSchedule, ScheduleSpec, StepCycleParams};
use crate::reflex::ReflexConfig;
use crate::worldmodel::ForwardModelConfig;

/// Which corrective pathway runs in phase 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationMode {
    /// Base policy only; the control condition.
    NoAdaptation,
    /// Parametric reflex controller adapted online through the model.
    Rwm,
    /// Closed-form corrective law, no learned parameters.
    AnalyticReflex,
}

impl AdaptationMode {
    pub const ALL: [AdaptationMode; 3] = [
        AdaptationMode::NoAdaptation,
        AdaptationMode::Rwm,
        AdaptationMode::AnalyticReflex,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AdaptationMode::NoAdaptation => "no_adaptation",
            AdaptationMode::Rwm => "rwm",
            AdaptationMode::AnalyticReflex => "analytic_reflex",
        }
    }
}

impl fmt::Display for AdaptationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdaptationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_adaptation" => Ok(AdaptationMode::NoAdaptation),
            "rwm" => Ok(AdaptationMode::Rwm),
            "analytic_reflex" => Ok(AdaptationMode::AnalyticReflex),
            other => Err(Error::Parse(format!("unknown adaptation mode: {other}"))),
        }
    }
}

/// PD base policy parameters. The hold term is the feedforward that cancels
/// the environment's bias force at the goal; a frozen pre-trained policy is
/// assumed competent under nominal dynamics, which includes known loads.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSpec {
    pub kp: f64,
    pub kd: f64,
    pub hold: [f64; 2],
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self {
            kp: 4.0,
            kd: 3.0,
            hold: [0.0, 0.0],
        }
    }
}

/// Phase-1 data gathering and forward-model training parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct WorldModelSpec {
    /// Episodes rolled with the base policy to fill the replay buffer.
    pub episodes: usize,
    /// Std of the Gaussian exploration noise added to base actions during
    /// gathering; zero makes the action's effect unidentifiable.
    pub exploration_std: f64,
    pub model: ForwardModelConfig,
}

impl Default for WorldModelSpec {
    fn default() -> Self {
        Self {
            episodes: 40,
            exploration_std: 0.3,
            model: ForwardModelConfig::default(),
        }
    }
}

/// Analytic-reflex step size, expressed relative to the estimated Lipschitz
/// bound: `eta = eta_scale / L_hat^2`. The delayed error feedback adds a
/// factor `(1 + P)` to the loop gain, so stability under perturbations up to
/// `P` needs `eta_scale < 1 / (1 + P)`; 0.5 leaves margin for P up to 0.5.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticSpec {
    pub eta_scale: f64,
    /// How many phase-1 transitions to sample when estimating `L_hat`.
    pub jacobian_samples: usize,
}

impl Default for AnalyticSpec {
    fn default() -> Self {
        Self {
            eta_scale: 0.5,
            jacobian_samples: 200,
        }
    }
}

/// Run shape: mode, length, seeds, destination.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub mode: AdaptationMode,
    pub total_steps: u64,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Gather phase-1 data with the perturbation schedule active, i.e. train
    /// the forward model on domain-randomized dynamics.
    pub pretrain_with_perturbations: bool,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            mode: AdaptationMode::Rwm,
            total_steps: 80_000,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("runs/out"),
            pretrain_with_perturbations: false,
        }
    }
}

/// The whole experiment document. Defaults give the desk-scale step-cycle
/// run: 20 cycles of 2,000 perturbed plus 2,000 nominal steps, five seeds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: PointMassConfig,
    pub baseline: BaselineSpec,
    pub world_model: WorldModelSpec,
    pub schedule: ScheduleSpec,
    pub run: RunSpec,
    pub reflex: ReflexConfig,
    pub analytic: AnalyticSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: PointMassConfig::default(),
            baseline: BaselineSpec::default(),
            world_model: WorldModelSpec::default(),
            schedule: ScheduleSpec::StepCycle(StepCycleParams::default()),
            run: RunSpec::default(),
            reflex: ReflexConfig::default(),
            analytic: AnalyticSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Parse(format!("config serialization: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if !(self.baseline.kp > 0.0 && self.baseline.kd > 0.0) {
            return Err(Error::InvalidConfig("PD gains must be positive".into()));
        }
        if self.baseline.hold.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidConfig("baseline hold must be finite".into()));
        }
        if self.world_model.episodes == 0 {
            return Err(Error::InvalidConfig("phase 1 needs at least one episode".into()));
        }
        if !(self.world_model.exploration_std >= 0.0 && self.world_model.exploration_std.is_finite())
        {
            return Err(Error::InvalidConfig("exploration_std must be >= 0".into()));
        }
        if self.run.total_steps == 0 {
            return Err(Error::InvalidConfig("total_steps must be >= 1".into()));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must be nonempty".into()));
        }
        let mut seen = self.run.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.run.seeds.len() {
            return Err(Error::InvalidConfig("seeds must be distinct".into()));
        }
        if !(self.analytic.eta_scale > 0.0 && self.analytic.eta_scale < 1.0) {
            return Err(Error::InvalidConfig("eta_scale must be in (0, 1)".into()));
        }
        if self.analytic.jacobian_samples == 0 {
            return Err(Error::InvalidConfig("jacobian_samples must be >= 1".into()));
        }
        // surfaces schedule-level problems (empty segments, inverted ranges)
        PerturbationSchedule::new(self.schedule.clone(), POINT_MASS_ACTION_DIM, 0)?;
        Ok(())
    }

    /// The phase-2 schedule for one seed. Distinct seeds draw distinct
    /// per-cycle magnitudes.
    pub fn schedule_for(&self, seed: u64) -> Result<PerturbationSchedule> {
        PerturbationSchedule::new(
            self.schedule.clone(),
            POINT_MASS_ACTION_DIM,
            crate::rng::derive_seed(seed, "phase2-schedule"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for text in [
            "nonsense = 1",
            "[env]\nnonsense = 1",
            "[run]\nnonsense = 1",
            "[schedule]\nkind = \"step_cycle\"\nnonsense = 1",
            "[world_model.model]\nnonsense = 1",
        ] {
            assert!(
                ExperimentConfig::from_toml(text).is_err(),
                "accepted: {text}"
            );
        }
    }

    #[test]
    fn partial_document_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "[run]\nmode = \"no_adaptation\"\ntotal_steps = 100\nseeds = [7]\n",
        )
        .unwrap();
        assert_eq!(cfg.run.mode, AdaptationMode::NoAdaptation);
        assert_eq!(cfg.run.total_steps, 100);
        assert_eq!(cfg.env, PointMassConfig::default());
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "[run]\ntotal_steps = 0",
            "[run]\nseeds = []",
            "[run]\nseeds = [1, 1]",
            "[baseline]\nkp = -1.0",
            "[analytic]\neta_scale = 1.5",
            "[env]\ndamping = 2.0",
        ] {
            assert!(ExperimentConfig::from_toml(text).is_err(), "accepted: {text}");
        }
    }

    #[test]
    fn mode_string_roundtrip() {
        for mode in AdaptationMode::ALL {
            assert_eq!(mode.as_str().parse::<AdaptationMode>().unwrap(), mode);
        }
        assert!("sorcery".parse::<AdaptationMode>().is_err());
    }

    #[test]
    fn schedule_variants_parse() {
        let drift = ExperimentConfig::from_toml(
            "[schedule]\nkind = \"drift\"\namplitude = 0.2\nperiod = 1000.0\n",
        )
        .unwrap();
        match drift.schedule {
            ScheduleSpec::Drift(p) => assert_eq!(p.amplitude, 0.2),
            other => panic!("wrong variant: {other:?}"),
        }
        let none = ExperimentConfig::from_toml("[schedule]\nkind = \"none\"\n").unwrap();
        assert_eq!(none.schedule, ScheduleSpec::None);
    }

    #[test]
    fn distinct_seeds_draw_distinct_schedules() {
        let cfg = ExperimentConfig::default();
        let a = cfg.schedule_for(0).unwrap();
        let b = cfg.schedule_for(1).unwrap();
        assert_ne!(a.at(0), b.at(0));
    }
}
