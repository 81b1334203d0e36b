//! Config-driven experiments: the two-phase runner, per-step metric logs,
//! cycle-normalized statistics, bootstrap intervals, aftereffect probes,
//! bounds reports, SVG plots, and atomic artifact emission. The `rwm`
//! binary is a thin CLI over this module.

pub mod aftereffect;
pub mod bounds;
pub mod config;
pub mod cycles;
pub mod metrics;
pub mod output;
pub mod plot;
pub mod runner;
pub mod stats;

pub use aftereffect::{aftereffect_experiment, AftereffectReport};
pub use bounds::bounds_for_run;
pub use config::{AdaptationMode, ExperimentConfig};
pub use cycles::{normalize_cycles, CycleStats, Metric};
pub use metrics::{MetricsLog, MetricsRow};
pub use output::{emit_outputs, write_atomic};
pub use runner::{run_experiment, run_modes, ExperimentArtifacts};
pub use stats::{bootstrap_median_ci, median, slope_trend};
