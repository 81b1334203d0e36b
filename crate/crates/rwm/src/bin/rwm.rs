//! Command-line front end for adaptation experiments.
//!
//! All behavior is driven by a single TOML config; the only environment
//! variable honored is `RWM_OUTPUT_DIR`, which (like `--out`) overrides the
//! config's output directory. Precedence: `--out`, then `RWM_OUTPUT_DIR`,
//! then the config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rwm::error::Result;
use rwm::harness::aftereffect::aftereffect_experiment;
use rwm::harness::bounds::{bounds_for_artifacts, bounds_for_run};
use rwm::harness::config::{AdaptationMode, ExperimentConfig};
use rwm::harness::cycles::{normalize_cycles, CycleStats};
use rwm::harness::metrics::MetricsLog;
use rwm::harness::output::{
    emit_outputs, write_atomic, BOUNDS_FILE, CONFIG_FILE, CYCLES_FILE, CYCLES_PLOT, METRICS_FILE,
    TIMESERIES_PLOT,
};
use rwm::harness::plot::{cycles_svg, timeseries_svg};
use rwm::harness::runner::{run_modes, ExperimentArtifacts, STATE_STRIDE};
use rwm::theory::BoundsReport;

#[derive(Parser)]
#[command(
    name = "rwm",
    version,
    about = "Run and analyze online-adaptation experiments on a perturbed point mass"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the config's mode over all seeds and write the artifact set.
    Run {
        config: PathBuf,
        /// Output directory, overriding the config and RWM_OUTPUT_DIR.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several modes against one schedule for paired comparison.
    Compare {
        config: PathBuf,
        /// Comma-separated modes: no_adaptation, rwm, analytic_reflex.
        #[arg(long, value_delimiter = ',', required = true)]
        modes: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the bounds report from a finished run directory.
    Bounds { run_dir: PathBuf },
    /// Probe post-removal overshoot under an alternating schedule.
    Aftereffect {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate the SVG plots from a finished run directory.
    Plot { run_dir: PathBuf },
}

fn resolve_out(cli_out: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(dir) = cli_out {
        return dir;
    }
    if let Some(dir) = std::env::var_os("RWM_OUTPUT_DIR") {
        return PathBuf::from(dir);
    }
    cfg.run.output_dir.clone()
}

fn parse_modes(raw: &[String]) -> Result<Vec<AdaptationMode>> {
    let mut modes = Vec::new();
    for s in raw {
        let mode: AdaptationMode = s.trim().parse()?;
        if !modes.contains(&mode) {
            modes.push(mode);
        }
    }
    Ok(modes)
}

/// Cycle stats need the No-Adaptation runs as normalization baseline; the
/// bounds report is measured on the most adaptive mode present.
fn analyze(arts: &ExperimentArtifacts) -> Result<(Option<CycleStats>, BoundsReport)> {
    let modes = arts.log.modes();
    let stats = if modes.contains(&AdaptationMode::NoAdaptation) {
        let sched = arts.config.schedule_for(arts.config.run.seeds[0])?;
        Some(normalize_cycles(&arts.log, &sched)?)
    } else {
        None
    };
    let measured = [
        AdaptationMode::Rwm,
        AdaptationMode::AnalyticReflex,
        AdaptationMode::NoAdaptation,
    ]
    .into_iter()
    .find(|m| modes.contains(m))
    .expect("at least one mode ran");
    let bounds = bounds_for_artifacts(arts, measured)?;
    Ok((stats, bounds))
}

fn run_and_emit(config: &Path, out: Option<PathBuf>, modes: &[AdaptationMode]) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    let dir = resolve_out(out, &cfg);
    cfg.run.output_dir = dir.clone();
    let arts = run_modes(&cfg, modes, STATE_STRIDE)?;
    let (stats, bounds) = analyze(&arts)?;
    let written = emit_outputs(&dir, &arts, stats.as_ref(), Some(&bounds))?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn bounds_cmd(run_dir: &Path) -> Result<()> {
    let (mode, report) = bounds_for_run(run_dir)?;
    let json = report.to_json()?;
    write_atomic(&run_dir.join(BOUNDS_FILE), json.as_bytes())?;
    println!("bounds measured on mode {mode}");
    println!("{json}");
    Ok(())
}

fn aftereffect_cmd(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let dir = resolve_out(out, &cfg);
    let report = aftereffect_experiment(&cfg)?;
    std::fs::create_dir_all(&dir)?;
    write_atomic(
        &dir.join("aftereffect.json"),
        report.to_json()?.as_bytes(),
    )?;
    println!(
        "mode {}: {} transitions, fraction opposite {:.3}, mean off sign {:+.3}",
        report.mode,
        report.transitions.len(),
        report.fraction_opposite,
        report.mean_off_sign
    );
    println!("wrote {}", dir.join("aftereffect.json").display());
    Ok(())
}

fn plot_cmd(run_dir: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(&run_dir.join(CONFIG_FILE))?;
    let log = MetricsLog::from_csv(&std::fs::read_to_string(run_dir.join(METRICS_FILE))?)?;
    let sched = cfg.schedule_for(cfg.run.seeds[0])?;
    write_atomic(
        &run_dir.join(TIMESERIES_PLOT),
        timeseries_svg(&log, &sched)?.as_bytes(),
    )?;
    println!("wrote {}", run_dir.join(TIMESERIES_PLOT).display());
    let cycles_path = run_dir.join(CYCLES_FILE);
    if cycles_path.exists() {
        let stats = CycleStats::from_json(&std::fs::read_to_string(&cycles_path)?)?;
        write_atomic(&run_dir.join(CYCLES_PLOT), cycles_svg(&stats)?.as_bytes())?;
        println!("wrote {}", run_dir.join(CYCLES_PLOT).display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let mode = cfg.run.mode;
            run_and_emit(&config, out, &[mode])
        }
        Command::Compare { config, modes, out } => {
            let modes = parse_modes(&modes)?;
            run_and_emit(&config, out, &modes)
        }
        Command::Bounds { run_dir } => bounds_cmd(&run_dir),
        Command::Aftereffect { config, out } => aftereffect_cmd(&config, out),
        Command::Plot { run_dir } => plot_cmd(&run_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
