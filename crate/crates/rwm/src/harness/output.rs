//! Run-directory output: atomic file writes and the artifact set emitted
//! after an experiment.
//!
//! Every file is written to a `.tmp` sibling and renamed into place, so a
//! crash mid-write never leaves a truncated artifact under the final name.
//! All numeric serialization goes through shortest-roundtrip float
//! formatting, which makes re-running an identical config produce
//! byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::config::AdaptationMode;
use crate::harness::cycles::CycleStats;
use crate::harness::plot::{cycles_svg, timeseries_svg};
use crate::harness::runner::ExperimentArtifacts;
use crate::theory::BoundsReport;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CYCLES_FILE: &str = "cycles.json";
pub const BOUNDS_FILE: &str = "bounds.json";
pub const TIMESERIES_PLOT: &str = "timeseries.svg";
pub const CYCLES_PLOT: &str = "cycles.svg";

pub fn phase1_csv_name(seed: u64) -> String {
    format!("phase1_seed{seed}.csv")
}

pub fn model_json_name(seed: u64) -> String {
    format!("fm_seed{seed}.json")
}

pub fn states_csv_name(mode: AdaptationMode, seed: u64) -> String {
    format!("states_{mode}_seed{seed}.csv")
}

pub fn reflex_json_name(seed: u64) -> String {
    format!("reflex_seed{seed}.json")
}

/// Writes via a temporary sibling and rename; the destination either keeps
/// its old content or holds the complete new content, never a prefix.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidConfig(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Sampled observation rows, one per recorded step: `t,z0,...,z{n-1}`.
pub fn states_to_csv(states: &[(u64, Vec<f64>)]) -> Result<String> {
    let dim = states.first().map_or(0, |(_, z)| z.len());
    let mut out = String::from("t");
    for i in 0..dim {
        out.push_str(&format!(",z{i}"));
    }
    out.push('\n');
    for (t, z) in states {
        if z.len() != dim {
            return Err(Error::DimMismatch {
                context: "state row",
                expected: dim,
                got: z.len(),
            });
        }
        out.push_str(&format!("{t}"));
        for v in z {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn states_from_csv(text: &str) -> Result<Vec<(u64, Vec<f64>)>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::EmptyInput("states csv"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"t") || cols.iter().skip(1).enumerate().any(|(i, c)| *c != format!("z{i}")) {
        return Err(Error::Parse(format!("unexpected states header: {header}")));
    }
    let dim = cols.len() - 1;
    let mut states = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::Parse(format!(
                "states row {}: expected {} fields, got {}",
                lineno + 2,
                dim + 1,
                fields.len()
            )));
        }
        let t = fields[0]
            .parse::<u64>()
            .map_err(|e| Error::Parse(format!("states row {}: {e}", lineno + 2)))?;
        let z = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("states row {}: {e}", lineno + 2)))
            })
            .collect::<Result<Vec<f64>>>()?;
        states.push((t, z));
    }
    Ok(states)
}

/// Writes the full artifact set for a finished experiment and returns the
/// paths written, in a fixed order. Cycle statistics and the bounds report
/// are optional because single-mode runs have no normalization baseline and
/// the bounds verb can be invoked separately.
pub fn emit_outputs(
    dir: &Path,
    arts: &ExperimentArtifacts,
    stats: Option<&CycleStats>,
    bounds: Option<&BoundsReport>,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut emit = |name: String, contents: &[u8]| -> Result<()> {
        let path = dir.join(name);
        write_atomic(&path, contents)?;
        written.push(path);
        Ok(())
    };

    emit(CONFIG_FILE.into(), arts.config.to_toml()?.as_bytes())?;
    emit(METRICS_FILE.into(), arts.log.to_csv().as_bytes())?;

    let sched = arts.config.schedule_for(arts.config.run.seeds[0])?;
    emit(
        TIMESERIES_PLOT.into(),
        timeseries_svg(&arts.log, &sched)?.as_bytes(),
    )?;
    if let Some(stats) = stats {
        emit(CYCLES_FILE.into(), stats.to_json()?.as_bytes())?;
        emit(CYCLES_PLOT.into(), cycles_svg(stats)?.as_bytes())?;
    }
    if let Some(bounds) = bounds {
        emit(BOUNDS_FILE.into(), bounds.to_json()?.as_bytes())?;
    }

    for seed_arts in &arts.seeds {
        let seed = seed_arts.seed;
        emit(phase1_csv_name(seed), seed_arts.phase1.buffer.to_csv().as_bytes())?;
        emit(model_json_name(seed), seed_arts.phase1.model.to_json()?.as_bytes())?;
        for (mode, run) in &seed_arts.runs {
            emit(states_csv_name(*mode, seed), states_to_csv(&run.states)?.as_bytes())?;
            if let Some(checkpoint) = &run.reflex_checkpoint {
                emit(reflex_json_name(seed), checkpoint.as_bytes())?;
            }
        }
    }
    Ok(written)
}
