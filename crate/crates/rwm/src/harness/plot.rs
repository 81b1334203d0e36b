//! Static SVG plots, written directly with no display dependency.
//!
//! Two figures: per-step reward and control-error time series with shaded
//! ON segments, and per-cycle normalized medians with confidence bands.
//! Layout constants are fixed; the drawing is deterministic for a given
//! input, so plot files are reproducible byte-for-byte.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::harness::config::AdaptationMode;
use crate::harness::cycles::CycleStats;
use crate::harness::metrics::MetricsLog;
use crate::perturb::{PerturbationSchedule, SegmentPhase};

const WIDTH: f64 = 900.0;
const PANEL_HEIGHT: f64 = 240.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 34.0;
const MARGIN_BOTTOM: f64 = 42.0;
const ON_SHADE: &str = "#d9d9d9";
/// Cap on polyline vertices per series; longer series are stride-sampled.
const MAX_POINTS: usize = 2000;

pub fn mode_color(mode: AdaptationMode) -> &'static str {
    match mode {
        AdaptationMode::NoAdaptation => "#4878cf",
        AdaptationMode::Rwm => "#ee854a",
        AdaptationMode::AnalyticReflex => "#6acc65",
    }
}

fn fmt_num(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    let a = x.abs();
    if !(1e-3..1e4).contains(&a) {
        format!("{x:.2e}")
    } else {
        let s = format!("{x:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    }
}

struct Panel {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Panel {
    fn new(index: usize, x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        let pad = 0.05 * (y_max - y_min).max(1e-12);
        Self {
            x0: MARGIN_LEFT,
            y0: index as f64 * PANEL_HEIGHT + MARGIN_TOP,
            w: WIDTH - MARGIN_LEFT - MARGIN_RIGHT,
            h: PANEL_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM,
            x_min,
            x_max: x_max.max(x_min + 1e-12),
            y_min: y_min - pad,
            y_max: y_max + pad,
        }
    }

    fn x(&self, v: f64) -> f64 {
        self.x0 + (v - self.x_min) / (self.x_max - self.x_min) * self.w
    }

    fn y(&self, v: f64) -> f64 {
        self.y0 + self.h - (v - self.y_min) / (self.y_max - self.y_min) * self.h
    }

    fn frame(&self, out: &mut String, title: &str, x_label: &str) {
        let _ = write!(
            out,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" \
             fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"/>",
            self.x0, self.y0, self.w, self.h
        );
        let _ = write!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"14\" fill=\"#111111\">{}</text>",
            self.x0,
            self.y0 - 8.0,
            title
        );
        let _ = write!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"#111111\" \
             text-anchor=\"middle\">{}</text>",
            self.x0 + self.w / 2.0,
            self.y0 + self.h + 28.0,
            x_label
        );
        for (v, anchor_y) in [(self.y_min, self.y0 + self.h), (self.y_max, self.y0 + 10.0)] {
            let _ = write!(
                out,
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"#111111\" \
                 text-anchor=\"end\">{}</text>",
                self.x0 - 6.0,
                anchor_y,
                fmt_num(v)
            );
        }
        for (v, anchor, dx) in [
            (self.x_min, "start", 0.0),
            (self.x_max, "end", 0.0),
        ] {
            let _ = write!(
                out,
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"#111111\" \
                 text-anchor=\"{}\">{}</text>",
                self.x(v) + dx,
                self.y0 + self.h + 14.0,
                anchor,
                fmt_num(v)
            );
        }
    }

    fn shade(&self, out: &mut String, from: f64, to: f64) {
        let _ = write!(
            out,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" \
             fill=\"{ON_SHADE}\"/>",
            self.x(from),
            self.y0,
            self.x(to) - self.x(from),
            self.h
        );
    }

    fn polyline(&self, out: &mut String, points: &[(f64, f64)], color: &str) {
        if points.is_empty() {
            return;
        }
        let mut path = String::new();
        for (x, y) in points {
            let _ = write!(path, "{:.1},{:.1} ", self.x(*x), self.y(*y));
        }
        let _ = write!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            path.trim_end()
        );
    }

    fn band(&self, out: &mut String, upper: &[(f64, f64)], lower: &[(f64, f64)], color: &str) {
        if upper.is_empty() {
            return;
        }
        let mut path = String::new();
        for (x, y) in upper {
            let _ = write!(path, "{:.1},{:.1} ", self.x(*x), self.y(*y));
        }
        for (x, y) in lower.iter().rev() {
            let _ = write!(path, "{:.1},{:.1} ", self.x(*x), self.y(*y));
        }
        let _ = write!(
            out,
            "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.25\" stroke=\"none\"/>",
            path.trim_end()
        );
    }
}

fn svg_open(out: &mut String, height: f64) {
    let _ = write!(
        out,
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\
         <svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {WIDTH:.0} {height:.0}\">\
         <rect width=\"{WIDTH:.0}\" height=\"{height:.0}\" fill=\"#ffffff\"/>"
    );
}

fn legend(out: &mut String, modes: &[AdaptationMode]) {
    let mut x = MARGIN_LEFT;
    for &mode in modes {
        let _ = write!(
            out,
            "<rect x=\"{x:.1}\" y=\"4\" width=\"12\" height=\"12\" fill=\"{}\"/>\
             <text x=\"{:.1}\" y=\"14\" font-size=\"12\" fill=\"#111111\">{}</text>",
            mode_color(mode),
            x + 16.0,
            mode
        );
        x += 150.0;
    }
}

/// ON-segment spans `[from, to)` over the step range, merged across cycles.
fn on_spans(sched: &PerturbationSchedule, t_max: u64) -> Vec<(u64, u64)> {
    let mut spans = Vec::new();
    let mut open: Option<u64> = None;
    for t in 0..=t_max {
        let on = matches!(sched.phase(t), SegmentPhase::On { .. });
        match (on, open) {
            (true, None) => open = Some(t),
            (false, Some(start)) => {
                spans.push((start, t));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(start) = open {
        spans.push((start, t_max + 1));
    }
    spans
}

/// Mean across seeds at each step, per mode, stride-sampled to the point
/// budget. Returns (points, y_min, y_max) per metric.
fn series(
    log: &MetricsLog,
    mode: AdaptationMode,
    pick: impl Fn(&crate::harness::metrics::MetricsRow) -> f64,
) -> Vec<(f64, f64)> {
    use std::collections::BTreeMap;
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for r in log.by_mode(mode) {
        let e = acc.entry(r.t).or_insert((0.0, 0));
        e.0 += pick(r);
        e.1 += 1;
    }
    let pts: Vec<(f64, f64)> = acc
        .into_iter()
        .map(|(t, (sum, n))| (t as f64, sum / n as f64))
        .collect();
    let stride = pts.len().div_ceil(MAX_POINTS).max(1);
    pts.into_iter().step_by(stride).collect()
}

fn y_range(series: &[&[(f64, f64)]]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in series {
        for (_, y) in *s {
            lo = lo.min(*y);
            hi = hi.max(*y);
        }
    }
    if !lo.is_finite() {
        (0.0, 1.0)
    } else {
        (lo, hi)
    }
}

/// Reward and control error against steps, one line per mode averaged over
/// seeds, ON segments shaded.
pub fn timeseries_svg(log: &MetricsLog, sched: &PerturbationSchedule) -> Result<String> {
    if log.rows.is_empty() {
        return Err(Error::EmptyInput("metrics log"));
    }
    let modes = log.modes();
    let t_max = log.rows.iter().map(|r| r.t).max().unwrap_or(0);
    let mut out = String::new();
    svg_open(&mut out, 2.0 * PANEL_HEIGHT);
    legend(&mut out, &modes);

    let metrics: [(&str, Box<dyn Fn(&crate::harness::metrics::MetricsRow) -> f64>); 2] = [
        ("Reward", Box::new(|r| r.reward)),
        ("Control error", Box::new(|r| r.control_error)),
    ];
    for (i, (title, pick)) in metrics.iter().enumerate() {
        let per_mode: Vec<Vec<(f64, f64)>> =
            modes.iter().map(|&m| series(log, m, pick)).collect();
        let refs: Vec<&[(f64, f64)]> = per_mode.iter().map(|v| v.as_slice()).collect();
        let (lo, hi) = y_range(&refs);
        let panel = Panel::new(i, 0.0, t_max as f64, lo, hi);
        for (from, to) in on_spans(sched, t_max) {
            panel.shade(&mut out, from as f64, to as f64);
        }
        panel.frame(&mut out, title, "step");
        for (m, pts) in modes.iter().zip(&per_mode) {
            panel.polyline(&mut out, pts, mode_color(*m));
        }
    }
    out.push_str("</svg>");
    Ok(out)
}

/// Normalized per-cycle medians with bootstrap confidence bands.
pub fn cycles_svg(stats: &CycleStats) -> Result<String> {
    if stats.cycles.is_empty() {
        return Err(Error::EmptyInput("cycle stats"));
    }
    let mut modes: Vec<AdaptationMode> = stats.cycles.iter().map(|c| c.mode).collect();
    modes.sort_unstable();
    modes.dedup();
    let c_max = stats.cycles.iter().map(|c| c.cycle).max().unwrap_or(0);

    let mut out = String::new();
    svg_open(&mut out, 2.0 * PANEL_HEIGHT);
    legend(&mut out, &modes);

    for (i, metric_name) in ["Normalized median reward (ON)", "Normalized median control error (ON)"]
        .iter()
        .enumerate()
    {
        let mut all_points: Vec<Vec<(f64, f64)>> = Vec::new();
        let mut all_bands: Vec<(Vec<(f64, f64)>, Vec<(f64, f64)>)> = Vec::new();
        for &mode in &modes {
            let mut pts = Vec::new();
            let mut upper = Vec::new();
            let mut lower = Vec::new();
            for row in stats.cycles.iter().filter(|c| c.mode == mode) {
                let stat = if i == 0 {
                    &row.on.reward
                } else {
                    &row.on.control_error
                };
                pts.push((row.cycle as f64, stat.norm_median));
                lower.push((row.cycle as f64, stat.norm_ci.0));
                upper.push((row.cycle as f64, stat.norm_ci.1));
            }
            all_points.push(pts);
            all_bands.push((upper, lower));
        }
        let mut refs: Vec<&[(f64, f64)]> = all_points.iter().map(|v| v.as_slice()).collect();
        let band_refs: Vec<&[(f64, f64)]> = all_bands
            .iter()
            .flat_map(|(u, l)| [u.as_slice(), l.as_slice()])
            .collect();
        refs.extend(band_refs);
        let (lo, hi) = y_range(&refs);
        let panel = Panel::new(i, 0.0, c_max as f64, lo, hi);
        panel.frame(&mut out, metric_name, "cycle");
        for ((mode, pts), (upper, lower)) in modes.iter().zip(&all_points).zip(&all_bands) {
            panel.band(&mut out, upper, lower, mode_color(*mode));
            panel.polyline(&mut out, pts, mode_color(*mode));
        }
    }
    out.push_str("</svg>");
    Ok(out)
}
