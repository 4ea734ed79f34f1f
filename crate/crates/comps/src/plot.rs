//! Line charts of per-task means with standard-error bands, as SVG.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use comps_core::driver::{metric_curve, CurvePoint, LearnerKind, Metric, RunRecord};

use crate::error::{Error, Result};

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 400.0;
pub const MARGIN_LEFT: f64 = 60.0;
pub const MARGIN_RIGHT: f64 = 20.0;
pub const MARGIN_TOP: f64 = 20.0;
pub const MARGIN_BOTTOM: f64 = 50.0;

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
const DASHES: [&str; 4] = ["none", "6 3", "2 2", "8 3 2 3"];

/// Data to pixel mapping of the plot area.
///
/// x is linear in task index: the smallest index sits on the left margin and
/// the largest on the right one (a single index is centered). y is linear
/// over `[lo, hi]`, the range of every `mean ± std_err` widened by 5% of its
/// span on each side (by 1 when the span is zero), with `hi` at the top
/// margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisMap {
    pub x_min: f64,
    pub x_max: f64,
    pub y_lo: f64,
    pub y_hi: f64,
}

impl AxisMap {
    pub fn fit<'a>(points: impl IntoIterator<Item = &'a CurvePoint>) -> Option<Self> {
        let mut x = (f64::INFINITY, f64::NEG_INFINITY);
        let mut y = (f64::INFINITY, f64::NEG_INFINITY);
        for p in points {
            let t = p.task_index as f64;
            x = (x.0.min(t), x.1.max(t));
            y = (y.0.min(p.mean - p.std_err), y.1.max(p.mean + p.std_err));
        }
        if !(x.0.is_finite() && y.0.is_finite() && y.1.is_finite()) {
            return None;
        }
        let span = y.1 - y.0;
        let pad = if span > 0.0 { 0.05 * span } else { 1.0 };
        Some(AxisMap {
            x_min: x.0,
            x_max: x.1,
            y_lo: y.0 - pad,
            y_hi: y.1 + pad,
        })
    }

    pub fn px(&self, task_index: f64) -> f64 {
        let w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        if self.x_max > self.x_min {
            MARGIN_LEFT + (task_index - self.x_min) / (self.x_max - self.x_min) * w
        } else {
            MARGIN_LEFT + w / 2.0
        }
    }

    pub fn py(&self, y: f64) -> f64 {
        let h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        MARGIN_TOP + (self.y_hi - y) / (self.y_hi - self.y_lo) * h
    }
}

/// Per-learner curves of `metric`, in learner order.
pub fn curves_by_learner(
    records: &[RunRecord],
    metric: Metric,
    episode_cap: usize,
) -> Vec<(LearnerKind, Vec<CurvePoint>)> {
    let mut grouped: BTreeMap<LearnerKind, Vec<RunRecord>> = BTreeMap::new();
    for r in records {
        grouped.entry(r.learner).or_default().push(r.clone());
    }
    grouped
        .into_iter()
        .map(|(learner, rows)| (learner, metric_curve(&rows, metric, episode_cap)))
        .collect()
}

pub fn svg(series: &[(LearnerKind, Vec<CurvePoint>)], y_label: &str) -> Result<String> {
    let axes = AxisMap::fit(series.iter().flat_map(|(_, pts)| pts))
        .ok_or_else(|| Error::Format("nothing to plot".into()))?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);

    let (left, right) = (MARGIN_LEFT, WIDTH - MARGIN_RIGHT);
    let (top, bottom) = (MARGIN_TOP, HEIGHT - MARGIN_BOTTOM);
    let _ = writeln!(
        s,
        r#"<path class="axes" d="M{left},{top} L{left},{bottom} L{right},{bottom}" fill="none" stroke="black"/>"#
    );
    let (lo, hi) = (axes.x_min as usize, axes.x_max as usize);
    for t in lo..=hi {
        let x = axes.px(t as f64);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{bottom}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            bottom + 4.0,
            bottom + 16.0,
            t + 1
        );
    }
    for i in 0..=4 {
        let v = axes.y_lo + (axes.y_hi - axes.y_lo) * i as f64 / 4.0;
        let y = axes.py(v);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            left - 4.0,
            left - 6.0,
            y + 4.0,
            tick_label(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">task</text>"#,
        (left + right) / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{0:.2}" text-anchor="middle" transform="rotate(-90 14 {0:.2})">{1}</text>"#,
        (top + bottom) / 2.0,
        escape(y_label)
    );

    for (i, (learner, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let dash = DASHES[i % DASHES.len()];
        let name = learner.name();
        let _ = writeln!(s, r#"<g class="series" data-learner="{name}">"#);
        let upper = points.iter().map(|p| (axes.px(p.task_index as f64), axes.py(p.mean + p.std_err)));
        let lower = points.iter().rev().map(|p| (axes.px(p.task_index as f64), axes.py(p.mean - p.std_err)));
        let _ = writeln!(
            s,
            r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
            coords(upper.chain(lower))
        );
        let line = points.iter().map(|p| (axes.px(p.task_index as f64), axes.py(p.mean)));
        let _ = writeln!(
            s,
            r#"<polyline class="line" points="{}" fill="none" stroke="{color}" stroke-width="2" stroke-dasharray="{dash}"/>"#,
            coords(line)
        );
        for p in points {
            let _ = writeln!(
                s,
                r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="3" fill="{color}" data-task="{}" data-mean="{}" data-se="{}"/>"#,
                axes.px(p.task_index as f64),
                axes.py(p.mean),
                p.task_index,
                p.mean,
                p.std_err
            );
        }
        let ly = top + 6.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2" stroke-dasharray="{dash}"/><text x="{:.2}" y="{:.2}">{name}</text>"#,
            right - 110.0,
            right - 85.0,
            right - 80.0,
            ly + 4.0
        );
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes the chart of `metric` for every learner in `records` to `path`.
pub fn render_curves(records: &[RunRecord], metric: Metric, episode_cap: usize, path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Format("no records to plot".into()));
    }
    let series = curves_by_learner(records, metric, episode_cap);
    let text = svg(&series, metric.name())?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn coords(points: impl Iterator<Item = (f64, f64)>) -> String {
    points
        .map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
