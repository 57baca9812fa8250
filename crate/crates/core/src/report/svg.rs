//! Deterministic SVG plots.
//!
//! Output depends only on the inputs: fixed fonts, fixed ids, numbers with
//! two decimals. MISSING samples leave gaps, UNDEFINED ones are hatched.

use std::fmt::Write;

use chrono::{Duration, TimeZone};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::BoolValue;
use crate::timeseries::{Quality, Series, SeriesKind, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    Line,
    Scatter,
    Carpet,
    Conformance,
}

#[derive(Debug, Error, PartialEq)]
pub enum PlotError {
    #[error("{kind:?} plot needs {expected} series, got {found}")]
    Arity {
        kind: PlotKind,
        expected: &'static str,
        found: usize,
    },
    #[error("series `{sensor}` is {found:?}, plot needs {expected:?}")]
    KindMismatch {
        sensor: String,
        expected: SeriesKind,
        found: SeriesKind,
    },
    #[error("series `{sensor}` is not on the grid of `{first}`")]
    GridMismatch { sensor: String, first: String },
    #[error("empty plot range")]
    EmptyRange,
}

#[derive(Debug, Clone)]
pub struct PlotOptions {
    pub width: u32,
    pub height: u32,
    pub tz: Tz,
    pub title: Option<String>,
    /// Carpet color scale bounds; defaults to the data min/max.
    pub color_min: Option<f64>,
    pub color_max: Option<f64>,
}

impl Default for PlotOptions {
    fn default() -> Self {
        PlotOptions {
            width: 800,
            height: 240,
            tz: chrono_tz::UTC,
            title: None,
            color_min: None,
            color_max: None,
        }
    }
}

const LEFT: f64 = 60.0;
const RIGHT: f64 = 10.0;
const TOP: f64 = 24.0;
const BOTTOM: f64 = 24.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
pub const GREEN: &str = "#2e7d32";
pub const RED: &str = "#c62828";
pub const GREY: &str = "#9e9e9e";
const STRIP: f64 = 20.0;

fn n(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" { "0.00".into() } else { s }
}

pub(crate) fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn header(w: f64, h: f64, opts: &PlotOptions) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\" font-family=\"monospace\" font-size=\"10\">\n",
        n(w),
        n(h),
        n(w),
        n(h)
    );
    s.push_str(
        "<defs><pattern id=\"hatch\" width=\"4\" height=\"4\" patternUnits=\"userSpaceOnUse\" patternTransform=\"rotate(45)\">\
<rect width=\"4\" height=\"4\" fill=\"#ffffff\"/><line x1=\"0\" y1=\"0\" x2=\"0\" y2=\"4\" stroke=\"#616161\" stroke-width=\"2\"/></pattern></defs>\n",
    );
    if let Some(t) = &opts.title {
        let _ = writeln!(s, "<text class=\"title\" x=\"{}\" y=\"14\">{}</text>", n(LEFT), escape(t));
    }
    s
}

fn local(t: Timestamp, tz: Tz) -> String {
    tz.timestamp_opt(t, 0).unwrap().format("%Y-%m-%d %H:%M").to_string()
}

fn check_grids(series: &[Series]) -> Result<(), PlotError> {
    let first = &series[0];
    for s in &series[1..] {
        if s.grid != first.grid {
            return Err(PlotError::GridMismatch {
                sensor: s.sensor_id.clone(),
                first: first.sensor_id.clone(),
            });
        }
    }
    Ok(())
}

fn need_kind(s: &Series, kind: SeriesKind) -> Result<(), PlotError> {
    if s.kind != kind {
        return Err(PlotError::KindMismatch {
            sensor: s.sensor_id.clone(),
            expected: kind,
            found: s.kind,
        });
    }
    Ok(())
}

fn value_range<'a>(vals: impl Iterator<Item = &'a Series>) -> Option<(f64, f64)> {
    let mut r: Option<(f64, f64)> = None;
    for s in vals {
        for v in s.samples.iter().filter_map(|x| x.get()) {
            r = Some(match r {
                None => (v, v),
                Some((lo, hi)) => (lo.min(v), hi.max(v)),
            });
        }
    }
    r
}

/// Pads a degenerate range so constant data sits mid-plot.
fn padded((lo, hi): (f64, f64)) -> (f64, f64) {
    if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) }
}

/// Renders `series` as an SVG document.
pub fn emit_plot(kind: PlotKind, series: &[Series], opts: &PlotOptions) -> Result<String, PlotError> {
    match kind {
        PlotKind::Scatter if series.len() != 2 => {
            return Err(PlotError::Arity {
                kind,
                expected: "exactly 2",
                found: series.len(),
            });
        }
        _ if series.is_empty() => {
            return Err(PlotError::Arity {
                kind,
                expected: "at least 1",
                found: 0,
            });
        }
        _ => {}
    }
    check_grids(series)?;
    if series[0].is_empty() {
        return Err(PlotError::EmptyRange);
    }
    match kind {
        PlotKind::Line => Ok(line(series, opts)),
        PlotKind::Scatter => {
            for s in series {
                need_kind(s, SeriesKind::Numeric)?;
            }
            Ok(scatter(&series[0], &series[1], opts))
        }
        PlotKind::Carpet => {
            for s in series {
                need_kind(s, SeriesKind::Numeric)?;
            }
            Ok(carpet(series, opts))
        }
        PlotKind::Conformance => {
            for s in series {
                need_kind(s, SeriesKind::Boolean)?;
            }
            Ok(conformance(series, opts))
        }
    }
}

struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
}

impl Frame {
    fn new(width: f64, height: f64) -> Self {
        Frame {
            x0: LEFT,
            y0: TOP,
            w: (width - LEFT - RIGHT).max(1.0),
            h: (height - TOP - BOTTOM).max(1.0),
        }
    }

    fn draw(&self, out: &mut String) {
        let _ = writeln!(
            out,
            "<rect class=\"frame\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#000000\"/>",
            n(self.x0),
            n(self.y0),
            n(self.w),
            n(self.h)
        );
    }

    fn y_labels(&self, out: &mut String, lo: f64, hi: f64) {
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            n(self.x0 - 4.0),
            n(self.y0 + 8.0),
            n(hi),
            n(self.x0 - 4.0),
            n(self.y0 + self.h),
            n(lo)
        );
    }

    fn x_labels(&self, out: &mut String, left: &str, right: &str) {
        let y = self.y0 + self.h + 14.0;
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\">{}</text>\n<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            n(self.x0),
            n(y),
            escape(left),
            n(self.x0 + self.w),
            n(y),
            escape(right)
        );
    }
}

fn line(series: &[Series], opts: &PlotOptions) -> String {
    let (w, h) = (f64::from(opts.width), f64::from(opts.height));
    let mut out = header(w, h, opts);
    let f = Frame::new(w, h);
    let g = series[0].grid;
    let span = (g.end() - g.start()) as f64;
    let x_at = |i: usize| f.x0 + f.w * (i as f64 * g.period() as f64) / span;
    let slot_w = f.w * g.period() as f64 / span;
    let (lo, hi) = padded(value_range(series.iter()).unwrap_or((0.0, 0.0)));
    let y_at = |v: f64| f.y0 + f.h * (1.0 - (v - lo) / (hi - lo));

    f.draw(&mut out);
    f.y_labels(&mut out, lo, hi);
    f.x_labels(&mut out, &local(g.start(), opts.tz), &local(g.end(), opts.tz));

    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            out,
            "<text class=\"legend\" x=\"{}\" y=\"14\" fill=\"{color}\" text-anchor=\"end\">{}</text>",
            n(f.x0 + f.w - 120.0 * k as f64),
            escape(&s.sensor_id)
        );
        let mut seg: Vec<(f64, f64)> = Vec::new();
        let flush = |seg: &mut Vec<(f64, f64)>, out: &mut String| {
            match seg.len() {
                0 => {}
                1 => {
                    let _ = writeln!(out, "<circle cx=\"{}\" cy=\"{}\" r=\"1.5\" fill=\"{color}\"/>", n(seg[0].0), n(seg[0].1));
                }
                _ => {
                    let pts: Vec<String> = seg.iter().map(|(x, y)| format!("{},{}", n(*x), n(*y))).collect();
                    let _ = writeln!(
                        out,
                        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                        pts.join(" ")
                    );
                }
            }
            seg.clear();
        };
        for (i, smp) in s.samples.iter().enumerate() {
            match smp.quality {
                Quality::Valid => seg.push((x_at(i), y_at(smp.value))),
                Quality::Missing => flush(&mut seg, &mut out),
                Quality::Undefined => {
                    flush(&mut seg, &mut out);
                    let _ = writeln!(
                        out,
                        "<rect class=\"undefined\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"url(#hatch)\"/>",
                        n(x_at(i)),
                        n(f.y0),
                        n(slot_w),
                        n(f.h)
                    );
                }
            }
        }
        flush(&mut seg, &mut out);
    }
    out.push_str("</svg>\n");
    out
}

fn scatter(xs: &Series, ys: &Series, opts: &PlotOptions) -> String {
    let (w, h) = (f64::from(opts.width), f64::from(opts.height));
    let mut out = header(w, h, opts);
    let f = Frame::new(w, h);
    let (xlo, xhi) = padded(value_range(std::iter::once(xs)).unwrap_or((0.0, 0.0)));
    let (ylo, yhi) = padded(value_range(std::iter::once(ys)).unwrap_or((0.0, 0.0)));
    f.draw(&mut out);
    f.y_labels(&mut out, ylo, yhi);
    f.x_labels(&mut out, &format!("{} {}", xs.sensor_id, n(xlo)), &n(xhi));
    let _ = writeln!(out, "<text class=\"legend\" x=\"{}\" y=\"14\" text-anchor=\"end\">{}</text>", n(f.x0 + f.w), escape(&ys.sensor_id));
    for (a, b) in xs.samples.iter().zip(&ys.samples) {
        if let (Some(x), Some(y)) = (a.get(), b.get()) {
            let _ = writeln!(
                out,
                "<circle cx=\"{}\" cy=\"{}\" r=\"2\" fill=\"{}\"/>",
                n(f.x0 + f.w * (x - xlo) / (xhi - xlo)),
                n(f.y0 + f.h * (1.0 - (y - ylo) / (yhi - ylo))),
                PALETTE[0]
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Three-stop diverging scale, blue → pale yellow → red.
pub fn carpet_color(t: f64) -> String {
    const STOPS: [(f64, f64, f64); 3] = [(49.0, 54.0, 149.0), (255.0, 255.0, 191.0), (165.0, 0.0, 38.0)];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.5 };
    let (a, b, u) = if t <= 0.5 { (STOPS[0], STOPS[1], t * 2.0) } else { (STOPS[1], STOPS[2], t * 2.0 - 1.0) };
    let mix = |p: f64, q: f64| (p + (q - p) * u).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// Carpet layout for one series: (local day index, row) per sample, plus
/// the number of days and rows.
pub fn carpet_cells(s: &Series, tz: Tz) -> (Vec<(usize, usize)>, usize, usize) {
    let p = s.grid.period();
    let rows = (86_400 + p - 1) / p;
    let first = tz.timestamp_opt(s.grid.start(), 0).unwrap().date_naive();
    let mut days = 0;
    let cells = s
        .grid
        .timestamps()
        .map(|t| {
            let dt = tz.timestamp_opt(t, 0).unwrap();
            let day = (dt.date_naive() - first).num_days() as usize;
            let secs = (dt.naive_local() - dt.date_naive().and_hms_opt(0, 0, 0).unwrap()).num_seconds();
            days = days.max(day + 1);
            (day, ((secs / p) as usize).min(rows as usize - 1))
        })
        .collect();
    (cells, days, rows as usize)
}

fn carpet(series: &[Series], opts: &PlotOptions) -> String {
    let (w, h) = (f64::from(opts.width), f64::from(opts.height));
    let mut out = header(w, h * series.len() as f64, opts);
    for (k, s) in series.iter().enumerate() {
        let mut f = Frame::new(w, h);
        f.y0 += h * k as f64;
        let (cells, days, rows) = carpet_cells(s, opts.tz);
        let data = value_range(std::iter::once(s)).unwrap_or((0.0, 0.0));
        let lo = opts.color_min.unwrap_or(data.0);
        let hi = opts.color_max.unwrap_or(data.1);
        let (cw, ch) = (f.w / days as f64, f.h / rows as f64);
        let _ = writeln!(
            out,
            "<text class=\"legend\" x=\"{}\" y=\"{}\" text-anchor=\"end\">{} [{} .. {}]</text>",
            n(f.x0 + f.w),
            n(f.y0 - 4.0),
            escape(&s.sensor_id),
            n(lo),
            n(hi)
        );
        for ((day, row), smp) in cells.iter().zip(&s.samples) {
            let fill = match smp.quality {
                Quality::Missing => continue,
                Quality::Undefined => "url(#hatch)".to_string(),
                Quality::Valid => carpet_color(if hi > lo { (smp.value - lo) / (hi - lo) } else { 0.5 }),
            };
            let _ = writeln!(
                out,
                "<rect class=\"cell\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{fill}\"/>",
                n(f.x0 + cw * *day as f64),
                n(f.y0 + ch * *row as f64),
                n(cw),
                n(ch)
            );
        }
        f.draw(&mut out);
        let first = s.grid.start();
        let last_day = tz_day(first, opts.tz) + Duration::days(days as i64 - 1);
        f.x_labels(&mut out, &tz_day(first, opts.tz).to_string(), &last_day.to_string());
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">00:00</text>\n<text x=\"{}\" y=\"{}\" text-anchor=\"end\">24:00</text>",
            n(f.x0 - 4.0),
            n(f.y0 + 8.0),
            n(f.x0 - 4.0),
            n(f.y0 + f.h)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn tz_day(t: Timestamp, tz: Tz) -> chrono::NaiveDate {
    tz.timestamp_opt(t, 0).unwrap().date_naive()
}

pub fn conformance_fill(v: BoolValue) -> &'static str {
    match v {
        BoolValue::True => GREEN,
        BoolValue::False => RED,
        BoolValue::Missing => GREY,
        BoolValue::Undefined => "url(#hatch)",
    }
}

fn conformance(series: &[Series], opts: &PlotOptions) -> String {
    let w = f64::from(opts.width);
    let h = TOP + BOTTOM + STRIP * series.len() as f64 + 4.0 * (series.len() as f64 - 1.0);
    let mut out = header(w, h, opts);
    let f = Frame::new(w, h);
    let g = series[0].grid;
    let cw = f.w / g.count() as f64;
    for (k, s) in series.iter().enumerate() {
        let y = f.y0 + (STRIP + 4.0) * k as f64;
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            n(f.x0 - 4.0),
            n(y + 14.0),
            escape(&s.sensor_id)
        );
        for (i, smp) in s.samples.iter().enumerate() {
            let _ = writeln!(
                out,
                "<rect class=\"cell\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>",
                n(f.x0 + cw * i as f64),
                n(y),
                n(cw),
                n(STRIP),
                conformance_fill(BoolValue::from_sample(*smp))
            );
        }
    }
    f.x_labels(&mut out, &local(g.start(), opts.tz), &local(g.end(), opts.tz));
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeseries::{Sample, TimeGrid};

    const T0: Timestamp = 1_704_067_200;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(T0, 900, n).unwrap()
    }

    fn rule(vals: &[BoolValue]) -> Series {
        Series::new("rule:r", grid(vals.len()), vals.iter().map(|v| v.to_sample()).collect(), SeriesKind::Boolean).unwrap()
    }

    #[test]
    fn constant_line_golden() {
        let s = Series::from_values("flat", grid(4), &[5.0; 4]).unwrap();
        let opts = PlotOptions {
            width: 200,
            height: 100,
            ..Default::default()
        };
        let svg = emit_plot(PlotKind::Line, &[s], &opts).unwrap();
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/src/report/testdata/constant_line.svg");
        if std::env::var_os("ENAV_UPDATE_GOLDEN").is_some() {
            std::fs::write(path, &svg).unwrap();
        }
        assert_eq!(svg, std::fs::read_to_string(path).unwrap());
        // horizontal: every y coordinate in the polyline is the same
        let pts = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        let ys: Vec<&str> = pts.split(' ').map(|p| p.split(',').nth(1).unwrap()).collect();
        assert_eq!(ys.len(), 4);
        assert!(ys.iter().all(|y| *y == ys[0]));
    }

    #[test]
    fn all_true_strip_is_solid_green() {
        let s = rule(&[BoolValue::True; 50]);
        let svg = emit_plot(PlotKind::Conformance, &[s], &PlotOptions::default()).unwrap();
        let cells: Vec<&str> = svg.lines().filter(|l| l.contains("class=\"cell\"")).collect();
        assert_eq!(cells.len(), 50);
        assert!(cells.iter().all(|c| c.contains(&format!("fill=\"{GREEN}\""))));
    }

    #[test]
    fn conformance_colors_follow_values() {
        use BoolValue::*;
        let s = rule(&[True, False, Missing, Undefined]);
        let svg = emit_plot(PlotKind::Conformance, &[s], &PlotOptions::default()).unwrap();
        let fills: Vec<&str> = svg
            .lines()
            .filter(|l| l.contains("class=\"cell\""))
            .map(|l| l.split("fill=\"").nth(1).unwrap().split('"').next().unwrap())
            .collect();
        assert_eq!(fills, vec![GREEN, RED, GREY, "url(#hatch)"]);
    }

    #[test]
    fn week_carpet_has_a_cell_per_slot() {
        let vals: Vec<f64> = (0..7 * 96).map(|i| (i % 96) as f64).collect();
        let s = Series::from_values("t", grid(vals.len()), &vals).unwrap();
        let (cells, days, rows) = carpet_cells(&s, chrono_tz::UTC);
        assert_eq!((days, rows), (7, 96));
        let mut seen = std::collections::BTreeSet::new();
        for c in &cells {
            assert!(seen.insert(*c));
        }
        let svg = emit_plot(PlotKind::Carpet, &[s], &PlotOptions::default()).unwrap();
        assert_eq!(svg.matches("class=\"cell\"").count(), 7 * 96);
    }

    #[test]
    fn carpet_skips_missing_and_hatches_undefined() {
        let mut s = Series::from_values("t", grid(3), &[1.0, 2.0, 3.0]).unwrap();
        s.samples[1] = Sample::MISSING;
        s.samples[2] = Sample::UNDEFINED;
        let svg = emit_plot(PlotKind::Carpet, &[s], &PlotOptions::default()).unwrap();
        assert_eq!(svg.matches("class=\"cell\"").count(), 2);
        assert_eq!(svg.matches("fill=\"url(#hatch)\"").count(), 1);
    }

    #[test]
    fn line_gaps_at_missing() {
        let mut s = Series::from_values("t", grid(5), &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        s.samples[2] = Sample::MISSING;
        let svg = emit_plot(PlotKind::Line, &[s], &PlotOptions::default()).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn errors() {
        let a = Series::from_values("a", grid(3), &[1.0; 3]).unwrap();
        let b = Series::from_values("b", TimeGrid::new(T0, 60, 3).unwrap(), &[1.0; 3]).unwrap();
        assert!(matches!(
            emit_plot(PlotKind::Scatter, std::slice::from_ref(&a), &PlotOptions::default()),
            Err(PlotError::Arity { .. })
        ));
        assert!(matches!(
            emit_plot(PlotKind::Line, &[a.clone(), b], &PlotOptions::default()),
            Err(PlotError::GridMismatch { .. })
        ));
        assert!(matches!(
            emit_plot(PlotKind::Conformance, &[a], &PlotOptions::default()),
            Err(PlotError::KindMismatch { .. })
        ));
    }

    #[test]
    fn plots_are_deterministic() {
        let x = Series::from_values("x", grid(20), &(0..20).map(|i| i as f64).collect::<Vec<_>>()).unwrap();
        let y = Series::from_values("y", grid(20), &(0..20).map(|i| (i * i) as f64 / 7.0).collect::<Vec<_>>()).unwrap();
        for kind in [PlotKind::Line, PlotKind::Scatter, PlotKind::Carpet] {
            let a = emit_plot(kind, &[x.clone(), y.clone()], &PlotOptions::default()).unwrap();
            let b = emit_plot(kind, &[x.clone(), y.clone()], &PlotOptions::default()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn color_scale_endpoints() {
        assert_eq!(carpet_color(0.0), "#313695");
        assert_eq!(carpet_color(0.5), "#ffffbf");
        assert_eq!(carpet_color(1.0), "#a50026");
        assert_eq!(carpet_color(f64::NAN), "#ffffbf");
    }
}
