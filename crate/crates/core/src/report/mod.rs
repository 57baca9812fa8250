//! Regenerable HTML reports with comments that outlive regeneration.
//!
//! A report is driven by a JSON template of sections with author-chosen ids.
//! Comments are stored per section id, apart from any generated output, so a
//! report can be rebuilt over any range and every comment lands where it was.

mod svg;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use svg::{carpet_cells, carpet_color, conformance_fill, emit_plot, PlotError, PlotKind, PlotOptions};

use crate::eval::{conformance, MetricSeries};
use crate::ingest::parse_timestamp;
use crate::tickets::iso;
use crate::timeseries::{Series, Timestamp};
use svg::escape;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("template {path}: {reason}")]
    Template { path: PathBuf, reason: String },
    #[error("duplicate section id `{0}`")]
    DuplicateSection(String),
    #[error("unknown section `{section}` in report `{report}`")]
    UnknownSection { report: String, section: String },
    #[error("section `{section}`: unresolved reference `{reference}`")]
    UnresolvedReference { section: String, reference: String },
    #[error("section `{section}`: {source}")]
    Plot {
        section: String,
        #[source]
        source: PlotError,
    },
    #[error("section `{section}`: bad timestamp `{text}`")]
    BadTimestamp { section: String, text: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Section {
    Text {
        id: String,
        #[serde(default)]
        title: Option<String>,
        text: String,
    },
    MetricTable {
        id: String,
        #[serde(default)]
        title: Option<String>,
        metrics: Vec<String>,
    },
    Plot {
        id: String,
        #[serde(default)]
        title: Option<String>,
        plot: PlotKind,
        series: Vec<String>,
        /// RFC 3339 overrides of the report range.
        #[serde(default)]
        from: Option<String>,
        #[serde(default)]
        to: Option<String>,
        #[serde(default)]
        color_min: Option<f64>,
        #[serde(default)]
        color_max: Option<f64>,
    },
    RuleSummary {
        id: String,
        #[serde(default)]
        title: Option<String>,
        rules: Vec<String>,
    },
}

impl Section {
    pub fn id(&self) -> &str {
        match self {
            Section::Text { id, .. }
            | Section::MetricTable { id, .. }
            | Section::Plot { id, .. }
            | Section::RuleSummary { id, .. } => id,
        }
    }

    pub fn title(&self) -> Option<&str> {
        match self {
            Section::Text { title, .. }
            | Section::MetricTable { title, .. }
            | Section::Plot { title, .. }
            | Section::RuleSummary { title, .. } => title.as_deref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportTemplate {
    pub id: String,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub sections: Vec<Section>,
}

impl ReportTemplate {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let t: ReportTemplate = serde_json::from_str(text).map_err(|e| e.to_string())?;
        t.validate().map_err(|e| e.to_string())?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(|reason| ReportError::Template {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        let mut seen = HashSet::new();
        for s in &self.sections {
            if s.id().is_empty() || !seen.insert(s.id()) {
                return Err(ReportError::DuplicateSection(s.id().to_string()));
            }
        }
        Ok(())
    }

    pub fn section(&self, id: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.id() == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comment {
    pub author: String,
    #[serde(with = "iso")]
    pub timestamp: Timestamp,
    pub text: String,
}

/// Comments of one report keyed by section id, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommentStore {
    pub sections: BTreeMap<String, Vec<Comment>>,
}

impl CommentStore {
    pub fn load(path: &Path) -> Result<Self, ReportError> {
        match fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text)
                .map(|sections| CommentStore { sections })
                .map_err(|e| ReportError::Template {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(io_err(path)(e)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ReportError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut text = serde_json::to_string_pretty(&self.sections).expect("comments serialize");
        text.push('\n');
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn comments(&self, section: &str) -> &[Comment] {
        self.sections.get(section).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Appends a comment to a section that exists in `tpl`.
    pub fn add(&mut self, tpl: &ReportTemplate, section: &str, comment: Comment) -> Result<(), ReportError> {
        if tpl.section(section).is_none() {
            return Err(ReportError::UnknownSection {
                report: tpl.id.clone(),
                section: section.to_string(),
            });
        }
        self.sections.entry(section.to_string()).or_default().push(comment);
        Ok(())
    }
}

/// Loads, appends and persists in one step.
pub fn add_comment(
    store_path: &Path,
    tpl: &ReportTemplate,
    section: &str,
    author: &str,
    text: &str,
    at: Timestamp,
) -> Result<CommentStore, ReportError> {
    let mut store = CommentStore::load(store_path)?;
    store.add(
        tpl,
        section,
        Comment {
            author: author.to_string(),
            timestamp: at,
            text: text.to_string(),
        },
    )?;
    store.save(store_path)?;
    Ok(store)
}

/// Where report sections get their data.
pub trait ReportSource {
    fn tz(&self) -> Tz;
    /// A physical or virtual series clipped to `[from, to)`.
    fn series(&self, id: &str, from: Timestamp, to: Timestamp) -> Option<Series>;
    fn metric(&self, id: &str, from: Timestamp, to: Timestamp) -> Option<MetricSeries>;
    /// The four-valued output series of a rule.
    fn rule(&self, id: &str, from: Timestamp, to: Timestamp) -> Option<Series>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    pub html: String,
    /// (file name, SVG document) per plot section.
    pub plots: Vec<(String, String)>,
}

/// File-name label of a report range, e.g. `20240101T000000Z_20240201T000000Z`.
pub fn range_label(from: Timestamp, to: Timestamp) -> String {
    let f = |t: Timestamp| {
        DateTime::<Utc>::from_timestamp(t, 0)
            .map(|d| d.format("%Y%m%dT%H%M%SZ").to_string())
            .unwrap_or_else(|| t.to_string())
    };
    format!("{}_{}", f(from), f(to))
}

impl RenderedReport {
    /// Writes `<out>/<label>.html` and `<out>/plots/<label>/<section>.svg`.
    pub fn write(&self, out: &Path, label: &str) -> Result<PathBuf, ReportError> {
        let plots = out.join("plots").join(label);
        fs::create_dir_all(&plots).map_err(io_err(&plots))?;
        for (name, doc) in &self.plots {
            let p = plots.join(name);
            fs::write(&p, doc).map_err(io_err(&p))?;
        }
        let html = out.join(format!("{label}.html"));
        fs::write(&html, &self.html).map_err(io_err(&html))?;
        Ok(html)
    }
}

const STYLE: &str = "body{font-family:sans-serif;max-width:60em;margin:2em auto;color:#212121}\
table{border-collapse:collapse;margin:.5em 0}td,th{border:1px solid #bdbdbd;padding:2px 8px;text-align:right}\
th:first-child,td:first-child{text-align:left}.green{background:#c8e6c9}.red{background:#ffcdd2}\
blockquote.comment{border-left:4px solid #1f77b4;margin:.5em 0;padding:0 1em}\
blockquote.comment p{white-space:pre-wrap}svg{max-width:100%;height:auto}";

fn local(t: Timestamp, tz: Tz) -> String {
    tz.timestamp_opt(t, 0).unwrap().to_rfc3339()
}

fn pct(x: f64) -> String {
    format!("{:.1}%", x * 100.0)
}

fn render_comments(out: &mut String, comments: &[Comment], section: &str) {
    if comments.is_empty() {
        return;
    }
    out.push_str("<div class=\"comments\">\n");
    for c in comments {
        let _ = writeln!(
            out,
            "<blockquote class=\"comment\" data-section=\"{}\"><p>{}</p><footer>{}, {}</footer></blockquote>",
            escape(section),
            escape(&c.text),
            escape(&c.author),
            crate::ingest::format_timestamp(c.timestamp)
        );
    }
    out.push_str("</div>\n");
}

fn resolve_range(section: &str, from: &Option<String>, to: &Option<String>, dflt: (Timestamp, Timestamp)) -> Result<(Timestamp, Timestamp), ReportError> {
    let parse = |v: &Option<String>, d: Timestamp| match v {
        None => Ok(d),
        Some(text) => parse_timestamp(text).ok_or_else(|| ReportError::BadTimestamp {
            section: section.to_string(),
            text: text.clone(),
        }),
    };
    Ok((parse(from, dflt.0)?, parse(to, dflt.1)?))
}

/// Renders `tpl` over `[from, to)` into one self-contained HTML document.
pub fn render_report(
    tpl: &ReportTemplate,
    src: &dyn ReportSource,
    comments: &CommentStore,
    from: Timestamp,
    to: Timestamp,
) -> Result<RenderedReport, ReportError> {
    tpl.validate()?;
    let tz = src.tz();
    let title = tpl.title.as_deref().unwrap_or(&tpl.id);
    let mut html = String::new();
    let mut plots = Vec::new();
    let _ = write!(
        html,
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{t}</title>\n<style>{STYLE}</style>\n</head>\n<body>\n<h1>{t}</h1>\n<p class=\"range\">{} to {}</p>\n",
        local(from, tz),
        local(to, tz),
        t = escape(title)
    );
    let unresolved = |section: &str, reference: &str| ReportError::UnresolvedReference {
        section: section.to_string(),
        reference: reference.to_string(),
    };

    for s in &tpl.sections {
        let id = s.id();
        let _ = writeln!(html, "<section id=\"sec-{}\">", escape(id));
        if let Some(t) = s.title() {
            let _ = writeln!(html, "<h2>{}</h2>", escape(t));
        }
        match s {
            Section::Text { text, .. } => {
                for para in text.split("\n\n").filter(|p| !p.trim().is_empty()) {
                    let _ = writeln!(html, "<p>{}</p>", escape(para.trim()));
                }
            }
            Section::MetricTable { metrics, .. } => {
                for m in metrics {
                    let ms = src.metric(m, from, to).ok_or_else(|| unresolved(id, m))?;
                    let _ = writeln!(
                        html,
                        "<table class=\"metric\">\n<caption>{}</caption>\n<tr><th>bucket start</th><th>bucket end</th><th>value</th><th>coverage</th></tr>",
                        escape(m)
                    );
                    for b in &ms.buckets {
                        let _ = writeln!(
                            html,
                            "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
                            local(b.start, tz),
                            local(b.end, tz),
                            b.value.map(|v| format!("{v:.3}")).unwrap_or_else(|| "MISSING".into()),
                            pct(b.coverage)
                        );
                    }
                    html.push_str("</table>\n");
                }
            }
            Section::RuleSummary { rules, .. } => {
                html.push_str(
                    "<table class=\"rules\">\n<tr><th>rule</th><th>samples</th><th>TRUE</th><th>FALSE</th><th>MISSING</th><th>UNDEFINED</th></tr>\n",
                );
                for r in rules {
                    let series = src.rule(r, from, to).ok_or_else(|| unresolved(id, r))?;
                    let c = conformance(&series);
                    let _ = writeln!(
                        html,
                        "<tr><td>{}</td><td>{}</td><td class=\"green\">{}</td><td class=\"red\">{}</td><td>{}</td><td>{}</td></tr>",
                        escape(r),
                        c.total(),
                        pct(c.green()),
                        pct(c.red()),
                        pct(c.missing()),
                        pct(c.undefined())
                    );
                }
                html.push_str("</table>\n");
            }
            Section::Plot {
                plot,
                series,
                from: pf,
                to: pt,
                color_min,
                color_max,
                title,
                ..
            } => {
                let (a, b) = resolve_range(id, pf, pt, (from, to))?;
                let data = series
                    .iter()
                    .map(|r| src.series(r, a, b).ok_or_else(|| unresolved(id, r)))
                    .collect::<Result<Vec<_>, _>>()?;
                let opts = PlotOptions {
                    tz,
                    title: title.clone(),
                    color_min: *color_min,
                    color_max: *color_max,
                    ..Default::default()
                };
                let doc = emit_plot(*plot, &data, &opts).map_err(|source| ReportError::Plot {
                    section: id.to_string(),
                    source,
                })?;
                html.push_str("<figure>\n");
                html.push_str(&doc);
                html.push_str("</figure>\n");
                plots.push((format!("{id}.svg"), doc));
            }
        }
        render_comments(&mut html, comments.comments(id), id);
        html.push_str("</section>\n");
    }

    let orphans: Vec<_> = comments
        .sections
        .iter()
        .filter(|(sec, list)| tpl.section(sec).is_none() && !list.is_empty())
        .collect();
    if !orphans.is_empty() {
        html.push_str("<section id=\"orphaned-comments\">\n<h2>Orphaned comments</h2>\n");
        for (sec, list) in orphans {
            let _ = writeln!(html, "<h3>{}</h3>", escape(sec));
            render_comments(&mut html, list, sec);
        }
        html.push_str("</section>\n");
    }
    html.push_str("</body>\n</html>\n");
    Ok(RenderedReport { html, plots })
}
