//! A workspace directory and the pipeline over it.
//!
//! ```text
//! config.json       settings (optional)
//! spec/*.afs        workspace specification
//! library/*.afs     shared templates
//! raw/              imported logger points
//! markers/          imported mode markers
//! data/             preprocessed sensor series
//! virtual/          evaluated rules and functions (reset when the spec changes)
//! metrics/          one CSV per metric
//! summaries/        daily data-quality counts per rule
//! tickets/          ticket log and outbox
//! reports/<id>/     template, comments and rendered output
//! logs/             import and run logs
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use chrono::{TimeZone, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{bucket_span, eval_artifact, eval_metric, eval_subexpressions, EvalContext, MetricSeries};
use crate::ingest::{format_timestamp, import_csv, import_markers, parse_timestamp, ImportError, ImportMapping, ImportReport, RawStore};
use crate::lang::{
    format_decls, parse, resolve_lenient, typecheck_lenient, Decl, DeclKind, Diagnostic, Fragment, MetricDecl, Quantization, SpecModel,
    TypedModel,
};
use crate::preprocess::{preprocess, PreprocessConfig};
use crate::report::{add_comment, range_label, render_report, CommentStore, ReportError, ReportSource, ReportTemplate};
use crate::tickets::{daily_quality, scan_violations, RuleRun, Ticket, TicketError, TicketStore, DEFAULT_MIN_STEPS};
use crate::timeseries::{make_grid, Quality, Series, SeriesKind, Store, StoreError, Timestamp, DEFAULT_PERIOD};

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error("config {path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("workspace is locked by another process ({0}); remove the file if no other enav is running")]
    Locked(PathBuf),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Import(#[from] ImportError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Tickets(#[from] TicketError),
    #[error("{0}")]
    Invalid(String),
}

impl WorkspaceError {
    /// 1 for problems with the user's inputs, 2 for the environment.
    pub fn exit_code(&self) -> i32 {
        match self {
            WorkspaceError::Io { .. } | WorkspaceError::Locked(_) => 2,
            WorkspaceError::Store(StoreError::Io { .. }) => 2,
            WorkspaceError::Import(ImportError::Io { .. }) => 2,
            WorkspaceError::Report(ReportError::Io { .. }) => 2,
            WorkspaceError::Tickets(TicketError::Io { .. }) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> WorkspaceError + '_ {
    move |source| WorkspaceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkspaceConfig {
    /// IANA zone used for calendars, time routines and reports.
    pub timezone: String,
    /// Grid period for artifacts not tied to a sensor.
    pub period: i64,
    pub preprocess: PreprocessConfig,
    pub ticket_min_steps: usize,
    pub coverage_threshold: f64,
    /// Library directory, relative to the workspace root.
    pub library: PathBuf,
    /// Tolerance of numeric comparisons.
    pub eps: f64,
}

impl Default for WorkspaceConfig {
    fn default() -> Self {
        WorkspaceConfig {
            timezone: "UTC".into(),
            period: DEFAULT_PERIOD,
            preprocess: PreprocessConfig::default(),
            ticket_min_steps: DEFAULT_MIN_STEPS,
            coverage_threshold: 0.9,
            library: PathBuf::from("library"),
            eps: 1e-9,
        }
    }
}

impl WorkspaceConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let c: WorkspaceConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.tz()?;
        if self.period <= 0 {
            return Err(format!("period must be positive, got {}", self.period));
        }
        if self.ticket_min_steps == 0 {
            return Err("ticket_min_steps must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.coverage_threshold) {
            return Err(format!("coverage_threshold must be in [0, 1], got {}", self.coverage_threshold));
        }
        if !(self.eps >= 0.0) {
            return Err(format!("eps must be non-negative, got {}", self.eps));
        }
        self.preprocess.validate().map_err(|e| e.to_string())
    }

    pub fn tz(&self) -> Result<Tz, String> {
        self.timezone
            .parse()
            .map_err(|_| format!("unknown time zone `{}`", self.timezone))
    }
}

/// Exclusive hold on a workspace; released on drop.
#[derive(Debug)]
pub struct WorkspaceLock {
    path: PathBuf,
}

impl Drop for WorkspaceLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Parsed, resolved and checked specification with everything reported
/// along the way.
#[derive(Debug, Clone)]
pub struct LoadedSpec {
    pub typed: TypedModel,
    pub diagnostics: Vec<Diagnostic>,
}

impl LoadedSpec {
    pub fn has_errors(&self) -> bool {
        self.diagnostics.iter().any(Diagnostic::is_error)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutcome {
    /// Human-readable problems, one per failed step.
    pub diagnostics: Vec<String>,
    pub failed: usize,
    /// Virtual series ids written, in evaluation order.
    pub evaluated: Vec<String>,
    pub tickets: Vec<Ticket>,
    pub metrics: Vec<String>,
    /// Sub-expression CSV when `explain` was requested.
    pub explain: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
    config: WorkspaceConfig,
    tz: Tz,
}

const SPEC_HASH: &str = "spec.sha256";

impl Workspace {
    /// Opens `root`, reading `config` or else `root/config.json` when present.
    pub fn open(root: impl Into<PathBuf>, config: Option<&Path>) -> Result<Self, WorkspaceError> {
        let root = root.into();
        let path = config.map(Path::to_path_buf).unwrap_or_else(|| root.join("config.json"));
        let config = match fs::read_to_string(&path) {
            Ok(text) => WorkspaceConfig::from_json(&text).map_err(|reason| WorkspaceError::Config { path: path.clone(), reason })?,
            Err(e) if e.kind() == io::ErrorKind::NotFound && config.is_none() => WorkspaceConfig::default(),
            Err(e) => return Err(io_err(&path)(e)),
        };
        Self::with_config(root, config)
    }

    pub fn with_config(root: impl Into<PathBuf>, config: WorkspaceConfig) -> Result<Self, WorkspaceError> {
        let root = root.into();
        let tz = config.tz().map_err(|reason| WorkspaceError::Config {
            path: root.join("config.json"),
            reason,
        })?;
        config.validate().map_err(|reason| WorkspaceError::Config {
            path: root.join("config.json"),
            reason,
        })?;
        Ok(Workspace { root, config, tz })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &WorkspaceConfig {
        &self.config
    }

    pub fn tz(&self) -> Tz {
        self.tz
    }

    pub fn data_store(&self) -> Store {
        Store::new(&self.root)
    }

    pub fn virtual_store(&self) -> Store {
        Store::new(self.root.join("virtual"))
    }

    pub fn raw_store(&self) -> RawStore {
        RawStore::new(&self.root)
    }

    pub fn ticket_store(&self) -> TicketStore {
        TicketStore::new(self.root.join("tickets"))
    }

    pub fn lock(&self) -> Result<WorkspaceLock, WorkspaceError> {
        fs::create_dir_all(&self.root).map_err(io_err(&self.root))?;
        let path = self.root.join(".enav.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(WorkspaceLock { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(WorkspaceError::Locked(path)),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    fn afs_files(dir: &Path) -> Result<Vec<PathBuf>, WorkspaceError> {
        let mut files: Vec<PathBuf> = match fs::read_dir(dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "afs"))
                .collect(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(dir)(e)),
        };
        files.sort();
        Ok(files)
    }

    /// Parses each file on its own, so a broken file loses only its own
    /// declarations.
    fn parse_each(files: &[PathBuf], diags: &mut Vec<Diagnostic>) -> Result<Vec<Fragment>, WorkspaceError> {
        let mut out = Vec::new();
        for f in files {
            let text = fs::read_to_string(f).map_err(io_err(f))?;
            match parse(&text, &f.display().to_string()) {
                Ok(fr) => out.push(fr),
                Err(mut e) => diags.append(&mut e),
            }
        }
        Ok(out)
    }

    fn library(&self, diags: &mut Vec<Diagnostic>) -> Result<SpecModel, WorkspaceError> {
        let files = Self::afs_files(&self.root.join(&self.config.library))?;
        let frags = Self::parse_each(&files, diags)?;
        let (lib, mut d) = resolve_lenient(&frags, &SpecModel::empty());
        diags.append(&mut d);
        Ok(lib)
    }

    /// Loads `paths`, or every file in `spec/` when empty. Broken declarations
    /// are dropped and reported; the rest is returned.
    pub fn load_spec(&self, paths: &[PathBuf]) -> Result<LoadedSpec, WorkspaceError> {
        let mut diagnostics = Vec::new();
        let lib = self.library(&mut diagnostics)?;
        let files = if paths.is_empty() {
            Self::afs_files(&self.root.join("spec"))?
        } else {
            paths.to_vec()
        };
        let frags = Self::parse_each(&files, &mut diagnostics)?;
        let (model, mut d) = resolve_lenient(&frags, &lib);
        diagnostics.append(&mut d);
        let (typed, mut d) = typecheck_lenient(model);
        diagnostics.append(&mut d);
        diagnostics.extend(typed.warnings.iter().cloned());
        diagnostics.sort_by(|a, b| a.span.cmp(&b.span).then_with(|| a.message.cmp(&b.message)));
        diagnostics.dedup_by(|a, b| a.span == b.span && a.message == b.message);
        Ok(LoadedSpec { typed, diagnostics })
    }

    fn append_log(&self, name: &str, value: &serde_json::Value) -> Result<(), WorkspaceError> {
        let dir = self.root.join("logs");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(name);
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        writeln!(f, "{value}").map_err(io_err(&path))
    }

    /// Imports a `timestamp,point,value` file (or `timestamp,point,label`
    /// markers) into the raw store.
    ///
    /// Without a mapping, data points map to declared sensors of the same
    /// name and marker points map to themselves.
    pub fn import(&self, file: &Path, mapping: Option<&Path>, markers: bool) -> Result<ImportReport, WorkspaceError> {
        let _lock = self.lock()?;
        let spec = self.load_spec(&[])?;
        let sensors: Vec<&str> = spec.typed.model.sensors().map(|(n, _)| n).collect();
        let mapping = match mapping {
            Some(p) => {
                let m = ImportMapping::load(p)?;
                if !markers {
                    let undeclared = m.undeclared(|s| sensors.contains(&s));
                    if !undeclared.is_empty() {
                        return Err(WorkspaceError::Invalid(format!(
                            "mapping targets undeclared sensors: {}",
                            undeclared.join(", ")
                        )));
                    }
                }
                m
            }
            None if markers => ImportMapping::identity(marker_points(file)?.iter().map(String::as_str)),
            None => ImportMapping::identity(sensors.iter().copied()),
        };
        let raw = self.raw_store();
        let report = if markers {
            let (series, report) = import_markers(file, &mapping)?;
            for m in &series {
                raw.write_markers(m).map_err(io_err(&self.root.join("markers")))?;
            }
            report
        } else {
            let (series, report) = import_csv(file, &mapping)?;
            for s in &series {
                raw.merge(s).map_err(io_err(&self.root.join("raw")))?;
            }
            report
        };
        self.append_log(
            "import.jsonl",
            &serde_json::json!({
                "at": format_timestamp(Utc::now().timestamp()),
                "kind": if markers { "markers" } else { "data" },
                "report": report,
            }),
        )?;
        Ok(report)
    }

    fn is_empty(&self) -> Result<bool, WorkspaceError> {
        let no_spec = Self::afs_files(&self.root.join("spec"))?.is_empty() && Self::afs_files(&self.root.join(&self.config.library))?.is_empty();
        let no_raw = self.raw_store().sensors().map_err(io_err(&self.root.join("raw")))?.is_empty();
        Ok(no_spec && no_raw)
    }

    /// Preprocess, evaluate, upsert tickets, compute metrics and summaries
    /// over `[from, to)`. Failures of single artifacts are collected in the
    /// outcome; the rest still runs.
    pub fn run(&self, from: Timestamp, to: Timestamp, explain: Option<&str>) -> Result<RunOutcome, WorkspaceError> {
        if from >= to {
            return Err(WorkspaceError::Invalid("run range is empty: --from must be before --to".into()));
        }
        let mut out = RunOutcome::default();
        if self.is_empty()? {
            return Ok(out);
        }
        let _lock = self.lock()?;
        let spec = self.load_spec(&[])?;
        for d in spec.diagnostics.iter().filter(|d| d.is_error()) {
            out.diagnostics.push(d.to_string());
            out.failed += 1;
        }
        let typed = &spec.typed;
        let model = &typed.model;
        self.reset_virtual_if_changed(model)?;

        let sensors = self.preprocess_all(model, from, to, &mut out)?;
        let results = self.evaluate(typed, &sensors, from, to, explain, &mut out)?;
        self.tickets(typed, &sensors, &results, &mut out)?;
        self.metrics(typed, from, to, &mut out)?;
        self.summaries(&results, from, to)?;

        self.append_log(
            "run.jsonl",
            &serde_json::json!({
                "at": format_timestamp(Utc::now().timestamp()),
                "from": format_timestamp(from),
                "to": format_timestamp(to),
                "evaluated": out.evaluated,
                "failed": out.failed,
                "diagnostics": out.diagnostics,
            }),
        )?;
        Ok(out)
    }

    fn reset_virtual_if_changed(&self, model: &SpecModel) -> Result<(), WorkspaceError> {
        let hash: String = Sha256::digest(format_decls(model.decls()).as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        let dir = self.root.join("virtual");
        let path = dir.join(SPEC_HASH);
        let old = fs::read_to_string(&path).ok();
        if old.as_deref().map(str::trim) != Some(hash.as_str()) {
            self.virtual_store().clear()?;
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            fs::write(&path, format!("{hash}\n")).map_err(io_err(&path))?;
        }
        Ok(())
    }

    /// Raw → grid for every declared sensor. Sensors with no raw points in
    /// range are all MISSING and not written.
    fn preprocess_all(&self, model: &SpecModel, from: Timestamp, to: Timestamp, out: &mut RunOutcome) -> Result<BTreeMap<String, Series>, WorkspaceError> {
        let raw = self.raw_store();
        let store = self.data_store();
        let mut series = BTreeMap::new();
        for (name, decl) in model.sensors() {
            let grid = make_grid(from, to, decl.period).map_err(|e| WorkspaceError::Invalid(e.to_string()))?;
            let cfg = PreprocessConfig {
                period: decl.period,
                ..self.config.preprocess
            };
            let hw = cfg.halfwidth();
            let points = raw.load(name, grid.start() - hw, grid.end() + hw).map_err(io_err(&self.root.join("raw")))?;
            if points.points.is_empty() {
                series.insert(name.to_string(), Series::missing(name, grid, SeriesKind::Numeric));
                continue;
            }
            let s = match preprocess(&points, grid, &cfg) {
                Ok((s, _)) => s,
                Err(e) => {
                    out.diagnostics.push(format!("sensor `{name}`: {e}"));
                    out.failed += 1;
                    Series::missing(name, grid, SeriesKind::Numeric)
                }
            };
            if let Err(e) = store.write(&s) {
                if matches!(e, StoreError::Io { .. }) {
                    return Err(e.into());
                }
                out.diagnostics.push(format!("sensor `{name}`: {e}"));
                out.failed += 1;
            }
            series.insert(name.to_string(), s);
        }
        Ok(series)
    }

    fn evaluate(
        &self,
        typed: &TypedModel,
        sensors: &BTreeMap<String, Series>,
        from: Timestamp,
        to: Timestamp,
        explain: Option<&str>,
        out: &mut RunOutcome,
    ) -> Result<Vec<Evaluated>, WorkspaceError> {
        let model = &typed.model;
        let mut contexts: BTreeMap<i64, EvalContext> = BTreeMap::new();
        // instances first, in dependency order, then parameterless artifacts
        let mut jobs: Vec<(Decl, BTreeMap<String, String>, i64)> = typed
            .instance_order()
            .into_iter()
            .map(|i| (i.decl.clone(), i.binding.clone(), typed.instance_period(&i.id).unwrap_or(self.config.period)))
            .collect();
        for d in model.workspace_decls() {
            let plain = matches!(d.kind, DeclKind::Rule(_) | DeclKind::Function(_)) && d.params().is_empty();
            if plain {
                jobs.push((d.clone(), BTreeMap::new(), self.config.period));
            }
        }

        let vstore = self.virtual_store();
        let mut results = Vec::new();
        for (decl, binding, p) in jobs {
            if !contexts.contains_key(&p) {
                let grid = make_grid(from, to, p).map_err(|e| WorkspaceError::Invalid(e.to_string()))?;
                let mut ctx = EvalContext::new(grid, self.tz).with_eps(self.config.eps).with_model(model);
                for (name, s) in sensors.iter().filter(|(_, s)| s.grid.period() == p) {
                    ctx.bind(name.clone(), s.clone()).map_err(|e| WorkspaceError::Invalid(e.to_string()))?;
                }
                contexts.insert(p, ctx);
            }
            let ctx = contexts.get_mut(&p).unwrap();
            if explain == Some(decl.name.as_str()) {
                match eval_subexpressions(&decl, ctx) {
                    Ok(subs) => out.explain = Some(explain_csv(&subs)),
                    Err(e) => {
                        out.diagnostics.push(format!("explain `{}`: {e}", decl.name));
                        out.failed += 1;
                    }
                }
            }
            let series = match eval_artifact(&decl, ctx) {
                Ok(s) => s,
                Err(e) => {
                    out.diagnostics.push(format!("artifact `{}`: {e}", decl.name));
                    out.failed += 1;
                    continue;
                }
            };
            if let Err(e) = vstore.write(&series) {
                if matches!(e, StoreError::Io { .. }) {
                    return Err(e.into());
                }
                out.diagnostics.push(format!("artifact `{}`: {e}", decl.name));
                out.failed += 1;
            }
            // later instances may be bound to this one
            let mut named = series.clone();
            named.sensor_id = decl.name.clone();
            let _ = ctx.bind(decl.name.clone(), named);
            out.evaluated.push(series.sensor_id.clone());
            results.push(Evaluated {
                name: decl.name.clone(),
                binding,
                series,
            });
        }
        if let Some(name) = explain {
            if out.explain.is_none() && !out.diagnostics.iter().any(|d| d.starts_with(&format!("explain `{name}`"))) {
                out.diagnostics.push(format!("explain: no evaluable artifact `{name}`"));
                out.failed += 1;
            }
        }
        Ok(results)
    }

    fn tickets(&self, typed: &TypedModel, sensors: &BTreeMap<String, Series>, results: &[Evaluated], out: &mut RunOutcome) -> Result<(), WorkspaceError> {
        let store = self.ticket_store();
        for r in results.iter().filter(|r| r.series.kind == SeriesKind::Boolean) {
            let violations = scan_violations(&r.series, self.config.ticket_min_steps)?;
            let inputs: Vec<Series> = r
                .binding
                .values()
                .filter(|t| typed.model.sensor(t).is_some())
                .filter_map(|t| sensors.get(t).cloned())
                .collect();
            let run = RuleRun {
                rule_id: &r.name,
                binding: r.binding.clone(),
                grid: r.series.grid,
                inputs: &inputs,
            };
            out.tickets.extend(store.upsert(&run, &violations)?);
        }
        Ok(())
    }

    /// Context series of a metric over `[from, to)`, from the stores.
    fn metric_context(&self, model: &SpecModel, m: &MetricDecl, from: Timestamp, to: Timestamp) -> Result<Option<Series>, WorkspaceError> {
        let (store, id) = match model.get(&m.context).map(|d| &d.kind) {
            Some(DeclKind::Sensor(_)) => (self.data_store(), m.context.clone()),
            _ => {
                let vs = self.virtual_store();
                let id = ["fn:", "rule:"]
                    .iter()
                    .map(|p| format!("{p}{}", m.context))
                    .find(|id| vs.sensor_grid(id).is_ok());
                match id {
                    Some(id) => (vs, id),
                    None => return Ok(None),
                }
            }
        };
        match store.load(&id, from, to) {
            Ok(s) => Ok(Some(s)),
            Err(StoreError::UnknownSensor(_)) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn metric_series(&self, model: &SpecModel, name: &str, m: &MetricDecl, from: Timestamp, to: Timestamp) -> Result<Option<MetricSeries>, WorkspaceError> {
        let Some(ctx) = self.metric_context(model, m, from, to)? else {
            return Ok(None);
        };
        eval_metric(name, m, &ctx, from, to, self.tz, self.config.coverage_threshold)
            .map(Some)
            .map_err(|e| WorkspaceError::Invalid(format!("metric `{name}`: {e}")))
    }

    /// Recomputes every bucket touched by the run over whole calendar
    /// buckets and merges them into `metrics/<id>.csv`.
    fn metrics(&self, typed: &TypedModel, from: Timestamp, to: Timestamp, out: &mut RunOutcome) -> Result<(), WorkspaceError> {
        let model = &typed.model;
        for (name, m) in model.metrics().filter(|(n, _)| !model.is_library(n)) {
            let lo = bucket_span(from, m.quantization, self.tz).0;
            let hi = bucket_span(to - 1, m.quantization, self.tz).1;
            let ms = match self.metric_series(model, name, m, lo, hi) {
                Ok(Some(ms)) => ms,
                Ok(None) => continue,
                Err(WorkspaceError::Invalid(msg)) => {
                    out.diagnostics.push(msg);
                    out.failed += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let path = self.root.join("metrics").join(format!("{name}.csv"));
            merge_csv(&path, &ms.to_csv(self.tz), |row| row.split(',').next().and_then(parse_timestamp))?;
            out.metrics.push(name.to_string());
        }
        Ok(())
    }

    fn summaries(&self, results: &[Evaluated], from: Timestamp, to: Timestamp) -> Result<(), WorkspaceError> {
        let vstore = self.virtual_store();
        let lo = bucket_span(from, Quantization::Day, self.tz).0;
        let hi = bucket_span(to - 1, Quantization::Day, self.tz).1;
        for r in results.iter().filter(|r| r.series.kind == SeriesKind::Boolean) {
            let s = vstore.load(&r.series.sensor_id, lo, hi)?;
            let mut text = String::from("day,samples,true,false,missing,undefined,missing_fraction,undefined_fraction\n");
            for d in daily_quality(&s, self.tz) {
                let n = d.total().max(1) as f64;
                let _ = writeln!(
                    text,
                    "{},{},{},{},{},{},{},{}",
                    d.day,
                    d.total(),
                    d.true_count,
                    d.false_count,
                    d.missing_count,
                    d.undefined_count,
                    d.missing_count as f64 / n,
                    d.undefined_count as f64 / n
                );
            }
            let path = self.root.join("summaries").join(format!("{}.csv", r.name));
            merge_csv(&path, &text, |row| row.split(',').next().map(str::to_string))?;
        }
        Ok(())
    }

    pub fn report_dir(&self, id: &str) -> PathBuf {
        self.root.join("reports").join(id)
    }

    pub fn load_template(&self, id: &str) -> Result<ReportTemplate, WorkspaceError> {
        let tpl = ReportTemplate::load(&self.report_dir(id).join("template.json"))?;
        if tpl.id != id {
            return Err(WorkspaceError::Invalid(format!("template in reports/{id} declares id `{}`", tpl.id)));
        }
        Ok(tpl)
    }

    /// Renders report `id` over `[from, to)` into `reports/<id>/out/`.
    pub fn report(&self, id: &str, from: Timestamp, to: Timestamp) -> Result<PathBuf, WorkspaceError> {
        if from >= to {
            return Err(WorkspaceError::Invalid("report range is empty".into()));
        }
        let _lock = self.lock()?;
        let tpl = self.load_template(id)?;
        let comments = CommentStore::load(&self.report_dir(id).join("comments.json"))?;
        let spec = self.load_spec(&[])?;
        let src = WorkspaceSource {
            ws: self,
            model: &spec.typed.model,
        };
        let rendered = render_report(&tpl, &src, &comments, from, to)?;
        Ok(rendered.write(&self.report_dir(id).join("out"), &range_label(from, to))?)
    }

    pub fn comment(&self, report: &str, section: &str, author: &str, text: &str, at: Timestamp) -> Result<CommentStore, WorkspaceError> {
        let _lock = self.lock()?;
        let tpl = self.load_template(report)?;
        Ok(add_comment(&self.report_dir(report).join("comments.json"), &tpl, section, author, text, at)?)
    }

    /// Debug CSV of a stored series: raw points with `raw`, otherwise the
    /// preprocessed or evaluated grid series.
    pub fn export(&self, sensor: &str, from: Timestamp, to: Timestamp, raw: bool) -> Result<String, WorkspaceError> {
        if raw {
            let rs = self.raw_store();
            if !rs.sensors().map_err(io_err(&self.root.join("raw")))?.iter().any(|s| s == sensor) {
                return Err(WorkspaceError::Invalid(format!("no raw data for `{sensor}`")));
            }
            return rs.export_csv(sensor, from, to).map_err(io_err(&self.root.join("raw")));
        }
        let s = match self.data_store().load(sensor, from, to) {
            Ok(s) => s,
            Err(StoreError::UnknownSensor(_) | StoreError::InvalidSensorId(_)) => self.virtual_store().load(sensor, from, to)?,
            Err(e) => return Err(e.into()),
        };
        Ok(series_csv(&s))
    }

    pub fn acknowledge(&self, ticket: &str) -> Result<Ticket, WorkspaceError> {
        let _lock = self.lock()?;
        Ok(self.ticket_store().acknowledge(ticket, Utc::now().timestamp())?)
    }
}

struct Evaluated {
    name: String,
    binding: BTreeMap<String, String>,
    series: Series,
}

/// Point names appearing in a marker file.
fn marker_points(path: &Path) -> Result<Vec<String>, WorkspaceError> {
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| WorkspaceError::Invalid(format!("{}: {e}", path.display())))?;
    let mut points: Vec<String> = r
        .records()
        .filter_map(|rec| rec.ok().and_then(|r| r.get(1).map(|p| p.trim().to_string())))
        .collect();
    points.sort();
    points.dedup();
    Ok(points)
}

/// Replaces rows of `path` whose key appears in `fresh` and keeps the others,
/// ordered by key. The first line of `fresh` is the header.
fn merge_csv<K: Ord>(path: &Path, fresh: &str, key: impl Fn(&str) -> Option<K>) -> Result<(), WorkspaceError> {
    let mut lines = fresh.lines();
    let header = lines.next().unwrap_or_default();
    let mut rows: BTreeMap<K, String> = BTreeMap::new();
    if let Ok(old) = fs::read_to_string(path) {
        for row in old.lines().skip(1) {
            if let Some(k) = key(row) {
                rows.insert(k, row.to_string());
            }
        }
    }
    for row in lines {
        if let Some(k) = key(row) {
            rows.insert(k, row.to_string());
        }
    }
    let mut text = format!("{header}\n");
    for row in rows.values() {
        text.push_str(row);
        text.push('\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn sample_text(s: &crate::timeseries::Sample) -> (String, &'static str) {
    match s.quality {
        Quality::Valid => (s.value.to_string(), "VALID"),
        Quality::Missing => (String::new(), "MISSING"),
        Quality::Undefined => (String::new(), "UNDEFINED"),
    }
}

/// `timestamp,value,quality` rows.
pub fn series_csv(s: &Series) -> String {
    let mut out = String::from("timestamp,value,quality\n");
    for (t, smp) in s.iter() {
        let (v, q) = sample_text(smp);
        let _ = writeln!(out, "{},{v},{q}", format_timestamp(t));
    }
    out
}

fn explain_csv(subs: &[(String, Series)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["timestamp".to_string()];
    header.extend(subs.iter().map(|(l, _)| l.clone()));
    w.write_record(&header).unwrap();
    if let Some((_, first)) = subs.first() {
        for (i, t) in first.grid.timestamps().enumerate() {
            let mut row = vec![format_timestamp(t)];
            for (_, s) in subs {
                let smp = &s.samples[i];
                row.push(match (s.kind, smp.quality) {
                    (_, Quality::Missing) => "MISSING".into(),
                    (_, Quality::Undefined) => "UNDEFINED".into(),
                    (SeriesKind::Boolean, _) => (if smp.value != 0.0 { "TRUE" } else { "FALSE" }).into(),
                    (SeriesKind::Numeric, _) => smp.value.to_string(),
                });
            }
            w.write_record(&row).unwrap();
        }
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

/// Report data read straight from the workspace stores.
pub struct WorkspaceSource<'a> {
    pub ws: &'a Workspace,
    pub model: &'a SpecModel,
}

impl ReportSource for WorkspaceSource<'_> {
    fn tz(&self) -> Tz {
        self.ws.tz
    }

    fn series(&self, id: &str, from: Timestamp, to: Timestamp) -> Option<Series> {
        if self.model.sensor(id).is_some() {
            return match self.ws.data_store().load(id, from, to) {
                Ok(s) => Some(s),
                Err(_) => {
                    let p = self.model.sensor(id)?.period;
                    Some(Series::missing(id, make_grid(from, to, p).ok()?, SeriesKind::Numeric))
                }
            };
        }
        let vs = self.ws.virtual_store();
        [id.to_string(), format!("fn:{id}"), format!("rule:{id}")]
            .into_iter()
            .find_map(|v| vs.load(&v, from, to).ok())
    }

    fn metric(&self, id: &str, from: Timestamp, to: Timestamp) -> Option<MetricSeries> {
        let m = match &self.model.get(id)?.kind {
            DeclKind::Metric(m) => m,
            _ => return None,
        };
        self.ws.metric_series(self.model, id, m, from, to).ok().flatten()
    }

    fn rule(&self, id: &str, from: Timestamp, to: Timestamp) -> Option<Series> {
        self.ws.virtual_store().load(&format!("rule:{id}"), from, to).ok()
    }
}

/// Parses an RFC 3339 instant or a plain `YYYY-MM-DD` date (midnight in `tz`).
pub fn parse_instant(text: &str, tz: Tz) -> Option<Timestamp> {
    if let Some(t) = parse_timestamp(text) {
        return Some(t);
    }
    let d = chrono::NaiveDate::parse_from_str(text.trim(), "%Y-%m-%d").ok()?;
    tz.from_local_datetime(&d.and_hms_opt(0, 0, 0)?).earliest().map(|t| t.timestamp())
}
