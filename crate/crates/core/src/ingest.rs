//! Logger CSV import: long-format rows mapped onto declared sensors, plus a
//! raw point store that keeps accepted rows until they are preprocessed.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::RawSeries;
use crate::timeseries::{MarkerSeries, Timestamp};

#[derive(Debug, Error)]
pub enum ImportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("line {line}: unparseable timestamp `{text}` (expected RFC 3339 with an offset)")]
    UnparseableTimestamp { line: u64, text: String },
    #[error("invalid mapping: {0}")]
    BadMapping(String),
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingEntry {
    pub sensor: String,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default)]
    pub offset: f64,
}

/// Source point name → sensor, with a linear conversion `scale * v + offset`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImportMapping {
    pub entries: BTreeMap<String, MappingEntry>,
}

impl ImportMapping {
    pub fn from_json(text: &str) -> Result<Self, ImportError> {
        let m: ImportMapping = serde_json::from_str(text).map_err(|e| ImportError::BadMapping(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ImportError> {
        let text = fs::read_to_string(path).map_err(|source| ImportError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Identity mapping: each point name is its own sensor.
    pub fn identity<'a>(points: impl IntoIterator<Item = &'a str>) -> Self {
        let entries = points
            .into_iter()
            .map(|p| {
                (
                    p.to_string(),
                    MappingEntry {
                        sensor: p.to_string(),
                        scale: 1.0,
                        offset: 0.0,
                    },
                )
            })
            .collect();
        ImportMapping { entries }
    }

    pub fn validate(&self) -> Result<(), ImportError> {
        for (point, e) in &self.entries {
            if e.scale == 0.0 || !e.scale.is_finite() || !e.offset.is_finite() {
                return Err(ImportError::BadMapping(format!(
                    "point `{point}`: scale must be finite and non-zero, offset finite"
                )));
            }
            if e.sensor.is_empty() {
                return Err(ImportError::BadMapping(format!("point `{point}` maps to an empty sensor id")));
            }
        }
        Ok(())
    }

    /// Mapped sensor ids that `is_declared` does not know.
    pub fn undeclared(&self, is_declared: impl Fn(&str) -> bool) -> Vec<String> {
        let mut out: Vec<String> = self
            .entries
            .values()
            .filter(|e| !is_declared(&e.sensor))
            .map(|e| e.sensor.clone())
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowDiagnostic {
    pub line: u64,
    pub point: String,
    pub reason: String,
}

/// Outcome of one import. `accepted + rejected + skipped == total`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImportReport {
    pub file: String,
    pub total: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub skipped: usize,
    /// Unmapped point name → row count.
    pub skipped_points: BTreeMap<String, usize>,
    pub diagnostics: Vec<RowDiagnostic>,
}

pub fn parse_timestamp(text: &str) -> Option<Timestamp> {
    DateTime::parse_from_rfc3339(text.trim()).ok().map(|d| d.timestamp())
}

pub fn format_timestamp(t: Timestamp) -> String {
    DateTime::<Utc>::from_timestamp(t, 0)
        .map(|d| d.to_rfc3339_opts(SecondsFormat::Secs, true))
        .unwrap_or_else(|| t.to_string())
}

fn open(path: &Path) -> Result<fs::File, ImportError> {
    fs::File::open(path).map_err(|source| ImportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Iterates `(line, [timestamp, point, third])` records after checking the header.
fn records<R: Read>(
    reader: R,
    third: &str,
) -> Result<impl Iterator<Item = Result<(u64, csv::StringRecord), ImportError>>, ImportError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| ImportError::MalformedRow {
        line: 1,
        reason: e.to_string(),
    })?;
    let want = ["timestamp", "point", third];
    // a zero-byte file has no header and no rows
    let empty = header.is_empty();
    if (!empty && header.len() != 3) || header.iter().zip(want).any(|(h, w)| h.trim() != w) {
        return Err(ImportError::MalformedRow {
            line: 1,
            reason: format!("header must be `{}`", want.join(",")),
        });
    }
    Ok(rdr.into_records().take(if empty { 0 } else { usize::MAX }).map(|r| {
        let rec = r.map_err(|e| ImportError::MalformedRow {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        Ok((line, rec))
    }))
}

fn row_timestamp(line: u64, rec: &csv::StringRecord) -> Result<Timestamp, ImportError> {
    parse_timestamp(&rec[0]).ok_or_else(|| ImportError::UnparseableTimestamp {
        line,
        text: rec[0].to_string(),
    })
}

pub fn import_csv(path: &Path, mapping: &ImportMapping) -> Result<(Vec<RawSeries>, ImportReport), ImportError> {
    let (series, mut report) = import_csv_reader(open(path)?, mapping)?;
    report.file = path.display().to_string();
    Ok((series, report))
}

/// Reads `timestamp,point,value` rows. Malformed rows and bad timestamps
/// abort the import; rows that break per-sensor time order are rejected one
/// by one; unmapped points are skipped.
pub fn import_csv_reader<R: Read>(reader: R, mapping: &ImportMapping) -> Result<(Vec<RawSeries>, ImportReport), ImportError> {
    mapping.validate()?;
    let mut report = ImportReport::default();
    let mut points: BTreeMap<&str, Vec<(Timestamp, f64)>> = BTreeMap::new();
    for item in records(reader, "value")? {
        let (line, rec) = item?;
        report.total += 1;
        let t = row_timestamp(line, &rec)?;
        let point = rec[1].trim();
        let raw: f64 = rec[2].trim().parse().map_err(|_| ImportError::MalformedRow {
            line,
            reason: format!("value `{}` is not a number", &rec[2]),
        })?;
        if !raw.is_finite() {
            return Err(ImportError::MalformedRow {
                line,
                reason: format!("value `{}` is not finite", &rec[2]),
            });
        }
        let Some(entry) = mapping.entries.get(point) else {
            report.skipped += 1;
            *report.skipped_points.entry(point.to_string()).or_default() += 1;
            continue;
        };
        let pts = points.entry(entry.sensor.as_str()).or_default();
        let reject = |reason: String| RowDiagnostic {
            line,
            point: point.to_string(),
            reason,
        };
        let value = entry.scale * raw + entry.offset;
        if let Some(&(last, _)) = pts.last() {
            if t <= last {
                report.rejected += 1;
                report.diagnostics.push(reject(format!(
                    "timestamp {} does not follow {} for sensor `{}`",
                    format_timestamp(t),
                    format_timestamp(last),
                    entry.sensor
                )));
                continue;
            }
        }
        if !value.is_finite() {
            report.rejected += 1;
            report.diagnostics.push(reject("scaled value is not finite".into()));
            continue;
        }
        pts.push((t, value));
        report.accepted += 1;
    }
    let series = points
        .into_iter()
        .map(|(id, pts)| RawSeries {
            sensor_id: id.to_string(),
            points: pts,
        })
        .collect();
    Ok((series, report))
}

pub fn import_markers(path: &Path, mapping: &ImportMapping) -> Result<(Vec<MarkerSeries>, ImportReport), ImportError> {
    let (series, mut report) = import_markers_reader(open(path)?, mapping)?;
    report.file = path.display().to_string();
    Ok((series, report))
}

/// Reads `timestamp,point,label` rows into per-sensor marker series.
pub fn import_markers_reader<R: Read>(
    reader: R,
    mapping: &ImportMapping,
) -> Result<(Vec<MarkerSeries>, ImportReport), ImportError> {
    mapping.validate()?;
    let mut report = ImportReport::default();
    let mut out: BTreeMap<String, MarkerSeries> = BTreeMap::new();
    for item in records(reader, "label")? {
        let (line, rec) = item?;
        report.total += 1;
        let t = row_timestamp(line, &rec)?;
        let point = rec[1].trim();
        let Some(entry) = mapping.entries.get(point) else {
            report.skipped += 1;
            *report.skipped_points.entry(point.to_string()).or_default() += 1;
            continue;
        };
        let ms = out
            .entry(entry.sensor.clone())
            .or_insert_with(|| MarkerSeries::new(&entry.sensor));
        match ms.push(t, rec[2].trim()) {
            Ok(()) => report.accepted += 1,
            Err(e) => {
                report.rejected += 1;
                report.diagnostics.push(RowDiagnostic {
                    line,
                    point: point.to_string(),
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok((out.into_values().collect(), report))
}

/// Accepted raw points per sensor, kept as `raw/<sensor>.csv`.
///
/// Later imports merge into earlier ones; a point at an existing timestamp
/// replaces the stored value.
#[derive(Debug, Clone)]
pub struct RawStore {
    root: PathBuf,
}

impl RawStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RawStore { root: root.into() }
    }

    fn path(&self, sensor: &str) -> io::Result<PathBuf> {
        if sensor.is_empty() || sensor.starts_with('.') || sensor.contains(['/', '\\', '\0']) {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("invalid sensor id `{sensor}`")));
        }
        Ok(self.root.join("raw").join(format!("{sensor}.csv")))
    }

    pub fn sensors(&self) -> io::Result<Vec<String>> {
        let dir = self.root.join("raw");
        let rd = match fs::read_dir(&dir) {
            Ok(rd) => rd,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let mut out = Vec::new();
        for e in rd {
            let name = e?.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".csv") {
                out.push(id.to_string());
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn load_all(&self, sensor: &str) -> io::Result<RawSeries> {
        let path = self.path(sensor)?;
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e),
        };
        let corrupt = |line: usize| io::Error::new(io::ErrorKind::InvalidData, format!("{}:{line}: corrupt row", path.display()));
        let mut points = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let (t, v) = line.split_once(',').ok_or_else(|| corrupt(i + 1))?;
            let t: Timestamp = t.parse().map_err(|_| corrupt(i + 1))?;
            let v: f64 = v.parse().map_err(|_| corrupt(i + 1))?;
            points.push((t, v));
        }
        Ok(RawSeries {
            sensor_id: sensor.to_string(),
            points,
        })
    }

    /// Points with `from <= t < to`.
    pub fn load(&self, sensor: &str, from: Timestamp, to: Timestamp) -> io::Result<RawSeries> {
        let mut raw = self.load_all(sensor)?;
        raw.points.retain(|(t, _)| (from..to).contains(t));
        Ok(raw)
    }

    pub fn merge(&self, new: &RawSeries) -> io::Result<()> {
        if new.points.is_empty() {
            return Ok(());
        }
        let path = self.path(&new.sensor_id)?;
        let mut all: BTreeMap<Timestamp, f64> = self.load_all(&new.sensor_id)?.points.into_iter().collect();
        all.extend(new.points.iter().copied());
        let mut text = String::from("timestamp,value\n");
        for (t, v) in all {
            text.push_str(&format!("{t},{v}\n"));
        }
        fs::create_dir_all(path.parent().unwrap())?;
        let tmp = path.with_extension("csv.tmp");
        fs::write(&tmp, text)?;
        fs::rename(tmp, path)
    }

    /// Stores marker events as `markers/<sensor>.csv`, replacing earlier ones.
    pub fn write_markers(&self, markers: &MarkerSeries) -> io::Result<()> {
        self.path(&markers.sensor_id)?;
        let dir = self.root.join("markers");
        fs::create_dir_all(&dir)?;
        let mut existing: BTreeMap<Timestamp, String> = self
            .load_markers(&markers.sensor_id)?
            .events()
            .iter()
            .cloned()
            .collect();
        existing.extend(markers.events().iter().cloned());
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["timestamp", "label"])?;
        for (t, l) in existing {
            w.write_record([t.to_string(), l])?;
        }
        fs::write(dir.join(format!("{}.csv", markers.sensor_id)), w.into_inner().map_err(|e| e.into_error())?)
    }

    pub fn load_markers(&self, sensor: &str) -> io::Result<MarkerSeries> {
        self.path(sensor)?;
        let path = self.root.join("markers").join(format!("{sensor}.csv"));
        let mut ms = MarkerSeries::new(sensor);
        let file = match fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(ms),
            Err(e) => return Err(e),
        };
        for rec in csv::Reader::from_reader(file).into_records() {
            let rec = rec?;
            let bad = || io::Error::new(io::ErrorKind::InvalidData, format!("{}: corrupt marker row", path.display()));
            let t: Timestamp = rec.get(0).and_then(|t| t.parse().ok()).ok_or_else(bad)?;
            ms.push(t, rec.get(1).ok_or_else(bad)?).map_err(|_| bad())?;
        }
        Ok(ms)
    }

    /// Debug export of stored points as `timestamp,point,value` rows.
    pub fn export_csv(&self, sensor: &str, from: Timestamp, to: Timestamp) -> io::Result<String> {
        let raw = self.load(sensor, from, to)?;
        let mut out = String::from("timestamp,point,value\n");
        for (t, v) in raw.points {
            out.push_str(&format!("{},{sensor},{v}\n", format_timestamp(t)));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(json: &str) -> ImportMapping {
        ImportMapping::from_json(json).unwrap()
    }

    fn day_csv(point: &str) -> String {
        let mut s = String::from("timestamp,point,value\n");
        for i in 0..96 {
            s.push_str(&format!("{},{point},{}\n", format_timestamp(1_704_067_200 + i * 900), 20 + i % 3));
        }
        s
    }

    #[test]
    fn one_day_of_rows_gives_96_points() {
        let m = map(r#"{"P1": {"sensor": "ahu_supply"}}"#);
        let (series, report) = import_csv_reader(day_csv("P1").as_bytes(), &m).unwrap();
        assert_eq!(series.len(), 1);
        assert_eq!(series[0].sensor_id, "ahu_supply");
        assert_eq!(series[0].points.len(), 96);
        assert_eq!((report.total, report.accepted), (96, 96));
    }

    #[test]
    fn unmapped_points_are_skipped_and_counted() {
        let m = map(r#"{"P1": {"sensor": "a"}}"#);
        let csv = "timestamp,point,value\n2024-01-01T00:00:00Z,P1,1\n2024-01-01T00:00:00Z,X9,2\n2024-01-01T00:15:00Z,X9,3\n";
        let (series, report) = import_csv_reader(csv.as_bytes(), &m).unwrap();
        assert_eq!(series[0].points, vec![(1_704_067_200, 1.0)]);
        assert_eq!((report.accepted, report.skipped, report.rejected), (1, 2, 0));
        assert_eq!(report.skipped_points["X9"], 2);
    }

    #[test]
    fn scale_and_offset() {
        let m = map(r#"{"T": {"sensor": "t", "scale": 0.1}, "U": {"sensor": "u", "scale": 2, "offset": -1}}"#);
        let csv = "timestamp,point,value\n2024-01-01T01:00:00+01:00,T,215\n2024-01-01T00:00:00Z,U,3\n";
        let (series, _) = import_csv_reader(csv.as_bytes(), &m).unwrap();
        assert_eq!(series[0].points, vec![(1_704_067_200, 21.5)]);
        assert_eq!(series[1].points, vec![(1_704_067_200, 5.0)]);
    }

    #[test]
    fn bad_mappings_rejected() {
        assert!(ImportMapping::from_json(r#"{"T": {"sensor": "t", "scale": 0}}"#).is_err());
        assert!(ImportMapping::from_json(r#"{"T": {"sensor": "t", "bogus": 1}}"#).is_err());
        let m = map(r#"{"T": {"sensor": "t"}, "U": {"sensor": "zz"}}"#);
        assert_eq!(m.undeclared(|s| s == "t"), vec!["zz".to_string()]);
    }

    #[test]
    fn out_of_order_rows_rejected_individually() {
        let m = ImportMapping::identity(["a", "b"]);
        let csv = "timestamp,point,value\n\
                   2024-01-01T00:15:00Z,a,1\n\
                   2024-01-01T00:00:00Z,a,2\n\
                   2024-01-01T00:00:00Z,b,3\n\
                   2024-01-01T00:15:00Z,a,4\n\
                   2024-01-01T00:30:00Z,a,5\n";
        let (series, report) = import_csv_reader(csv.as_bytes(), &m).unwrap();
        assert_eq!(series[0].points, vec![(1_704_068_100, 1.0), (1_704_069_000, 5.0)]);
        assert_eq!(report.rejected, 2);
        assert_eq!(report.diagnostics.iter().map(|d| d.line).collect::<Vec<_>>(), vec![3, 5]);
    }

    #[test]
    fn fatal_errors_carry_line_numbers() {
        let m = ImportMapping::identity(["a"]);
        let e = import_csv_reader("timestamp,point,value\n2024-01-01T00:00:00Z,a,1\n2024-01-01 00:15,a,2\n".as_bytes(), &m)
            .unwrap_err();
        assert!(matches!(e, ImportError::UnparseableTimestamp { line: 3, .. }), "{e}");
        let e = import_csv_reader("timestamp,point,value\n2024-01-01T00:00:00Z,a\n".as_bytes(), &m).unwrap_err();
        assert!(matches!(e, ImportError::MalformedRow { line: 2, .. }), "{e}");
        let e = import_csv_reader("timestamp,point,value\n2024-01-01T00:00:00Z,a,abc\n".as_bytes(), &m).unwrap_err();
        assert!(matches!(e, ImportError::MalformedRow { line: 2, .. }), "{e}");
        let e = import_csv_reader("time,point,value\n".as_bytes(), &m).unwrap_err();
        assert!(matches!(e, ImportError::MalformedRow { line: 1, .. }), "{e}");
        // local time without offset is ambiguous across DST and refused
        let e = import_csv_reader("timestamp,point,value\n2024-01-01T00:00:00,a,1\n".as_bytes(), &m).unwrap_err();
        assert!(matches!(e, ImportError::UnparseableTimestamp { line: 2, .. }));
    }

    #[test]
    fn markers() {
        let m = ImportMapping::identity(["mode"]);
        let csv = "timestamp,point,label\n2024-01-01T06:00:00Z,mode,day\n2024-01-01T22:00:00Z,mode,night\n";
        let (ms, report) = import_markers_reader(csv.as_bytes(), &m).unwrap();
        assert_eq!(ms.len(), 1);
        assert_eq!(ms[0].events().len(), 2);
        assert_eq!(report.accepted, 2);

        let csv = "timestamp,point,label\n2024-01-01T06:00:00Z,mode,day\n2024-01-01T05:00:00Z,mode,night\n";
        let (ms, report) = import_markers_reader(csv.as_bytes(), &m).unwrap();
        assert_eq!(ms[0].events().len(), 1);
        assert_eq!(report.rejected, 1);
        assert_eq!(report.diagnostics[0].line, 3);

        let (ms, report) = import_markers_reader("timestamp,point,label\n".as_bytes(), &m).unwrap();
        assert!(ms.is_empty());
        assert_eq!(report.total, 0);
        let (ms, report) = import_markers_reader("".as_bytes(), &m).unwrap();
        assert!(ms.is_empty());
        assert_eq!(report.total, 0);
    }

    #[test]
    fn raw_store_merge_and_markers() {
        let dir = tempfile::tempdir().unwrap();
        let store = RawStore::new(dir.path());
        store.merge(&RawSeries::new("a", vec![(0, 1.0), (900, 2.0)]).unwrap()).unwrap();
        store.merge(&RawSeries::new("a", vec![(900, 3.5), (1800, 0.1)]).unwrap()).unwrap();
        assert_eq!(store.load_all("a").unwrap().points, vec![(0, 1.0), (900, 3.5), (1800, 0.1)]);
        assert_eq!(store.load("a", 900, 1800).unwrap().points, vec![(900, 3.5)]);
        assert_eq!(store.sensors().unwrap(), vec!["a"]);
        assert!(store.load_all("missing").unwrap().points.is_empty());
        assert!(store.merge(&RawSeries::new("../x", vec![(0, 1.0)]).unwrap()).is_err());

        let mut ms = MarkerSeries::new("mode");
        ms.push(10, "day, with comma").unwrap();
        store.write_markers(&ms).unwrap();
        assert_eq!(store.load_markers("mode").unwrap(), ms);
    }

    proptest! {
        #[test]
        fn conservation_and_export_identity(
            rows in proptest::collection::vec((0i64..200, 0usize..4, -1e6f64..1e6), 0..120)
        ) {
            let names = ["a", "b", "c", "unmapped"];
            let mapping = ImportMapping::identity(names[..3].iter().copied());
            let mut csv = String::from("timestamp,point,value\n");
            for (t, p, v) in &rows {
                csv.push_str(&format!("{},{},{v}\n", format_timestamp(1_704_067_200 + t * 60), names[*p]));
            }
            let (series, report) = import_csv_reader(csv.as_bytes(), &mapping).unwrap();
            prop_assert_eq!(report.accepted + report.rejected + report.skipped, rows.len());
            prop_assert_eq!(report.total, rows.len());

            let dir = tempfile::tempdir().unwrap();
            let store = RawStore::new(dir.path());
            for s in &series {
                store.merge(s).unwrap();
            }
            // export the accepted rows and import them again: nothing changes
            for s in &series {
                let text = store.export_csv(&s.sensor_id, i64::MIN, i64::MAX).unwrap();
                let (back, r) = import_csv_reader(text.as_bytes(), &mapping).unwrap();
                prop_assert_eq!(r.accepted, s.points.len());
                prop_assert_eq!(&back[0], s);
            }
        }
    }
}
