//! File-backed series store, one chunk file per sensor per UTC calendar month.
//!
//! Chunk layout (little-endian):
//!
//! ```text
//! "ENAV1" | u8 kind | u16 id_len | id bytes | u32 period | i64 chunk_start | u32 count
//! count × { f64 value | u8 quality }
//! ```
//!
//! Files live at `data/<sensor_id>/<YYYY-MM>.ens` below the store root.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{Datelike, TimeZone, Utc};
use thiserror::Error;

use super::{Quality, Sample, Series, SeriesKind, TimeGrid, Timestamp};

const MAGIC: &[u8; 5] = b"ENAV1";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("sensor `{sensor}` is stored with period {stored} s (alignment {stored_start}), cannot write period {written} s starting {written_start}")]
    GridMismatch {
        sensor: String,
        stored: i64,
        stored_start: Timestamp,
        written: i64,
        written_start: Timestamp,
    },
    #[error("sensor `{sensor}` is stored as {stored:?}, cannot write {written:?}")]
    KindMismatch {
        sensor: String,
        stored: SeriesKind,
        written: SeriesKind,
    },
    #[error("unknown sensor `{0}`")]
    UnknownSensor(String),
    #[error("invalid sensor id `{0}`")]
    InvalidSensorId(String),
    #[error("sensor `{0}` is locked by another writer")]
    Locked(String),
    #[error("corrupt chunk {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone)]
struct Chunk {
    kind: SeriesKind,
    period: i64,
    start: Timestamp,
    samples: Vec<Sample>,
}

#[derive(Debug, Clone, Copy)]
struct Header {
    kind: SeriesKind,
    period: i64,
    start: Timestamp,
}

/// Removes the lock file when dropped.
struct SensorLock {
    path: PathBuf,
}

impl Drop for SensorLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Store { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    fn sensor_dir(&self, sensor_id: &str) -> Result<PathBuf, StoreError> {
        if sensor_id.is_empty()
            || sensor_id.starts_with('.')
            || sensor_id.contains(['/', '\\', '\0'])
        {
            return Err(StoreError::InvalidSensorId(sensor_id.to_string()));
        }
        Ok(self.data_dir().join(sensor_id))
    }

    /// Sensor ids with at least one chunk, sorted.
    pub fn sensors(&self) -> Result<Vec<String>, StoreError> {
        let dir = self.data_dir();
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            if entry.path().is_dir() {
                if let Some(name) = entry.file_name().to_str() {
                    if !self.chunk_files(name)?.is_empty() {
                        out.push(name.to_string());
                    }
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Declared period and alignment anchor of a stored sensor.
    pub fn sensor_grid(&self, sensor_id: &str) -> Result<(i64, Timestamp, SeriesKind), StoreError> {
        let files = self.chunk_files(sensor_id)?;
        let first = files
            .first()
            .ok_or_else(|| StoreError::UnknownSensor(sensor_id.to_string()))?;
        let h = read_header(first)?;
        Ok((h.period, h.start, h.kind))
    }

    fn chunk_files(&self, sensor_id: &str) -> Result<Vec<PathBuf>, StoreError> {
        let dir = self.sensor_dir(sensor_id)?;
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut files = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            if path.extension().is_some_and(|e| e == "ens") {
                files.push(path);
            }
        }
        files.sort();
        Ok(files)
    }

    fn lock(&self, sensor_id: &str) -> Result<SensorLock, StoreError> {
        let dir = self.sensor_dir(sensor_id)?;
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(SensorLock { path }),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                Err(StoreError::Locked(sensor_id.to_string()))
            }
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    /// Persists `series`, replacing overlapped samples and extending chunks as needed.
    pub fn write(&self, series: &Series) -> Result<(), StoreError> {
        let _lock = self.lock(&series.sensor_id)?;
        let grid = series.grid;
        if let Some(first) = self.chunk_files(&series.sensor_id)?.first() {
            let h = read_header(first)?;
            if h.kind != series.kind {
                return Err(StoreError::KindMismatch {
                    sensor: series.sensor_id.clone(),
                    stored: h.kind,
                    written: series.kind,
                });
            }
            if h.period != grid.period() || (grid.start() - h.start).rem_euclid(h.period) != 0 {
                return Err(StoreError::GridMismatch {
                    sensor: series.sensor_id.clone(),
                    stored: h.period,
                    stored_start: h.start,
                    written: grid.period(),
                    written_start: grid.start(),
                });
            }
        }
        let dir = self.sensor_dir(&series.sensor_id)?;
        let mut i = 0;
        while i < series.len() {
            let (month_start, month_end) = month_bounds(grid.timestamp(i));
            let mut j = i;
            while j < series.len() && grid.timestamp(j) < month_end {
                j += 1;
            }
            let path = dir.join(chunk_name(month_start));
            let new_start = grid.timestamp(i);
            let merged = if path.exists() {
                let mut old = read_chunk(&path)?;
                let start = old.start.min(new_start);
                let old_end = old.start + old.samples.len() as i64 * old.period;
                let end = old_end.max(grid.timestamp(j - 1) + grid.period());
                let count = ((end - start) / grid.period()) as usize;
                let mut samples = vec![Sample::MISSING; count];
                let off = ((old.start - start) / grid.period()) as usize;
                samples[off..off + old.samples.len()].copy_from_slice(&old.samples);
                let off = ((new_start - start) / grid.period()) as usize;
                samples[off..off + (j - i)].copy_from_slice(&series.samples[i..j]);
                old.start = start;
                old.samples = samples;
                old
            } else {
                Chunk {
                    kind: series.kind,
                    period: grid.period(),
                    start: new_start,
                    samples: series.samples[i..j].to_vec(),
                }
            };
            write_chunk(&path, &series.sensor_id, &merged)?;
            i = j;
        }
        Ok(())
    }

    /// Loads the sensor over `[from, to)`; slots with nothing persisted are MISSING.
    pub fn load(&self, sensor_id: &str, from: Timestamp, to: Timestamp) -> Result<Series, StoreError> {
        let (period, anchor, kind) = self.sensor_grid(sensor_id)?;
        let grid = if to <= from {
            TimeGrid::new(from - (from - anchor).rem_euclid(period), period, 0)
        } else {
            let start = from - (from - anchor).rem_euclid(period);
            TimeGrid::new(start, period, ((to - start + period - 1) / period) as usize)
        }
        .expect("stored period is positive");
        let mut samples = vec![Sample::MISSING; grid.count()];
        if grid.count() > 0 {
            let dir = self.sensor_dir(sensor_id)?;
            let mut month = month_bounds(grid.start()).0;
            while month < grid.end() {
                let path = dir.join(chunk_name(month));
                if path.exists() {
                    let chunk = read_chunk(&path)?;
                    for (k, s) in chunk.samples.iter().enumerate() {
                        let t = chunk.start + k as i64 * chunk.period;
                        if let Some(idx) = grid.index_of(t) {
                            samples[idx] = *s;
                        }
                    }
                }
                month = month_bounds(month).1;
            }
        }
        Ok(Series {
            sensor_id: sensor_id.to_string(),
            grid,
            samples,
            kind,
        })
    }

    /// Deletes every stored sensor below this root.
    pub fn clear(&self) -> Result<(), StoreError> {
        let dir = self.data_dir();
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        Ok(())
    }
}

fn month_bounds(t: Timestamp) -> (Timestamp, Timestamp) {
    let dt = Utc.timestamp_opt(t, 0).single().expect("timestamp in range");
    let start = Utc
        .with_ymd_and_hms(dt.year(), dt.month(), 1, 0, 0, 0)
        .unwrap();
    let (ny, nm) = if dt.month() == 12 {
        (dt.year() + 1, 1)
    } else {
        (dt.year(), dt.month() + 1)
    };
    let end = Utc.with_ymd_and_hms(ny, nm, 1, 0, 0, 0).unwrap();
    (start.timestamp(), end.timestamp())
}

fn chunk_name(month_start: Timestamp) -> String {
    let dt = Utc.timestamp_opt(month_start, 0).unwrap();
    format!("{:04}-{:02}.ens", dt.year(), dt.month())
}

fn write_chunk(path: &Path, sensor_id: &str, chunk: &Chunk) -> Result<(), StoreError> {
    let id = sensor_id.as_bytes();
    let mut buf = Vec::with_capacity(32 + id.len() + chunk.samples.len() * 9);
    buf.extend_from_slice(MAGIC);
    buf.push(chunk.kind.to_byte());
    buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
    buf.extend_from_slice(id);
    buf.extend_from_slice(&(chunk.period as u32).to_le_bytes());
    buf.extend_from_slice(&chunk.start.to_le_bytes());
    buf.extend_from_slice(&(chunk.samples.len() as u32).to_le_bytes());
    for s in &chunk.samples {
        let v = if s.is_valid() { s.value } else { f64::NAN };
        buf.extend_from_slice(&v.to_le_bytes());
        buf.push(s.quality.to_byte());
    }
    let tmp = path.with_extension("ens.tmp");
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&buf).map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        if self.pos + n > self.buf.len() {
            return Err(StoreError::Corrupt {
                path: self.path.to_path_buf(),
                reason: "truncated".into(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], StoreError> {
        Ok(self.take(N)?.try_into().unwrap())
    }
}

fn parse_header<'a>(cur: &mut Cursor<'a>) -> Result<Header, StoreError> {
    let corrupt = |reason: &str| StoreError::Corrupt {
        path: cur.path.to_path_buf(),
        reason: reason.to_string(),
    };
    if cur.take(5)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let kind = SeriesKind::from_byte(cur.take(1)?[0]).ok_or_else(|| corrupt("bad kind byte"))?;
    let id_len = u16::from_le_bytes(cur.array()?) as usize;
    cur.take(id_len)?;
    let period = u32::from_le_bytes(cur.array()?) as i64;
    if period == 0 {
        return Err(corrupt("zero period"));
    }
    let start = i64::from_le_bytes(cur.array()?);
    Ok(Header {
        kind,
        period,
        start,
    })
}

fn read_header(path: &Path) -> Result<Header, StoreError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut buf = Vec::with_capacity(256);
    f.take(5 + 1 + 2 + u16::MAX as u64 + 4 + 8)
        .read_to_end(&mut buf)
        .map_err(io_err(path))?;
    parse_header(&mut Cursor { buf: &buf, pos: 0, path })
}

fn read_chunk(path: &Path) -> Result<Chunk, StoreError> {
    let buf = fs::read(path).map_err(io_err(path))?;
    let mut cur = Cursor { buf: &buf, pos: 0, path };
    let h = parse_header(&mut cur)?;
    let count = u32::from_le_bytes(cur.array()?) as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let value = f64::from_le_bytes(cur.array()?);
        let quality = Quality::from_byte(cur.take(1)?[0]).ok_or_else(|| StoreError::Corrupt {
            path: path.to_path_buf(),
            reason: "bad quality byte".into(),
        })?;
        samples.push(Sample { value, quality });
    }
    Ok(Chunk {
        kind: h.kind,
        period: h.period,
        start: h.start,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeseries::make_grid;
    use proptest::prelude::*;

    const JAN1: Timestamp = 1_293_840_000; // 2011-01-01T00:00:00Z
    const DAY: Timestamp = 86_400;

    fn day_series(id: &str, start: Timestamp, base: f64) -> Series {
        let g = make_grid(start, start + DAY, 900).unwrap();
        let vals: Vec<f64> = (0..96).map(|i| base + i as f64 * 0.25).collect();
        Series::from_values(id, g, &vals).unwrap()
    }

    #[test]
    fn round_trip_one_day() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path());
        let s = day_series("t_out", JAN1, 1.0);
        store.write(&s).unwrap();
        let back = store.load("t_out", JAN1, JAN1 + DAY).unwrap();
        assert_eq!(back, s);
        assert!(dir.path().join("data/t_out/2011-01.ens").exists());
    }

    #[test]
    fn chunk_bytes_follow_layout() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path());
        let g = TimeGrid::new(JAN1, 900, 2).unwrap();
        let s = Series::new("ab", g, vec![Sample::valid(1.5), Sample::MISSING], SeriesKind::Numeric).unwrap();
        store.write(&s).unwrap();
        let bytes = fs::read(dir.path().join("data/ab/2011-01.ens")).unwrap();
        let mut expect = b"ENAV1".to_vec();
        expect.push(0);
        expect.extend_from_slice(&2u16.to_le_bytes());
        expect.extend_from_slice(b"ab");
        expect.extend_from_slice(&900u32.to_le_bytes());
        expect.extend_from_slice(&JAN1.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.5f64.to_le_bytes());
        expect.push(0);
        expect.extend_from_slice(&f64::NAN.to_le_bytes());
        expect.push(1);
        assert_eq!(bytes, expect);
    }

    #[test]
    fn consecutive_days_concatenate() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path());
        let d1 = day_series("s", JAN1, 0.0);
        let d2 = day_series("s", JAN1 + DAY, 100.0);
        store.write(&d1).unwrap();
        store.write(&d2).unwrap();
        let back = store.load("s", JAN1, JAN1 + 2 * DAY).unwrap();
        assert_eq!(back.len(), 192);
        let expected: Vec<Sample> = d1.samples.iter().chain(d2.samples.iter()).copied().collect();
        assert_eq!(back.samples, expected);
    }

    #[test]
    fn period_change_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path());
        let g = make_grid(JAN1, JAN1 + DAY, 3600).unwrap();
        store.write(&Series::missing("s", g, SeriesKind::Numeric)).unwrap();
        let err = store.write(&day_series("s", JAN1, 0.0)).unwrap_err();
        assert!(matches!(err, StoreError::GridMismatch { stored: 3600, written: 900, .. }));
    }

    #[test]
    fn untouched_month_is_missing() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path());
        store.write(&day_series("s", JAN1, 0.0)).unwrap();
        let march = 1_298_937_600; // 2011-03-01
        let back = store.load("s", march, march + 31 * DAY).unwrap();
        assert_eq!(back.len(), 31 * 96);
        assert!(back.samples.iter().all(|s| s.quality == Quality::Missing));
    }

    #[test]
    fn half_overlapping_load() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path());
        let s = day_series("s", JAN1, 0.0);
        store.write(&s).unwrap();
        let back = store.load("s", JAN1 + DAY / 2, JAN1 + DAY + DAY / 2).unwrap();
        for (t, sample) in back.iter() {
            let persisted = t < JAN1 + DAY;
            assert_eq!(sample.is_valid(), persisted, "at {t}");
            if persisted {
                assert_eq!(sample, &s.samples[((t - JAN1) / 900) as usize]);
            }
        }
    }

    #[test]
    fn overwrite_replaces_overlap_only() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path());
        store.write(&day_series("s", JAN1, 0.0)).unwrap();
        let g = TimeGrid::new(JAN1 + 10 * 900, 900, 2).unwrap();
        store.write(&Series::from_values("s", g, &[-1.0, -2.0]).unwrap()).unwrap();
        let back = store.load("s", JAN1, JAN1 + DAY).unwrap();
        assert_eq!(back.samples[9].value, 9.0 * 0.25);
        assert_eq!(back.samples[10].value, -1.0);
        assert_eq!(back.samples[11].value, -2.0);
        assert_eq!(back.samples[12].value, 12.0 * 0.25);
    }

    #[test]
    fn month_boundary_splits_chunks() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path());
        let jan31 = JAN1 + 30 * DAY;
        let g = make_grid(jan31, jan31 + 2 * DAY, 900).unwrap();
        let s = Series::from_values("s", g, &vec![3.0; 192]).unwrap();
        store.write(&s).unwrap();
        assert!(dir.path().join("data/s/2011-01.ens").exists());
        assert!(dir.path().join("data/s/2011-02.ens").exists());
        assert_eq!(store.load("s", jan31, jan31 + 2 * DAY).unwrap(), s);
    }

    #[test]
    fn unknown_sensor_and_lock() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path());
        assert!(matches!(store.load("nope", 0, 10), Err(StoreError::UnknownSensor(_))));
        let lock = store.lock("s").unwrap();
        assert!(matches!(store.write(&day_series("s", JAN1, 0.0)), Err(StoreError::Locked(_))));
        drop(lock);
        store.write(&day_series("s", JAN1, 0.0)).unwrap();
        assert_eq!(store.sensors().unwrap(), vec!["s".to_string()]);
        assert!(matches!(store.load("../x", 0, 1), Err(StoreError::InvalidSensorId(_))));
    }

    fn arb_sample() -> impl Strategy<Value = Sample> {
        prop_oneof![
            3 => (-1e6f64..1e6).prop_map(Sample::valid),
            1 => Just(Sample::MISSING),
            1 => Just(Sample::UNDEFINED),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn store_round_trip(offset in 0i64..(80 * 96), samples in proptest::collection::vec(arb_sample(), 0..6000)) {
            let dir = tempfile::tempdir().unwrap();
            let store = Store::new(dir.path());
            let g = TimeGrid::new(JAN1 + offset * 900, 900, samples.len()).unwrap();
            let s = Series::new("p", g, samples, SeriesKind::Numeric).unwrap();
            store.write(&s).unwrap();
            if !s.is_empty() {
                let back = store.load("p", g.start(), g.end()).unwrap();
                prop_assert_eq!(back, s);
            }
        }
    }
}
