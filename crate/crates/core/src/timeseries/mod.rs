//! Equidistant time grids and sample series.
//!
//! Every real and virtual sensor is carried as a [`Series`]: a vector of
//! [`Sample`]s laid out on a [`TimeGrid`]. Timestamps are UTC epoch seconds.

mod store;

pub use store::{Store, StoreError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// UTC epoch seconds.
pub type Timestamp = i64;

/// Default sampling interval: 15 minutes.
pub const DEFAULT_PERIOD: i64 = 900;

const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GridError {
    #[error("period must be positive, got {0} s")]
    NonPositivePeriod(i64),
    #[error("end {end} lies before start {start}")]
    EndBeforeStart { start: Timestamp, end: Timestamp },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeGrid {
    start: Timestamp,
    period: i64,
    count: usize,
}

impl TimeGrid {
    pub fn new(start: Timestamp, period: i64, count: usize) -> Result<Self, GridError> {
        if period <= 0 {
            return Err(GridError::NonPositivePeriod(period));
        }
        Ok(Self {
            start,
            period,
            count,
        })
    }

    pub fn start(&self) -> Timestamp {
        self.start
    }

    pub fn period(&self) -> i64 {
        self.period
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Exclusive end: the timestamp one period after the last slot.
    pub fn end(&self) -> Timestamp {
        self.start + self.count as i64 * self.period
    }

    pub fn timestamp(&self, index: usize) -> Timestamp {
        self.start + index as i64 * self.period
    }

    pub fn timestamps(&self) -> impl ExactSizeIterator<Item = Timestamp> + '_ {
        (0..self.count).map(move |i| self.timestamp(i))
    }

    pub fn last(&self) -> Option<Timestamp> {
        self.count.checked_sub(1).map(|i| self.timestamp(i))
    }

    /// Index of the slot exactly at `t`, if `t` lies on the grid.
    pub fn index_of(&self, t: Timestamp) -> Option<usize> {
        let offset = t - self.start;
        if offset < 0 || offset % self.period != 0 {
            return None;
        }
        let i = (offset / self.period) as usize;
        (i < self.count).then_some(i)
    }

    /// True when both grids have the same period and their slots coincide.
    pub fn is_aligned_with(&self, other: &TimeGrid) -> bool {
        self.period == other.period && (self.start - other.start).rem_euclid(self.period) == 0
    }
}

/// Builds the grid covering `[start, end)`.
///
/// When the period divides a day the start is snapped down to a multiple of
/// the period, so that grids are anchored at UTC midnight.
pub fn make_grid(start: Timestamp, end: Timestamp, period: i64) -> Result<TimeGrid, GridError> {
    if period <= 0 {
        return Err(GridError::NonPositivePeriod(period));
    }
    if end < start {
        return Err(GridError::EndBeforeStart { start, end });
    }
    if end == start {
        return TimeGrid::new(start, period, 0);
    }
    let anchored = if SECONDS_PER_DAY % period == 0 {
        start - start.rem_euclid(period)
    } else {
        start
    };
    let span = end - anchored;
    let count = (span + period - 1) / period;
    TimeGrid::new(anchored, period, count as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Quality {
    Valid,
    Missing,
    Undefined,
}

impl Quality {
    pub fn to_byte(self) -> u8 {
        match self {
            Quality::Valid => 0,
            Quality::Missing => 1,
            Quality::Undefined => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Quality::Valid),
            1 => Some(Quality::Missing),
            2 => Some(Quality::Undefined),
            _ => None,
        }
    }
}

/// One grid slot. Non-VALID samples store NaN as their value.
#[derive(Debug, Clone, Copy)]
pub struct Sample {
    pub value: f64,
    pub quality: Quality,
}

impl Sample {
    pub const MISSING: Sample = Sample {
        value: f64::NAN,
        quality: Quality::Missing,
    };
    pub const UNDEFINED: Sample = Sample {
        value: f64::NAN,
        quality: Quality::Undefined,
    };

    pub fn valid(value: f64) -> Self {
        Sample {
            value,
            quality: Quality::Valid,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.quality == Quality::Valid
    }

    /// The value when VALID.
    pub fn get(&self) -> Option<f64> {
        self.is_valid().then_some(self.value)
    }
}

// Values of non-VALID samples are ignored, so NaN never breaks equality.
impl PartialEq for Sample {
    fn eq(&self, other: &Self) -> bool {
        self.quality == other.quality
            && (self.quality != Quality::Valid || self.value.to_bits() == other.value.to_bits())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SeriesKind {
    Numeric,
    Boolean,
}

impl SeriesKind {
    pub fn to_byte(self) -> u8 {
        match self {
            SeriesKind::Numeric => 0,
            SeriesKind::Boolean => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(SeriesKind::Numeric),
            1 => Some(SeriesKind::Boolean),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SeriesError {
    #[error("series `{sensor}` has {found} samples but its grid has {expected} slots")]
    LengthMismatch {
        sensor: String,
        expected: usize,
        found: usize,
    },
    #[error("boolean series `{sensor}` holds non-boolean value {value} at slot {index}")]
    NotBoolean {
        sensor: String,
        index: usize,
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub sensor_id: String,
    pub grid: TimeGrid,
    pub samples: Vec<Sample>,
    pub kind: SeriesKind,
}

impl Series {
    pub fn new(
        sensor_id: impl Into<String>,
        grid: TimeGrid,
        samples: Vec<Sample>,
        kind: SeriesKind,
    ) -> Result<Self, SeriesError> {
        let sensor_id = sensor_id.into();
        if samples.len() != grid.count() {
            return Err(SeriesError::LengthMismatch {
                sensor: sensor_id,
                expected: grid.count(),
                found: samples.len(),
            });
        }
        if kind == SeriesKind::Boolean {
            if let Some((index, s)) = samples
                .iter()
                .enumerate()
                .find(|(_, s)| s.is_valid() && s.value != 0.0 && s.value != 1.0)
            {
                return Err(SeriesError::NotBoolean {
                    sensor: sensor_id,
                    index,
                    value: s.value,
                });
            }
        }
        Ok(Series {
            sensor_id,
            grid,
            samples,
            kind,
        })
    }

    pub fn missing(sensor_id: impl Into<String>, grid: TimeGrid, kind: SeriesKind) -> Self {
        Series {
            sensor_id: sensor_id.into(),
            grid,
            samples: vec![Sample::MISSING; grid.count()],
            kind,
        }
    }

    /// Numeric series with every sample VALID.
    pub fn from_values(sensor_id: impl Into<String>, grid: TimeGrid, values: &[f64]) -> Result<Self, SeriesError> {
        Series::new(
            sensor_id,
            grid,
            values.iter().copied().map(Sample::valid).collect(),
            SeriesKind::Numeric,
        )
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Timestamp, &Sample)> {
        self.grid.timestamps().zip(self.samples.iter())
    }

    pub fn valid_count(&self) -> usize {
        self.samples.iter().filter(|s| s.is_valid()).count()
    }

    /// Sub-series over the slots of `self` falling in `[from, to)`.
    pub fn slice(&self, from: Timestamp, to: Timestamp) -> Series {
        let p = self.grid.period();
        let first = ((from - self.grid.start()).max(0) + p - 1) / p;
        let first = (first as usize).min(self.len());
        let last = if to <= self.grid.start() {
            0
        } else {
            (((to - self.grid.start()) + p - 1) / p) as usize
        };
        let last = last.clamp(first, self.len());
        Series {
            sensor_id: self.sensor_id.clone(),
            grid: TimeGrid {
                start: self.grid.timestamp(first),
                period: p,
                count: last - first,
            },
            samples: self.samples[first..last].to_vec(),
            kind: self.kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("marker events for `{sensor}` are not strictly increasing at {timestamp}")]
pub struct MarkerOrderError {
    pub sensor: String,
    pub timestamp: Timestamp,
}

/// Mode markers logged by the building management system.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerSeries {
    pub sensor_id: String,
    events: Vec<(Timestamp, String)>,
}

impl MarkerSeries {
    pub fn new(sensor_id: impl Into<String>) -> Self {
        MarkerSeries {
            sensor_id: sensor_id.into(),
            events: Vec::new(),
        }
    }

    pub fn push(&mut self, t: Timestamp, label: impl Into<String>) -> Result<(), MarkerOrderError> {
        if let Some(&(last, _)) = self.events.last() {
            if t <= last {
                return Err(MarkerOrderError {
                    sensor: self.sensor_id.clone(),
                    timestamp: t,
                });
            }
        }
        self.events.push((t, label.into()));
        Ok(())
    }

    pub fn events(&self) -> &[(Timestamp, String)] {
        &self.events
    }

    /// The mode in force at `t`: the label of the latest event at or before it.
    pub fn mode_at(&self, t: Timestamp) -> Option<&str> {
        let idx = self.events.partition_point(|(ts, _)| *ts <= t);
        idx.checked_sub(1).map(|i| self.events[i].1.as_str())
    }

    /// Two-valued series: TRUE where the mode in force equals `label`.
    pub fn mode_membership(&self, label: &str, grid: TimeGrid) -> Series {
        let samples = grid
            .timestamps()
            .map(|t| Sample::valid(if self.mode_at(t) == Some(label) { 1.0 } else { 0.0 }))
            .collect();
        Series {
            sensor_id: format!("marker:{}:{}", self.sensor_id, label),
            grid,
            samples,
            kind: SeriesKind::Boolean,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};

    fn ts(y: i32, mo: u32, d: u32, h: u32, mi: u32) -> Timestamp {
        Utc.with_ymd_and_hms(y, mo, d, h, mi, 0).unwrap().timestamp()
    }

    #[test]
    fn one_day_at_quarter_hour_has_96_slots() {
        let g = make_grid(ts(2011, 1, 1, 0, 0), ts(2011, 1, 2, 0, 0), 900).unwrap();
        assert_eq!(g.count(), 96);
        assert_eq!(g.start(), ts(2011, 1, 1, 0, 0));
    }

    #[test]
    fn empty_range_gives_empty_grid() {
        let t = ts(2011, 1, 1, 0, 7);
        assert_eq!(make_grid(t, t, 900).unwrap().count(), 0);
    }

    #[test]
    fn unaligned_start_snaps_down() {
        // Oracle: enumerate multiples of 900 that cover [00:07, 01:00).
        let (from, to) = (ts(2011, 1, 1, 0, 7), ts(2011, 1, 1, 1, 0));
        let covering: Vec<i64> = (0..)
            .map(|k| ts(2011, 1, 1, 0, 0) - 900 + k * 900)
            .take_while(|&t| t < to)
            .filter(|&t| t + 900 > from)
            .collect();
        let g = make_grid(from, to, 900).unwrap();
        assert_eq!(g.start(), covering[0]);
        assert_eq!(g.count(), covering.len());
        assert_eq!(g.start(), ts(2011, 1, 1, 0, 0));
        assert_eq!(g.count(), 4);
    }

    #[test]
    fn period_not_dividing_day_keeps_start() {
        let g = make_grid(7, 7 + 7 * 10, 7 * 1000 + 1).unwrap();
        assert_eq!(g.start(), 7);
        assert_eq!(g.count(), 1);
    }

    #[test]
    fn grid_errors() {
        assert_eq!(make_grid(0, 10, 0), Err(GridError::NonPositivePeriod(0)));
        assert_eq!(
            make_grid(10, 0, 900),
            Err(GridError::EndBeforeStart { start: 10, end: 0 })
        );
    }

    #[test]
    fn capacity_matches_quarter_hour_volume() {
        let day = make_grid(0, SECONDS_PER_DAY, DEFAULT_PERIOD).unwrap().count();
        assert_eq!(1000 * day, 96_000);
        let year = make_grid(0, 365 * SECONDS_PER_DAY, DEFAULT_PERIOD).unwrap().count();
        assert_eq!(year, 35_040);
        assert_eq!(1000 * year, 35_040_000);
    }

    #[test]
    fn boolean_series_rejects_other_values() {
        let g = TimeGrid::new(0, 900, 2).unwrap();
        let err = Series::new("b", g, vec![Sample::valid(1.0), Sample::valid(0.5)], SeriesKind::Boolean);
        assert!(matches!(err, Err(SeriesError::NotBoolean { index: 1, .. })));
    }

    #[test]
    fn slice_selects_slots_in_range() {
        let g = TimeGrid::new(0, 10, 10).unwrap();
        let s = Series::from_values("x", g, &(0..10).map(f64::from).collect::<Vec<_>>()).unwrap();
        let sub = s.slice(25, 61);
        assert_eq!(sub.grid.start(), 30);
        assert_eq!(sub.samples.iter().map(|s| s.value).collect::<Vec<_>>(), vec![3.0, 4.0, 5.0, 6.0]);
        assert!(s.slice(200, 300).is_empty());
    }

    #[test]
    fn marker_modes() {
        let mut m = MarkerSeries::new("bms");
        m.push(100, "day").unwrap();
        m.push(200, "night").unwrap();
        assert!(m.push(200, "x").is_err());
        assert_eq!(m.mode_at(50), None);
        assert_eq!(m.mode_at(150), Some("day"));
        assert_eq!(m.mode_at(200), Some("night"));
        let g = TimeGrid::new(0, 100, 4).unwrap();
        let s = m.mode_membership("day", g);
        assert_eq!(s.samples.iter().map(|s| s.value).collect::<Vec<_>>(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    proptest::proptest! {
        #[test]
        fn grid_steps_are_uniform(start in -1_000_000i64..1_000_000, len in 0i64..200_000, period in 1i64..5000) {
            let g = make_grid(start, start + len, period).unwrap();
            for i in 1..g.count() {
                proptest::prop_assert_eq!(g.timestamp(i) - g.timestamp(i - 1), period);
            }
            if len > 0 {
                proptest::prop_assert!(g.start() <= start);
                proptest::prop_assert!(g.end() >= start + len);
                proptest::prop_assert!(g.end() - period < start + len);
            }
        }
    }
}
