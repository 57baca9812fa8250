//! Raw logger points to clean equidistant series: resample onto the grid,
//! reject outliers with a Hampel filter, interpolate short gaps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timeseries::{Quality, Sample, Series, SeriesKind, TimeGrid, Timestamp};

/// Gaussian consistency constant for the median absolute deviation.
const MAD_SCALE: f64 = 1.4826;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PreprocessError {
    #[error("series `{0}` is boolean; outlier filtering and interpolation need numeric data")]
    KindMismatch(String),
    #[error("outlier window must be odd and at least 3, got {0}")]
    BadWindow(usize),
    #[error("outlier factor must be positive, got {0}")]
    BadFactor(f64),
    #[error("raw points of `{sensor}` are not strictly increasing at {timestamp}")]
    Unordered { sensor: String, timestamp: Timestamp },
}

/// Irregular pre-grid points as read from a logger export.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RawSeries {
    pub sensor_id: String,
    pub points: Vec<(Timestamp, f64)>,
}

impl RawSeries {
    pub fn new(sensor_id: impl Into<String>, points: Vec<(Timestamp, f64)>) -> Result<Self, PreprocessError> {
        let sensor_id = sensor_id.into();
        if let Some(w) = points.windows(2).find(|w| w[1].0 <= w[0].0) {
            return Err(PreprocessError::Unordered {
                sensor: sensor_id,
                timestamp: w[1].0,
            });
        }
        Ok(RawSeries { sensor_id, points })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub period: i64,
    /// Defaults to half the period when absent.
    pub snap_halfwidth: Option<i64>,
    pub outlier_window: usize,
    pub outlier_k: f64,
    pub max_interp_gap: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            period: crate::timeseries::DEFAULT_PERIOD,
            snap_halfwidth: None,
            outlier_window: 13,
            outlier_k: 3.0,
            max_interp_gap: 4,
        }
    }
}

impl PreprocessConfig {
    pub fn halfwidth(&self) -> i64 {
        self.snap_halfwidth.unwrap_or(self.period / 2)
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.outlier_window < 3 || self.outlier_window.is_multiple_of(2) {
            return Err(PreprocessError::BadWindow(self.outlier_window));
        }
        if !(self.outlier_k > 0.0) {
            return Err(PreprocessError::BadFactor(self.outlier_k));
        }
        Ok(())
    }
}

/// One sample removed by the outlier filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub index: usize,
    pub timestamp: Timestamp,
    pub value: f64,
    pub median: f64,
    pub mad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub sensor_id: String,
    pub snapped: usize,
    pub rejected: usize,
    pub interpolated: usize,
    pub first_timestamp: Option<Timestamp>,
    pub last_timestamp: Option<Timestamp>,
    #[serde(skip)]
    pub rejections: Vec<Rejection>,
}

/// Places raw points on `grid`.
///
/// Each point goes to its nearest grid slot (the earlier slot on an exact
/// tie) if it lies within `snap_halfwidth` of it; a slot with several
/// candidates keeps the nearest, the earlier one on a tie. Returns the
/// series and the number of points that moved to a different timestamp.
pub fn resample(raw: &RawSeries, grid: TimeGrid, snap_halfwidth: i64) -> (Series, usize) {
    let mut samples = vec![Sample::MISSING; grid.count()];
    let mut best: Vec<Option<(i64, Timestamp)>> = vec![None; grid.count()];
    if grid.count() > 0 {
        let p = grid.period();
        for &(t, v) in &raw.points {
            let off = t - grid.start();
            let lower = off.div_euclid(p);
            let rem = off.rem_euclid(p);
            // strictly past the midpoint goes up, ties stay down
            let k = if 2 * rem > p { lower + 1 } else { lower };
            let k = k.clamp(0, grid.count() as i64 - 1) as usize;
            let dist = (t - grid.timestamp(k)).abs();
            if dist > snap_halfwidth {
                continue;
            }
            match best[k] {
                Some((d, _)) if d <= dist => {}
                _ => {
                    best[k] = Some((dist, t));
                    samples[k] = Sample::valid(v);
                }
            }
        }
    }
    let snapped = best.iter().flatten().filter(|(d, _)| *d != 0).count();
    let series = Series {
        sensor_id: raw.sensor_id.clone(),
        grid,
        samples,
        kind: SeriesKind::Numeric,
    };
    (series, snapped)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Hampel filter over VALID samples in a centered window truncated at the
/// edges. Rejected samples become MISSING.
pub fn filter_outliers(series: &Series, window: usize, k: f64) -> Result<(Series, Vec<Rejection>), PreprocessError> {
    if series.kind != SeriesKind::Numeric {
        return Err(PreprocessError::KindMismatch(series.sensor_id.clone()));
    }
    if window < 3 || window.is_multiple_of(2) {
        return Err(PreprocessError::BadWindow(window));
    }
    if !(k > 0.0) {
        return Err(PreprocessError::BadFactor(k));
    }
    let half = window / 2;
    let n = series.len();
    let mut out = series.clone();
    let mut rejections = Vec::new();
    let mut buf = Vec::with_capacity(window);
    let mut dev = Vec::with_capacity(window);
    for i in 0..n {
        let Some(x) = series.samples[i].get() else {
            continue;
        };
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        buf.clear();
        buf.extend(series.samples[lo..hi].iter().filter_map(Sample::get));
        buf.sort_by(f64::total_cmp);
        let m = median(&buf);
        dev.clear();
        dev.extend(buf.iter().map(|v| (v - m).abs()));
        dev.sort_by(f64::total_cmp);
        let mad = median(&dev);
        if mad > 0.0 && (x - m).abs() > k * MAD_SCALE * mad {
            out.samples[i] = Sample::MISSING;
            rejections.push(Rejection {
                index: i,
                timestamp: series.grid.timestamp(i),
                value: x,
                median: m,
                mad,
            });
        }
    }
    Ok((out, rejections))
}

/// Linear interpolation across interior MISSING runs of at most `max_gap`
/// slots. Returns the series and the number of filled slots.
pub fn interpolate_gaps(series: &Series, max_gap: usize) -> Result<(Series, usize), PreprocessError> {
    if series.kind != SeriesKind::Numeric {
        return Err(PreprocessError::KindMismatch(series.sensor_id.clone()));
    }
    let mut out = series.clone();
    let mut filled = 0;
    let s = &series.samples;
    let mut i = 0;
    while i < s.len() {
        if s[i].quality != Quality::Missing {
            i += 1;
            continue;
        }
        let run_start = i;
        while i < s.len() && s[i].quality == Quality::Missing {
            i += 1;
        }
        let len = i - run_start;
        if len > max_gap || run_start == 0 || i == s.len() {
            continue;
        }
        let (Some(left), Some(right)) = (s[run_start - 1].get(), s[i].get()) else {
            continue;
        };
        let span = (len + 1) as f64;
        for (step, slot) in out.samples[run_start..i].iter_mut().enumerate() {
            let frac = (step + 1) as f64 / span;
            *slot = Sample::valid(left + (right - left) * frac);
        }
        filled += len;
    }
    Ok((out, filled))
}

/// Full pipeline: resample, then outlier rejection, then gap interpolation.
pub fn preprocess(raw: &RawSeries, grid: TimeGrid, config: &PreprocessConfig) -> Result<(Series, PreprocessReport), PreprocessError> {
    config.validate()?;
    let (resampled, snapped) = resample(raw, grid, config.halfwidth());
    let (filtered, rejections) = filter_outliers(&resampled, config.outlier_window, config.outlier_k)?;
    let (series, interpolated) = interpolate_gaps(&filtered, config.max_interp_gap)?;
    let report = PreprocessReport {
        sensor_id: raw.sensor_id.clone(),
        snapped,
        rejected: rejections.len(),
        interpolated,
        first_timestamp: raw.points.first().map(|p| p.0),
        last_timestamp: raw.points.last().map(|p| p.0),
        rejections,
    };
    Ok((series, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(0, 900, n).unwrap()
    }

    fn numeric(vals: &[Option<f64>]) -> Series {
        Series {
            sensor_id: "s".into(),
            grid: grid(vals.len()),
            samples: vals
                .iter()
                .map(|v| v.map_or(Sample::MISSING, Sample::valid))
                .collect(),
            kind: SeriesKind::Numeric,
        }
    }

    fn values(s: &Series) -> Vec<Option<f64>> {
        s.samples.iter().map(Sample::get).collect()
    }

    #[test]
    fn on_grid_raw_is_identity() {
        let raw = RawSeries::new("s", (0..8).map(|i| (i * 900, i as f64)).collect()).unwrap();
        let (s, snapped) = resample(&raw, grid(8), 450);
        assert_eq!(snapped, 0);
        assert_eq!(values(&s), (0..8).map(|i| Some(i as f64)).collect::<Vec<_>>());
    }

    #[test]
    fn point_snaps_to_nearest_slot() {
        let raw = RawSeries::new("s", vec![(360, 7.0)]).unwrap();
        let (s, snapped) = resample(&raw, grid(2), 450);
        assert_eq!(values(&s), vec![Some(7.0), None]);
        assert_eq!(snapped, 1);
    }

    #[test]
    fn close_points_split_across_slots() {
        // 00:06 is nearest to 00:00, 00:08 is nearest to 00:15.
        let raw = RawSeries::new("s", vec![(360, 1.0), (480, 2.0)]).unwrap();
        let (s, _) = resample(&raw, grid(2), 450);
        assert_eq!(values(&s), vec![Some(1.0), Some(2.0)]);
    }

    #[test]
    fn slot_keeps_nearest_and_earlier_on_tie() {
        let raw = RawSeries::new("s", vec![(-100, 1.0), (100, 2.0), (850, 3.0), (950, 4.0)]).unwrap();
        let (s, _) = resample(&raw, grid(2), 450);
        assert_eq!(values(&s), vec![Some(1.0), Some(3.0)]);
    }

    #[test]
    fn midpoint_goes_to_earlier_slot() {
        let raw = RawSeries::new("s", vec![(450, 1.0)]).unwrap();
        let (s, _) = resample(&raw, grid(2), 450);
        assert_eq!(values(&s), vec![Some(1.0), None]);
    }

    #[test]
    fn empty_raw_is_all_missing() {
        let (s, snapped) = resample(&RawSeries::default(), grid(5), 450);
        assert_eq!(snapped, 0);
        assert!(s.samples.iter().all(|s| !s.is_valid()));
    }

    #[test]
    fn constant_series_is_not_filtered() {
        let s = numeric(&[Some(4.0); 20]);
        let (out, rej) = filter_outliers(&s, 13, 3.0).unwrap();
        assert!(rej.is_empty());
        assert_eq!(out, s);
    }

    #[test]
    fn zero_mad_suppresses_rejection() {
        // Deviations from the median 10 are 0,1,0,90,0,1,0: their median is 0.
        let s = numeric(&[10., 11., 10., 100., 10., 11., 10.].map(Some));
        let (out, rej) = filter_outliers(&s, 7, 3.0).unwrap();
        assert!(rej.is_empty());
        assert_eq!(out, s);
    }

    #[test]
    fn spike_with_spread_is_rejected() {
        // Median 11, deviations 1,0,1,89,1,0,1 -> MAD 1; 89 > 3 * 1.4826.
        let s = numeric(&[10., 11., 12., 100., 10., 11., 12.].map(Some));
        let (out, rej) = filter_outliers(&s, 7, 3.0).unwrap();
        assert_eq!(rej.len(), 1);
        assert_eq!(rej[0].index, 3);
        assert_eq!(rej[0].median, 11.0);
        assert_eq!(rej[0].mad, 1.0);
        assert_eq!(values(&out)[3], None);
        assert_eq!(values(&out).iter().flatten().count(), 6);
    }

    #[test]
    fn all_missing_unchanged_and_boolean_rejected() {
        let s = numeric(&[None; 9]);
        assert_eq!(filter_outliers(&s, 3, 3.0).unwrap().0, s);
        let mut b = s.clone();
        b.kind = SeriesKind::Boolean;
        assert!(matches!(filter_outliers(&b, 3, 3.0), Err(PreprocessError::KindMismatch(_))));
        assert!(matches!(interpolate_gaps(&b, 3), Err(PreprocessError::KindMismatch(_))));
        assert!(matches!(filter_outliers(&s, 4, 3.0), Err(PreprocessError::BadWindow(4))));
    }

    #[test]
    fn interpolation_cases() {
        let (out, n) = interpolate_gaps(&numeric(&[Some(1.0), None, Some(3.0)]), 1).unwrap();
        assert_eq!(values(&out), vec![Some(1.0), Some(2.0), Some(3.0)]);
        assert_eq!(n, 1);

        let long = numeric(&[Some(1.0), None, None, None, None, None, Some(3.0)]);
        assert_eq!(interpolate_gaps(&long, 4).unwrap().0, long);

        let (out, _) = interpolate_gaps(&numeric(&[Some(0.0), None, None, Some(3.0)]), 4).unwrap();
        assert_eq!(values(&out), vec![Some(0.0), Some(1.0), Some(2.0), Some(3.0)]);

        let edge = numeric(&[None, Some(1.0), None]);
        assert_eq!(interpolate_gaps(&edge, 4).unwrap().0, edge);
    }

    #[test]
    fn pipeline_on_clean_data_is_identity() {
        let raw = RawSeries::new("s", (0..30).map(|i| (i * 900, (i % 5) as f64)).collect()).unwrap();
        let (s, report) = preprocess(&raw, grid(30), &PreprocessConfig::default()).unwrap();
        assert_eq!(values(&s), (0..30).map(|i| Some((i % 5) as f64)).collect::<Vec<_>>());
        assert_eq!((report.snapped, report.rejected, report.interpolated), (0, 0, 0));
    }

    #[test]
    fn pipeline_spike_and_gap() {
        let mut pts: Vec<(i64, f64)> = (0..30).map(|i| (i * 900, 20.0 + (i % 3) as f64)).collect();
        pts[10].1 = 500.0;
        pts.remove(20);
        let raw = RawSeries::new("s", pts).unwrap();
        let (s, report) = preprocess(&raw, grid(30), &PreprocessConfig::default()).unwrap();
        assert_eq!(report.rejected, 1);
        assert_eq!(report.interpolated, 2);
        assert!(s.samples.iter().all(Sample::is_valid));
        assert!(s.samples[10].value < 25.0);
    }

    #[test]
    fn pipeline_empty_raw() {
        let (s, report) = preprocess(&RawSeries::default(), grid(10), &PreprocessConfig::default()).unwrap();
        assert_eq!(s.valid_count(), 0);
        assert_eq!((report.snapped, report.rejected, report.interpolated), (0, 0, 0));
    }

    fn arb_raw() -> impl Strategy<Value = RawSeries> {
        proptest::collection::btree_map(-1000i64..60_000, -50.0f64..50.0, 0..80)
            .prop_map(|m| RawSeries::new("s", m.into_iter().collect()).unwrap())
    }

    proptest! {
        #[test]
        fn resample_never_invents_values(raw in arb_raw(), hw in 0i64..900) {
            let (s, _) = resample(&raw, grid(64), hw);
            for v in s.samples.iter().filter_map(Sample::get) {
                prop_assert!(raw.points.iter().any(|p| p.1.to_bits() == v.to_bits()));
            }
        }

        #[test]
        fn stages_keep_grid(raw in arb_raw()) {
            let g = grid(64);
            let (r, _) = resample(&raw, g, 450);
            let (f, _) = filter_outliers(&r, 5, 2.0).unwrap();
            let (i, _) = interpolate_gaps(&f, 3).unwrap();
            prop_assert_eq!(f.grid, g);
            prop_assert_eq!(i.grid, g);
            // no short interior MISSING run survives
            let q: Vec<bool> = i.samples.iter().map(Sample::is_valid).collect();
            let mut k = 0;
            while k < q.len() {
                if q[k] { k += 1; continue; }
                let st = k;
                while k < q.len() && !q[k] { k += 1; }
                prop_assert!(st == 0 || k == q.len() || k - st > 3);
            }
        }

        #[test]
        fn preprocess_is_idempotent_without_outliers(raw in arb_raw()) {
            let cfg = PreprocessConfig::default();
            let g = grid(64);
            let (out, _) = preprocess(&raw, g, &cfg).unwrap();
            let (_, again_rej) = filter_outliers(&out, cfg.outlier_window, cfg.outlier_k).unwrap();
            prop_assume!(again_rej.is_empty());
            let as_raw = RawSeries::new("s", out.iter().filter_map(|(t, s)| s.get().map(|v| (t, v))).collect()).unwrap();
            let (again, _) = preprocess(&as_raw, g, &cfg).unwrap();
            prop_assert_eq!(again, out);
        }
    }
}
