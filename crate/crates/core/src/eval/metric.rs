//! Calendar-bucketed aggregates.

use chrono::{Datelike, Duration, NaiveDate, TimeZone};
use chrono_tz::Tz;
use serde::Serialize;

use super::EvalError;
use crate::lang::{Aggregate, MetricDecl, Quantization};
use crate::timeseries::{Series, Timestamp};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricBucket {
    pub start: Timestamp,
    pub end: Timestamp,
    /// `None` when coverage is below the threshold or the aggregate has no value.
    pub value: Option<f64>,
    pub coverage: f64,
    pub valid: usize,
    pub expected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSeries {
    pub metric_id: String,
    pub buckets: Vec<MetricBucket>,
}

impl MetricSeries {
    /// CSV with local RFC 3339 bucket bounds; MISSING values are empty fields.
    pub fn to_csv(&self, tz: Tz) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["bucket_start", "bucket_end", "value", "coverage"]).unwrap();
        let ts = |t: Timestamp| tz.timestamp_opt(t, 0).unwrap().to_rfc3339();
        for b in &self.buckets {
            w.write_record([
                ts(b.start),
                ts(b.end),
                b.value.map(|v| v.to_string()).unwrap_or_default(),
                b.coverage.to_string(),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

/// First day of the calendar bucket containing `d`. Weeks start on Monday.
fn bucket_floor(d: NaiveDate, q: Quantization) -> NaiveDate {
    match q {
        Quantization::Day => d,
        Quantization::Week => d - Duration::days(i64::from(d.weekday().num_days_from_monday())),
        Quantization::Month => d.with_day(1).unwrap(),
        Quantization::Quarter => NaiveDate::from_ymd_opt(d.year(), (d.month() - 1) / 3 * 3 + 1, 1).unwrap(),
        Quantization::Year => NaiveDate::from_ymd_opt(d.year(), 1, 1).unwrap(),
    }
}

fn bucket_next(d: NaiveDate, q: Quantization) -> NaiveDate {
    let add_months = |n: u32| {
        let m0 = d.month0() + n;
        NaiveDate::from_ymd_opt(d.year() + (m0 / 12) as i32, m0 % 12 + 1, 1).unwrap()
    };
    match q {
        Quantization::Day => d + Duration::days(1),
        Quantization::Week => d + Duration::days(7),
        Quantization::Month => add_months(1),
        Quantization::Quarter => add_months(3),
        Quantization::Year => NaiveDate::from_ymd_opt(d.year() + 1, 1, 1).unwrap(),
    }
}

/// UTC instant of local midnight on `d`. Where midnight falls into a DST gap
/// the day starts at the first existing local time.
fn local_midnight(d: NaiveDate, tz: Tz) -> Timestamp {
    let mut t = d.and_hms_opt(0, 0, 0).unwrap();
    loop {
        if let Some(dt) = tz.from_local_datetime(&t).earliest() {
            return dt.timestamp();
        }
        t += Duration::minutes(15);
    }
}

/// UTC bounds of the tz-local calendar bucket containing `t`.
pub fn bucket_span(t: Timestamp, q: Quantization, tz: Tz) -> (Timestamp, Timestamp) {
    let day = bucket_floor(tz.timestamp_opt(t, 0).unwrap().date_naive(), q);
    (local_midnight(day, tz), local_midnight(bucket_next(day, q), tz))
}

fn ceil_div(x: i64, p: i64) -> i64 {
    -((-x).div_euclid(p))
}

/// Aggregates `series` over tz-local calendar buckets clipped to `[from, to)`.
///
/// Coverage is VALID samples over the grid slots the bucket spans; a bucket
/// below `m.coverage` (or `default_coverage`) has no value.
pub fn eval_metric(
    metric_id: &str,
    m: &MetricDecl,
    series: &Series,
    from: Timestamp,
    to: Timestamp,
    tz: Tz,
    default_coverage: f64,
) -> Result<MetricSeries, EvalError> {
    if from >= to {
        return Err(EvalError::EmptyRange);
    }
    let agg = Aggregate::from_name(&m.aggregate).ok_or_else(|| EvalError::NotEvaluable(m.aggregate.clone()))?;
    let threshold = m.coverage.unwrap_or(default_coverage);
    let anchor = series.grid.start();
    let period = series.grid.period();

    let mut day = bucket_floor(tz.timestamp_opt(from, 0).unwrap().date_naive(), m.quantization);
    let mut buckets = Vec::new();
    let mut vals = Vec::new();
    loop {
        let next = bucket_next(day, m.quantization);
        let (b_start, b_end) = (local_midnight(day, tz), local_midnight(next, tz));
        let (lo, hi) = (b_start.max(from), b_end.min(to));
        if lo >= to {
            break;
        }
        if lo < hi {
            let k0 = ceil_div(lo - anchor, period);
            let k1 = ceil_div(hi - anchor, period);
            vals.clear();
            for k in k0..k1 {
                if let Some(v) = usize::try_from(k).ok().and_then(|i| series.samples.get(i)).and_then(|s| s.get()) {
                    vals.push(v);
                }
            }
            let expected = (k1 - k0).max(0) as usize;
            let coverage = if expected == 0 {
                0.0
            } else {
                vals.len() as f64 / expected as f64
            };
            let value = if coverage < threshold { None } else { aggregate(agg, &vals) };
            buckets.push(MetricBucket {
                start: lo,
                end: hi,
                value,
                coverage,
                valid: vals.len(),
                expected,
            });
        }
        day = next;
    }
    Ok(MetricSeries {
        metric_id: metric_id.to_string(),
        buckets,
    })
}

fn aggregate(agg: Aggregate, v: &[f64]) -> Option<f64> {
    let n = v.len() as f64;
    match agg {
        Aggregate::Sum => Some(v.iter().sum()),
        Aggregate::Count => Some(n),
        _ if v.is_empty() => None,
        Aggregate::Average => Some(v.iter().sum::<f64>() / n),
        Aggregate::Minimum => v.iter().copied().reduce(f64::min),
        Aggregate::Maximum => v.iter().copied().reduce(f64::max),
        Aggregate::StdDev => {
            if v.len() < 2 {
                return None;
            }
            let mean = v.iter().sum::<f64>() / n;
            Some((v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
        }
    }
}
