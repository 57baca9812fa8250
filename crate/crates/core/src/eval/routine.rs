//! Time-routine membership in local civil time.

use chrono::{Datelike, TimeZone, Timelike};
use chrono_tz::Tz;

use super::{BoolValue, EvalError};
use crate::lang::{Field, FieldPattern, SpecModel, TimeRoutineDecl};
use crate::timeseries::{Series, SeriesKind, TimeGrid, Timestamp};

/// Calendar fields of an instant in a time zone. Weekday is Mon = 1 .. Sun = 7.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CivilTime {
    pub year: u32,
    pub month: u32,
    pub day: u32,
    pub hour: u32,
    pub minute: u32,
    pub second: u32,
    pub weekday: u32,
}

impl CivilTime {
    pub fn at(t: Timestamp, tz: Tz) -> Self {
        let dt = tz.timestamp_opt(t, 0).single().expect("UTC instants map to one local time");
        CivilTime {
            year: dt.year().max(0) as u32,
            month: dt.month(),
            day: dt.day(),
            hour: dt.hour(),
            minute: dt.minute(),
            second: dt.second(),
            weekday: dt.weekday().number_from_monday(),
        }
    }

    pub fn field(&self, f: Field) -> u32 {
        match f {
            Field::Year => self.year,
            Field::Month => self.month,
            Field::Day => self.day,
            Field::Hour => self.hour,
            Field::Minute => self.minute,
            Field::Second => self.second,
            Field::Weekday => self.weekday,
        }
    }
}

fn pattern_matches(p: &FieldPattern, c: &CivilTime) -> bool {
    p.constraints
        .iter()
        .all(|k| k.values.iter().any(|span| span.contains(c.field(k.field))))
}

/// Whether `c` falls in one of the routine's own ranges (ignoring includes
/// and excludes).
pub fn routine_matches(tr: &TimeRoutineDecl, c: &CivilTime) -> bool {
    tr.ranges.iter().any(|p| pattern_matches(p, c))
}

fn member(model: &SpecModel, tr: &TimeRoutineDecl, civil: &[CivilTime]) -> Vec<bool> {
    let mut out: Vec<bool> = civil.iter().map(|c| routine_matches(tr, c)).collect();
    for inc in &tr.includes {
        if let Some(sub) = model.time_routine(inc) {
            for (o, m) in out.iter_mut().zip(member(model, sub, civil)) {
                *o |= m;
            }
        }
    }
    for exc in &tr.excludes {
        if let Some(sub) = model.time_routine(exc) {
            for (o, m) in out.iter_mut().zip(member(model, sub, civil)) {
                *o &= !m;
            }
        }
    }
    out
}

pub(super) fn membership(model: &SpecModel, name: &str, grid: TimeGrid, tz: Tz) -> Vec<bool> {
    let Some(tr) = model.time_routine(name) else {
        return vec![false; grid.count()];
    };
    let civil: Vec<CivilTime> = grid.timestamps().map(|t| CivilTime::at(t, tz)).collect();
    member(model, tr, &civil)
}

/// Two-valued membership series of the routine `name` over `grid`:
/// own ranges or any include, minus any exclude.
pub fn eval_timeroutine(model: &SpecModel, name: &str, grid: TimeGrid, tz: Tz) -> Result<Series, EvalError> {
    if model.time_routine(name).is_none() {
        return Err(EvalError::Unbound(name.to_string()));
    }
    let samples = membership(model, name, grid, tz)
        .into_iter()
        .map(|b| BoolValue::from_bool(b).to_sample())
        .collect();
    Ok(Series {
        sensor_id: format!("routine:{name}"),
        grid,
        samples,
        kind: SeriesKind::Boolean,
    })
}
