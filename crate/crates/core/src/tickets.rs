//! Rule violations as persistent tickets.
//!
//! A violation is a maximal run of FALSE samples. Tickets live in an
//! append-only JSON-lines log replayed last-writer-wins by id; every state
//! transition also goes to an outbox log for notification dispatch.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, SecondsFormat, TimeZone, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::BoolValue;
use crate::timeseries::{Series, SeriesKind, TimeGrid, Timestamp};

pub const DEFAULT_MIN_STEPS: usize = 4;

#[derive(Debug, Error)]
pub enum TicketError {
    #[error("series `{0}` is not a boolean rule series")]
    KindMismatch(String),
    #[error("min_steps must be at least 1")]
    BadMinSteps,
    #[error("ticket store {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("ticket store {path}:{line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error("no ticket with id `{0}`")]
    UnknownTicket(String),
}

/// Inclusive interval of consecutive FALSE samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub start: Timestamp,
    pub end: Timestamp,
    pub steps: usize,
}

/// Maximal FALSE runs of at least `min_steps` samples. MISSING and
/// UNDEFINED break runs without counting as violations.
pub fn scan_violations(series: &Series, min_steps: usize) -> Result<Vec<Violation>, TicketError> {
    if series.kind != SeriesKind::Boolean {
        return Err(TicketError::KindMismatch(series.sensor_id.clone()));
    }
    if min_steps == 0 {
        return Err(TicketError::BadMinSteps);
    }
    let g = series.grid;
    let mut out = Vec::new();
    let mut run_start: Option<usize> = None;
    for i in 0..=series.len() {
        let is_false = i < series.len() && BoolValue::from_sample(series.samples[i]) == BoolValue::False;
        match (is_false, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(s)) => {
                if i - s >= min_steps {
                    out.push(Violation {
                        start: g.timestamp(s),
                        end: g.timestamp(i - 1),
                        steps: i - s,
                    });
                }
                run_start = None;
            }
            _ => {}
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TicketState {
    Open,
    Extended,
    Closed,
    Acknowledged,
}

pub(crate) mod iso {
    use super::*;

    pub fn serialize<S: Serializer>(t: &Timestamp, s: S) -> Result<S::Ok, S::Error> {
        let dt = DateTime::<Utc>::from_timestamp(*t, 0).ok_or_else(|| serde::ser::Error::custom("timestamp out of range"))?;
        s.serialize_str(&dt.to_rfc3339_opts(SecondsFormat::Secs, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Timestamp, D::Error> {
        let s = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&s)
            .map(|dt| dt.timestamp())
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ticket {
    pub id: String,
    pub rule_id: String,
    /// Formal → sensor for applied rules; empty otherwise.
    pub binding: BTreeMap<String, String>,
    #[serde(with = "iso")]
    pub start: Timestamp,
    #[serde(with = "iso")]
    pub end: Timestamp,
    pub period: i64,
    pub step_count: usize,
    pub state: TicketState,
    /// Data time of the evaluation that created the ticket.
    #[serde(with = "iso")]
    pub created: Timestamp,
    /// Data time of the evaluation that last changed it.
    #[serde(with = "iso")]
    pub updated: Timestamp,
    pub message: String,
}

impl Ticket {
    pub fn is_active(&self) -> bool {
        matches!(self.state, TicketState::Open | TicketState::Extended)
    }
}

/// Stable id: a hash of the rule id and the interval start.
pub fn ticket_id(rule_id: &str, start: Timestamp) -> String {
    let digest = Sha256::digest(format!("{rule_id}|{start}").as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutboxEvent {
    pub ticket_id: String,
    pub rule_id: String,
    pub transition: TicketState,
    #[serde(with = "iso")]
    pub at: Timestamp,
    #[serde(with = "iso")]
    pub start: Timestamp,
    #[serde(with = "iso")]
    pub end: Timestamp,
}

/// One evaluated rule, with what the ticket message needs.
pub struct RuleRun<'a> {
    pub rule_id: &'a str,
    pub binding: BTreeMap<String, String>,
    pub grid: TimeGrid,
    /// Input series whose values are quoted in new ticket messages.
    pub inputs: &'a [Series],
}

impl RuleRun<'_> {
    fn message(&self, v: &Violation) -> String {
        let mut msg = format!(
            "rule `{}` evaluated FALSE from {} to {} ({} steps)",
            self.rule_id,
            crate::ingest::format_timestamp(v.start),
            crate::ingest::format_timestamp(v.end),
            v.steps
        );
        let values: Vec<String> = self
            .inputs
            .iter()
            .filter_map(|s| {
                let i = s.grid.index_of(v.start)?;
                let shown = match s.samples[i].get() {
                    Some(x) => format!("{x}"),
                    None => format!("{:?}", s.samples[i].quality).to_uppercase(),
                };
                Some(format!("{}={shown}", s.sensor_id))
            })
            .collect();
        if !values.is_empty() {
            msg.push_str("; at first violation: ");
            msg.push_str(&values.join(", "));
        }
        msg
    }
}

/// The `tickets/` directory of a workspace.
#[derive(Debug, Clone)]
pub struct TicketStore {
    dir: PathBuf,
}

impl TicketStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        TicketStore { dir: dir.into() }
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("tickets.jsonl")
    }

    pub fn outbox_path(&self) -> PathBuf {
        self.dir.join("outbox.jsonl")
    }

    fn io(&self, path: &Path) -> impl FnOnce(io::Error) -> TicketError + '_ {
        let path = path.to_path_buf();
        move |source| TicketError::Io { path, source }
    }

    /// Current tickets by id, replaying the log.
    pub fn load(&self) -> Result<BTreeMap<String, Ticket>, TicketError> {
        let path = self.log_path();
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
            Err(e) => return Err(self.io(&path)(e)),
        };
        let mut out = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let t: Ticket = serde_json::from_str(line).map_err(|e| TicketError::Corrupt {
                path: path.clone(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            out.insert(t.id.clone(), t);
        }
        Ok(out)
    }

    fn append<T: Serialize>(&self, path: &Path, items: &[T]) -> Result<(), TicketError> {
        if items.is_empty() {
            return Ok(());
        }
        fs::create_dir_all(&self.dir).map_err(self.io(&self.dir))?;
        let mut buf = String::new();
        for it in items {
            buf.push_str(&serde_json::to_string(it).expect("tickets serialize"));
            buf.push('\n');
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(self.io(path))?;
        f.write_all(buf.as_bytes()).map_err(self.io(path))
    }

    fn commit(&self, changed: &[Ticket], events: &[OutboxEvent]) -> Result<(), TicketError> {
        self.append(&self.log_path(), changed)?;
        self.append(&self.outbox_path(), events)
    }

    /// Merges fresh violations of one rule into the store.
    ///
    /// A violation touching (overlapping or directly following) a ticket of
    /// the same rule extends it; otherwise it opens a new ticket. Open
    /// tickets ending more than one step before the last evaluated slot are
    /// closed. Re-running on unchanged data writes nothing. Returns the
    /// rule's tickets after the update.
    pub fn upsert(&self, run: &RuleRun, violations: &[Violation]) -> Result<Vec<Ticket>, TicketError> {
        let mut all = self.load()?;
        let Some(now) = run.grid.last() else {
            return Ok(rule_tickets(all, run.rule_id));
        };
        let p = run.grid.period();
        let mut changed: BTreeMap<String, Ticket> = BTreeMap::new();
        let mut events = Vec::new();
        let event = |t: &Ticket, transition| OutboxEvent {
            ticket_id: t.id.clone(),
            rule_id: t.rule_id.clone(),
            transition,
            at: now,
            start: t.start,
            end: t.end,
        };

        for v in violations {
            let touching = all
                .values()
                .filter(|t| t.rule_id == run.rule_id && t.start <= v.end + p && v.start <= t.end + p)
                .min_by_key(|t| t.start)
                .map(|t| t.id.clone());
            match touching {
                Some(id) => {
                    let t = all.get_mut(&id).unwrap();
                    let (start, end) = (t.start.min(v.start), t.end.max(v.end));
                    if (start, end) != (t.start, t.end) {
                        t.start = start;
                        t.end = end;
                        t.step_count = ((end - start) / t.period) as usize + 1;
                        t.updated = now;
                        if t.state != TicketState::Acknowledged {
                            t.state = TicketState::Extended;
                        }
                        events.push(event(t, TicketState::Extended));
                        changed.insert(id, t.clone());
                    }
                }
                None => {
                    let t = Ticket {
                        id: ticket_id(run.rule_id, v.start),
                        rule_id: run.rule_id.to_string(),
                        binding: run.binding.clone(),
                        start: v.start,
                        end: v.end,
                        period: p,
                        step_count: v.steps,
                        state: TicketState::Open,
                        created: now,
                        updated: now,
                        message: run.message(v),
                    };
                    events.push(event(&t, TicketState::Open));
                    changed.insert(t.id.clone(), t.clone());
                    all.insert(t.id.clone(), t);
                }
            }
        }

        for t in all.values_mut() {
            if t.rule_id == run.rule_id && t.is_active() && now - t.end > p {
                t.state = TicketState::Closed;
                t.updated = now;
                events.push(event(t, TicketState::Closed));
                changed.insert(t.id.clone(), t.clone());
            }
        }

        self.commit(&changed.into_values().collect::<Vec<_>>(), &events)?;
        Ok(rule_tickets(all, run.rule_id))
    }

    /// Marks a ticket as acknowledged by facility management.
    pub fn acknowledge(&self, id: &str, at: Timestamp) -> Result<Ticket, TicketError> {
        let mut all = self.load()?;
        let t = all.get_mut(id).ok_or_else(|| TicketError::UnknownTicket(id.to_string()))?;
        if t.state == TicketState::Acknowledged {
            return Ok(t.clone());
        }
        t.state = TicketState::Acknowledged;
        t.updated = at;
        let ev = OutboxEvent {
            ticket_id: t.id.clone(),
            rule_id: t.rule_id.clone(),
            transition: TicketState::Acknowledged,
            at,
            start: t.start,
            end: t.end,
        };
        self.commit(std::slice::from_ref(t), &[ev])?;
        Ok(t.clone())
    }
}

fn rule_tickets(all: BTreeMap<String, Ticket>, rule_id: &str) -> Vec<Ticket> {
    let mut v: Vec<Ticket> = all.into_values().filter(|t| t.rule_id == rule_id).collect();
    v.sort_by_key(|t| t.start);
    v
}

pub fn upsert_tickets(store: &TicketStore, run: &RuleRun, violations: &[Violation]) -> Result<Vec<Ticket>, TicketError> {
    store.upsert(run, violations)
}

/// Truth-value counts of one rule for one local calendar day.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyQuality {
    pub day: NaiveDate,
    pub true_count: usize,
    pub false_count: usize,
    pub missing_count: usize,
    pub undefined_count: usize,
}

impl DailyQuality {
    pub fn total(&self) -> usize {
        self.true_count + self.false_count + self.missing_count + self.undefined_count
    }
}

/// Per-day counts of a rule series, so data gaps stay visible even though
/// they never open tickets.
pub fn daily_quality(series: &Series, tz: Tz) -> Vec<DailyQuality> {
    let mut days: BTreeMap<NaiveDate, DailyQuality> = BTreeMap::new();
    for (t, s) in series.iter() {
        let day = tz.timestamp_opt(t, 0).unwrap().date_naive();
        let d = days.entry(day).or_insert(DailyQuality {
            day,
            true_count: 0,
            false_count: 0,
            missing_count: 0,
            undefined_count: 0,
        });
        match BoolValue::from_sample(*s) {
            BoolValue::True => d.true_count += 1,
            BoolValue::False => d.false_count += 1,
            BoolValue::Missing => d.missing_count += 1,
            BoolValue::Undefined => d.undefined_count += 1,
        }
    }
    days.into_values().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::BoolValue::{False as F, Missing as M, True as T, Undefined as U};
    use proptest::prelude::*;

    const T0: Timestamp = 1_704_067_200;

    fn rule_series(vals: &[BoolValue], start: Timestamp) -> Series {
        let g = TimeGrid::new(start, 900, vals.len()).unwrap();
        Series::new("rule:r", g, vals.iter().map(|v| v.to_sample()).collect(), SeriesKind::Boolean).unwrap()
    }

    fn spans(v: &[Violation]) -> Vec<(usize, usize)> {
        v.iter()
            .map(|x| (((x.start - T0) / 900) as usize, ((x.end - T0) / 900) as usize))
            .collect()
    }

    #[test]
    fn scan_examples() {
        assert!(scan_violations(&rule_series(&[T; 8], T0), 4).unwrap().is_empty());
        let s = rule_series(&[F, F, F, F, T, T, T, T, F, F], T0);
        assert_eq!(spans(&scan_violations(&s, 4).unwrap()), vec![(0, 3)]);
        let s = rule_series(&[F, M, F, F], T0);
        let v = scan_violations(&s, 2).unwrap();
        assert_eq!(spans(&v), vec![(2, 3)]);
        assert_eq!(v[0].steps, 2);
        let s = rule_series(&[F, U, F], T0);
        assert!(scan_violations(&s, 2).unwrap().is_empty());
        let num = Series::missing("x", TimeGrid::new(T0, 900, 2).unwrap(), SeriesKind::Numeric);
        assert!(matches!(scan_violations(&num, 1), Err(TicketError::KindMismatch(_))));
    }

    fn run<'a>(g: TimeGrid, inputs: &'a [Series]) -> RuleRun<'a> {
        RuleRun {
            rule_id: "hc1",
            binding: [("vl".to_string(), "AHU1_supply".to_string())].into(),
            grid: g,
            inputs,
        }
    }

    fn scan_upsert(store: &TicketStore, vals: &[BoolValue], start: Timestamp) -> Vec<Ticket> {
        let s = rule_series(vals, start);
        let v = scan_violations(&s, 2).unwrap();
        store.upsert(&run(s.grid, &[]), &v).unwrap()
    }

    #[test]
    fn upsert_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let store = TicketStore::new(dir.path());
        let vals = [T, F, F, F, T, T, F, F, T, T];
        let first = scan_upsert(&store, &vals, T0);
        assert_eq!(first.len(), 2);
        let bytes = fs::read(store.log_path()).unwrap();
        let outbox = fs::read(store.outbox_path()).unwrap();
        let again = scan_upsert(&store, &vals, T0);
        assert_eq!(first, again);
        assert_eq!(fs::read(store.log_path()).unwrap(), bytes);
        assert_eq!(fs::read(store.outbox_path()).unwrap(), outbox);
        assert_ne!(first[0].id, first[1].id);
    }

    #[test]
    fn adjacent_violation_extends_open_ticket() {
        let dir = tempfile::tempdir().unwrap();
        let store = TicketStore::new(dir.path());
        // run still going at the end of the first evaluation
        let a = scan_upsert(&store, &[T, T, F, F], T0);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].state, TicketState::Open);
        let id = a[0].id.clone();
        // next evaluation starts right after
        let b = scan_upsert(&store, &[F, F, F, T, T], T0 + 4 * 900);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].id, id);
        assert_eq!(b[0].start, T0 + 2 * 900);
        assert_eq!(b[0].end, T0 + 6 * 900);
        assert_eq!(b[0].step_count, 5);
        // last evaluated slot is two steps after the end, so it closed
        assert_eq!(b[0].state, TicketState::Closed);

        let events: Vec<OutboxEvent> = fs::read_to_string(store.outbox_path())
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        let kinds: Vec<_> = events.iter().map(|e| e.transition).collect();
        assert_eq!(kinds, vec![TicketState::Open, TicketState::Extended, TicketState::Closed]);
    }

    #[test]
    fn ticket_stays_open_until_more_than_one_step_passes() {
        let dir = tempfile::tempdir().unwrap();
        let store = TicketStore::new(dir.path());
        let t = scan_upsert(&store, &[F, F, T], T0);
        assert_eq!(t[0].state, TicketState::Open);
        let t = scan_upsert(&store, &[F, F, T, T], T0);
        assert_eq!(t[0].state, TicketState::Closed);
    }

    #[test]
    fn acknowledged_then_recurrence_opens_new_ticket() {
        let dir = tempfile::tempdir().unwrap();
        let store = TicketStore::new(dir.path());
        let t = scan_upsert(&store, &[F, F, T, T, T], T0);
        let acked = store.acknowledge(&t[0].id, T0 + 5 * 900).unwrap();
        assert_eq!(acked.state, TicketState::Acknowledged);
        let t = scan_upsert(&store, &[F, F, T, T, T, F, F, F], T0);
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].state, TicketState::Acknowledged);
        assert_eq!(t[1].state, TicketState::Open);
        assert!(matches!(store.acknowledge("nope", 0), Err(TicketError::UnknownTicket(_))));
    }

    #[test]
    fn message_quotes_context_values() {
        let dir = tempfile::tempdir().unwrap();
        let store = TicketStore::new(dir.path());
        let s = rule_series(&[F, F], T0);
        let input = Series::from_values("AHU1_supply", s.grid, &[60.5, 61.0]).unwrap();
        let inputs = [input];
        let v = scan_violations(&s, 1).unwrap();
        let t = store.upsert(&run(s.grid, &inputs), &v).unwrap();
        assert_eq!(
            t[0].message,
            "rule `hc1` evaluated FALSE from 2024-01-01T00:00:00Z to 2024-01-01T00:15:00Z (2 steps); at first violation: AHU1_supply=60.5"
        );
        let line = fs::read_to_string(store.log_path()).unwrap();
        assert!(line.contains("\"start\":\"2024-01-01T00:00:00Z\""), "{line}");
        assert_eq!(t[0].id, ticket_id("hc1", T0));
        assert_eq!(t[0].id.len(), 16);
    }

    #[test]
    fn daily_quality_counts() {
        let s = rule_series(&[T, F, M, U, T], T0);
        let q = daily_quality(&s, chrono_tz::UTC);
        assert_eq!(q.len(), 1);
        assert_eq!((q[0].true_count, q[0].false_count, q[0].missing_count, q[0].undefined_count), (2, 1, 1, 1));
    }

    fn arb_value() -> impl Strategy<Value = BoolValue> {
        prop_oneof![4 => Just(T), 4 => Just(F), 1 => Just(M), 1 => Just(U)]
    }

    proptest! {
        #[test]
        fn scan_matches_run_enumerator(vals in proptest::collection::vec(arb_value(), 0..200), min in 1usize..6) {
            let s = rule_series(&vals, T0);
            let got = spans(&scan_violations(&s, min).unwrap());
            // brute force: every (i, j) that is all FALSE and cannot grow
            let mut want = Vec::new();
            for i in 0..vals.len() {
                for j in i..vals.len() {
                    let all_false = vals[i..=j].iter().all(|v| *v == F);
                    let maximal = (i == 0 || vals[i - 1] != F) && (j + 1 == vals.len() || vals[j + 1] != F);
                    if all_false && maximal && j - i + 1 >= min {
                        want.push((i, j));
                    }
                }
            }
            prop_assert_eq!(got, want);
        }

        #[test]
        fn growing_data_keeps_one_ticket_per_run(vals in proptest::collection::vec(arb_value(), 1..120), cuts in proptest::collection::vec(1usize..120, 0..4)) {
            let dir = tempfile::tempdir().unwrap();
            let store = TicketStore::new(dir.path());
            let mut cuts: Vec<usize> = cuts.into_iter().filter(|c| *c < vals.len()).collect();
            cuts.push(vals.len());
            cuts.sort();
            // evaluate growing prefixes, as successive runs over new data would
            for c in &cuts {
                scan_upsert(&store, &vals[..*c], T0);
            }
            let bytes = fs::read(store.log_path()).unwrap_or_default();
            let tickets = scan_upsert(&store, &vals, T0);
            prop_assert_eq!(fs::read(store.log_path()).unwrap_or_default(), bytes);

            let s = rule_series(&vals, T0);
            let runs = scan_violations(&s, 2).unwrap();
            prop_assert_eq!(tickets.len(), runs.len());
            for (t, r) in tickets.iter().zip(&runs) {
                prop_assert_eq!((t.start, t.end, t.step_count), (r.start, r.end, r.steps));
            }
            for w in tickets.windows(2) {
                prop_assert!(w[0].end < w[1].start);
            }
        }
    }
}
