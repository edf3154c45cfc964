//! Event streams and session slicing.
//!
//! An events file is comma-separated text with a header row and the columns
//! `patient_id, timestamp, kind, name, value`:
//!
//! ```text
//! patient_id,timestamp,kind,name,value
//! p1,2020-03-01T00:00:00Z,position,prone,
//! p1,2020-03-01T01:00:00Z,measurement,peep,12
//! p1,2020-03-01T01:00:00Z,medication,vasopressors,1
//! ```
//!
//! Each patient's timeline is cut into maximal intervals of constant
//! position ("original" sessions). A supine session additionally spawns an
//! "artificial" supine session `[t, end]` for every re-measurement of the
//! PaO₂/PEEP/FiO₂ bundle at time `t` that leaves at least eight hours
//! before the end of the session.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{DateTime, Duration, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Instant = DateTime<Utc>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    Prone,
    Supine,
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Position::Prone => "prone",
            Position::Supine => "supine",
        })
    }
}

impl FromStr for Position {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "prone" => Ok(Position::Prone),
            "supine" => Ok(Position::Supine),
            other => Err(Error::InvalidInput(format!("unknown position `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Position(Position),
    Measurement { variable: String, value: f64 },
    Medication { name: String, administered: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub patient_id: String,
    pub timestamp: Instant,
    pub payload: Payload,
    /// Line of the source file the event came from.
    pub line: usize,
}

impl Event {
    pub fn measurement(&self) -> Option<(&str, f64)> {
        match &self.payload {
            Payload::Measurement { variable, value } => Some((variable, *value)),
            _ => None,
        }
    }
}

/// Measured variables the default covariate and outcome definitions read.
pub const DEFAULT_VARIABLES: &[&str] = &[
    "age",
    "male_sex",
    "bmi",
    "pbw",
    "sofa",
    "diabetes",
    "renal_failure",
    "hepatic_disease",
    "coronary_artery_disease",
    "cancer",
    "copd",
    "immunodeficiency",
    "tidal_volume",
    "respiratory_rate",
    "peep",
    "fio2",
    "plateau_pressure",
    "driving_pressure",
    "pao2",
    "pf_ratio",
    "paco2",
    "arterial_ph",
    "lung_compliance_static",
];

/// Header names of the five input columns, and the variable names that do
/// not count as unknown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventSchema {
    pub patient_id: String,
    pub timestamp: String,
    pub kind: String,
    pub name: String,
    pub value: String,
    pub known_variables: BTreeSet<String>,
}

impl Default for EventSchema {
    fn default() -> Self {
        Self {
            patient_id: "patient_id".into(),
            timestamp: "timestamp".into(),
            kind: "kind".into(),
            name: "name".into(),
            value: "value".into(),
            known_variables: DEFAULT_VARIABLES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseWarnings {
    /// Records older than the previous record of the same patient.
    pub out_of_order: usize,
    /// Unknown measurement variable -> number of records.
    pub unknown_variables: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    /// Events per patient, sorted by timestamp (stable).
    pub patients: BTreeMap<String, Vec<Event>>,
    pub warnings: ParseWarnings,
}

impl EventLog {
    pub fn n_events(&self) -> usize {
        self.patients.values().map(Vec::len).sum()
    }
}

pub fn parse_timestamp(s: &str) -> Option<Instant> {
    DateTime::parse_from_rfc3339(s.trim()).ok().map(|t| t.with_timezone(&Utc))
}

pub fn format_timestamp(t: &Instant) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn parse_record(rec: &csv::StringRecord, cols: &[usize; 5], line: usize) -> Result<Event> {
    let field = |k: usize| rec.get(cols[k]).unwrap_or("").trim();
    let bad = |message: String| Error::Record { line, message };
    let patient_id = field(0);
    if patient_id.is_empty() {
        return Err(bad("empty patient id".into()));
    }
    let ts = field(1);
    let timestamp = parse_timestamp(ts).ok_or_else(|| bad(format!("malformed timestamp `{ts}`")))?;
    let name = field(3);
    let value = field(4);
    let payload = match field(2).to_ascii_lowercase().as_str() {
        "position" => Payload::Position(name.parse().map_err(|e: Error| bad(e.to_string()))?),
        "measurement" => {
            if name.is_empty() {
                return Err(bad("measurement without a variable name".into()));
            }
            let v: f64 = value.parse().map_err(|_| bad(format!("non-numeric value `{value}`")))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite value `{value}`")));
            }
            Payload::Measurement { variable: name.to_string(), value: v }
        }
        "medication" => {
            let administered = match value.to_ascii_lowercase().as_str() {
                "" | "1" | "true" | "yes" => true,
                "0" | "false" | "no" => false,
                other => return Err(bad(format!("invalid administration flag `{other}`"))),
            };
            Payload::Medication { name: name.to_string(), administered }
        }
        other => return Err(bad(format!("unknown event kind `{other}`"))),
    };
    Ok(Event { patient_id: patient_id.to_string(), timestamp, payload, line })
}

/// Parses an events file. Fails on the first malformed record; an empty
/// source yields an empty log.
pub fn parse_events<R: Read>(source: R, schema: &EventSchema) -> Result<EventLog> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(source);
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Ok(EventLog::default());
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::InvalidInput(format!("events file has no `{name}` column")))
    };
    let cols = [
        find(&schema.patient_id)?,
        find(&schema.timestamp)?,
        find(&schema.kind)?,
        find(&schema.name)?,
        find(&schema.value)?,
    ];

    let mut log = EventLog::default();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let ev = parse_record(&rec, &cols, line)?;
        if let Some((var, _)) = ev.measurement() {
            if !schema.known_variables.contains(var) {
                *log.warnings.unknown_variables.entry(var.to_string()).or_default() += 1;
            }
        }
        let list = log.patients.entry(ev.patient_id.clone()).or_default();
        if list.last().is_some_and(|prev| prev.timestamp > ev.timestamp) {
            log.warnings.out_of_order += 1;
        }
        list.push(ev);
    }
    for list in log.patients.values_mut() {
        list.sort_by_key(|e| e.timestamp);
    }
    if log.warnings.out_of_order > 0 {
        log::warn!("{} out-of-order event records were re-sorted", log.warnings.out_of_order);
    }
    for (var, count) in &log.warnings.unknown_variables {
        log::warn!("unknown variable `{var}` in {count} records");
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Artificial,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Original => "original",
            Provenance::Artificial => "artificial",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "original" => Ok(Provenance::Original),
            "artificial" => Ok(Provenance::Artificial),
            other => Err(Error::InvalidInput(format!("unknown provenance `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub patient_id: String,
    pub start: Instant,
    pub end: Instant,
    pub position: Position,
    pub provenance: Provenance,
    /// End of the spawning original session, for artificial sessions.
    pub parent_end: Option<Instant>,
}

impl Session {
    pub fn duration_hours(&self) -> f64 {
        (self.end - self.start).num_seconds() as f64 / 3600.0
    }
}

/// Original sessions of one patient, plus the number of collapsed
/// position changes that repeated the current position.
pub fn build_sessions(events: &[Event]) -> (Vec<Session>, usize) {
    let (Some(first), Some(last)) = (events.first(), events.last()) else {
        return (Vec::new(), 0);
    };
    let pid = &first.patient_id;
    let end_of_timeline = last.timestamp;
    let mut out: Vec<Session> = Vec::new();
    let mut duplicates = 0;
    let push = |out: &mut Vec<Session>, start: Instant, end: Instant, position: Position| {
        if end <= start {
            return;
        }
        if let Some(prev) = out.last_mut() {
            if prev.position == position && prev.end == start {
                prev.end = end;
                return;
            }
        }
        out.push(Session {
            patient_id: pid.clone(),
            start,
            end,
            position,
            provenance: Provenance::Original,
            parent_end: None,
        });
    };

    let mut current = Position::Supine;
    let mut since = first.timestamp;
    for ev in events {
        if let Payload::Position(p) = ev.payload {
            if p == current {
                duplicates += 1;
                continue;
            }
            push(&mut out, since, ev.timestamp, current);
            current = p;
            since = ev.timestamp;
        }
    }
    push(&mut out, since, end_of_timeline, current);
    if duplicates > 0 {
        log::warn!("patient {pid}: {duplicates} repeated position changes ignored");
    }
    (out, duplicates)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpawnRules {
    /// Variables that make up a re-measurement bundle.
    pub bundle_variables: Vec<String>,
    /// All bundle variables must fall within this many minutes of each other.
    pub bundle_window_minutes: i64,
    /// Minimum distance between the bundle and the end of the session.
    pub margin_hours: i64,
}

impl Default for SpawnRules {
    fn default() -> Self {
        Self {
            bundle_variables: vec!["pao2".into(), "peep".into(), "fio2".into()],
            bundle_window_minutes: 60,
            margin_hours: 8,
        }
    }
}

/// Times of complete re-measurement bundles inside `(start, end - margin]`.
/// Each measurement belongs to at most one bundle.
pub fn bundle_times(session: &Session, events: &[Event], rules: &SpawnRules) -> Vec<Instant> {
    let window = Duration::minutes(rules.bundle_window_minutes);
    let latest = session.end - Duration::hours(rules.margin_hours);
    let mut seen: Vec<Option<Instant>> = vec![None; rules.bundle_variables.len()];
    let mut out = Vec::new();
    for ev in events {
        if ev.timestamp <= session.start {
            continue;
        }
        if ev.timestamp > latest {
            break;
        }
        let Some((var, _)) = ev.measurement() else { continue };
        let Some(k) = rules.bundle_variables.iter().position(|v| v == var) else { continue };
        seen[k] = Some(ev.timestamp);
        if seen.iter().all(|s| s.is_some_and(|s| ev.timestamp - s <= window)) {
            out.push(ev.timestamp);
            seen.iter_mut().for_each(|s| *s = None);
        }
    }
    out
}

/// Appends one artificial supine session per qualifying bundle of every
/// original supine session. `events` are the patient's sorted events.
pub fn spawn_artificial_sessions(sessions: &[Session], events: &[Event], rules: &SpawnRules) -> Vec<Session> {
    let mut out = sessions.to_vec();
    for s in sessions.iter().filter(|s| s.provenance == Provenance::Original && s.position == Position::Supine) {
        for t in bundle_times(s, events, rules) {
            out.push(Session {
                patient_id: s.patient_id.clone(),
                start: t,
                end: s.end,
                position: Position::Supine,
                provenance: Provenance::Artificial,
                parent_end: Some(s.end),
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SessionCounts {
    pub supine_original: usize,
    pub supine_artificial: usize,
    pub prone: usize,
}

impl SessionCounts {
    pub fn of(sessions: &[Session]) -> Self {
        let mut c = Self::default();
        for s in sessions {
            match (s.position, s.provenance) {
                (Position::Prone, _) => c.prone += 1,
                (Position::Supine, Provenance::Original) => c.supine_original += 1,
                (Position::Supine, Provenance::Artificial) => c.supine_artificial += 1,
            }
        }
        c
    }

    pub fn supine(&self) -> usize {
        self.supine_original + self.supine_artificial
    }
}

/// Original and artificial sessions of every patient in the log, patient by
/// patient in id order.
pub fn sessions_for_log(log: &EventLog, rules: &SpawnRules) -> Vec<Session> {
    let mut out = Vec::new();
    for events in log.patients.values() {
        let (original, _) = build_sessions(events);
        out.extend(spawn_artificial_sessions(&original, events, rules));
    }
    out
}

pub fn write_sessions<W: Write>(out: W, sessions: &[Session]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["patient_id", "start", "end", "position", "provenance"])?;
    for s in sessions {
        w.write_record([
            s.patient_id.clone(),
            format_timestamp(&s.start),
            format_timestamp(&s.end),
            s.position.to_string(),
            s.provenance.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(h: f64) -> Instant {
        parse_timestamp("2020-03-01T00:00:00Z").unwrap() + Duration::seconds((h * 3600.0) as i64)
    }

    fn ev(h: f64, payload: Payload) -> Event {
        Event { patient_id: "p".into(), timestamp: at(h), payload, line: 0 }
    }

    fn pos(h: f64, p: Position) -> Event {
        ev(h, Payload::Position(p))
    }

    fn meas(h: f64, var: &str) -> Event {
        ev(h, Payload::Measurement { variable: var.into(), value: 1.0 })
    }

    fn bundle(h: f64) -> Vec<Event> {
        vec![meas(h - 0.5, "pao2"), meas(h - 0.25, "peep"), meas(h, "fio2")]
    }

    fn parse(text: &str) -> Result<EventLog> {
        parse_events(text.as_bytes(), &EventSchema::default())
    }

    #[test]
    fn single_position_record() {
        let log = parse("patient_id,timestamp,kind,name,value\np1,2020-03-01T00:00:00Z,position,prone,\n").unwrap();
        let events = &log.patients["p1"];
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].payload, Payload::Position(Position::Prone));
        assert_eq!(events[0].line, 2);
    }

    #[test]
    fn out_of_order_records_are_sorted_and_counted() {
        let text = "patient_id,timestamp,kind,name,value\n\
                    p1,2020-03-01T02:00:00Z,measurement,peep,10\n\
                    p1,2020-03-01T01:00:00Z,measurement,peep,8\n\
                    p1,2020-03-01T03:00:00Z,measurement,peep,12\n";
        let log = parse(text).unwrap();
        assert_eq!(log.warnings.out_of_order, 1);
        let values: Vec<f64> = log.patients["p1"].iter().map(|e| e.measurement().unwrap().1).collect();
        assert_eq!(values, vec![8.0, 10.0, 12.0]);
    }

    #[test]
    fn record_errors_carry_line_numbers() {
        let head = "patient_id,timestamp,kind,name,value\np1,2020-03-01T00:00:00Z,measurement,peep,5\n";
        for bad in [
            "p1,2020-03-01T01:00:00Z,measurement,peep,NaN",
            "p1,2020-03-01T01:00:00Z,measurement,peep,high",
            "p1,yesterday,measurement,peep,5",
            "p1,2020-03-01T01:00:00Z,position,sideways,",
            "p1,2020-03-01T01:00:00Z,note,x,1",
        ] {
            match parse(&format!("{head}{bad}\n")) {
                Err(Error::Record { line, .. }) => assert_eq!(line, 3, "{bad}"),
                other => panic!("{bad}: {other:?}"),
            }
        }
    }

    #[test]
    fn empty_source_and_unknown_variables() {
        assert_eq!(parse("").unwrap(), EventLog::default());
        let log = parse("patient_id,timestamp,kind,name,value\np1,2020-03-01T00:00:00Z,measurement,lactate,2\n").unwrap();
        assert_eq!(log.warnings.unknown_variables["lactate"], 1);
        assert_eq!(log.n_events(), 1);
        assert!(parse("a,b\n1,2\n").is_err());
    }

    #[test]
    fn no_position_changes_give_one_supine_session() {
        let events = vec![meas(0.0, "peep"), meas(5.0, "peep")];
        let (s, _) = build_sessions(&events);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].start, s[0].end, s[0].position), (at(0.0), at(5.0), Position::Supine));
        assert!(build_sessions(&[]).0.is_empty());
    }

    #[test]
    fn alternation() {
        let events = vec![
            meas(0.0, "peep"),
            pos(1.0, Position::Prone),
            pos(2.0, Position::Supine),
            pos(3.0, Position::Prone),
            meas(4.0, "peep"),
        ];
        let (s, dup) = build_sessions(&events);
        assert_eq!(dup, 0);
        let got: Vec<_> = s.iter().map(|s| (s.start, s.end, s.position)).collect();
        assert_eq!(
            got,
            vec![
                (at(0.0), at(1.0), Position::Supine),
                (at(1.0), at(2.0), Position::Prone),
                (at(2.0), at(3.0), Position::Supine),
                (at(3.0), at(4.0), Position::Prone),
            ]
        );
    }

    #[test]
    fn repeated_positions_collapse() {
        let events = vec![
            pos(0.0, Position::Supine),
            pos(1.0, Position::Prone),
            pos(2.0, Position::Prone),
            meas(3.0, "peep"),
        ];
        let (s, dup) = build_sessions(&events);
        assert_eq!(dup, 2);
        assert_eq!(s.len(), 2);
        assert_eq!((s[1].start, s[1].end), (at(1.0), at(3.0)));
    }

    fn supine(start: f64, end: f64) -> Session {
        Session {
            patient_id: "p".into(),
            start: at(start),
            end: at(end),
            position: Position::Supine,
            provenance: Provenance::Original,
            parent_end: None,
        }
    }

    #[test]
    fn one_bundle_spawns_one_session() {
        let s = supine(0.0, 30.0);
        let out = spawn_artificial_sessions(std::slice::from_ref(&s), &bundle(10.0), &SpawnRules::default());
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], s);
        let a = &out[1];
        assert_eq!((a.start, a.end, a.parent_end), (at(10.0), at(30.0), Some(at(30.0))));
        assert_eq!(a.provenance, Provenance::Artificial);
    }

    #[test]
    fn margin_is_respected() {
        let s = supine(0.0, 30.0);
        let rules = SpawnRules::default();
        assert_eq!(bundle_times(&s, &bundle(23.0), &rules), Vec::<Instant>::new());
        assert_eq!(bundle_times(&s, &bundle(22.0), &rules), vec![at(22.0)]);
    }

    #[test]
    fn every_bundle_within_margin_spawns() {
        let s = supine(0.0, 30.0);
        let events: Vec<Event> = [6.0, 12.0, 18.0].iter().flat_map(|&h| bundle(h)).collect();
        assert_eq!(bundle_times(&s, &events, &SpawnRules::default()), vec![at(6.0), at(12.0), at(18.0)]);
    }

    #[test]
    fn scattered_measurements_do_not_form_a_bundle() {
        let s = supine(0.0, 30.0);
        let events = vec![meas(2.0, "pao2"), meas(4.0, "peep"), meas(6.0, "fio2")];
        assert!(bundle_times(&s, &events, &SpawnRules::default()).is_empty());
        // A measurement at the session start does not count as re-recorded.
        let events = vec![meas(0.0, "pao2"), meas(0.2, "peep"), meas(0.4, "fio2")];
        assert!(bundle_times(&s, &events, &SpawnRules::default()).is_empty());
    }

    #[test]
    fn export_round_trip_shape() {
        let mut buf = Vec::new();
        write_sessions(&mut buf, &[supine(0.0, 2.5)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "patient_id,start,end,position,provenance\np,2020-03-01T00:00:00Z,2020-03-01T02:30:00Z,supine,original\n"
        );
    }
}
