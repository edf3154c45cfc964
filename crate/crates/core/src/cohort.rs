//! From sessions to a trial-like cohort: baseline covariates, outcome
//! windows, inclusion criteria, mean imputation and random splits.
//!
//! Baseline covariates are read before (or just after) the session start,
//! outcomes strictly later, so every covariate timestamp precedes every
//! outcome timestamp of the same observation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::Duration;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ingest::{format_timestamp, parse_timestamp, Event, EventLog, Instant, Payload, Position, Provenance, Session};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Numeric,
    Binary,
}

/// When a source variable is read relative to the session start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timing {
    /// Last value in the lookback window before the start, else the first
    /// value shortly after it.
    Windowed,
    /// Like `Windowed` with an unbounded lookback (demographics, comorbidities).
    Static,
    /// Any administration record in the lookback window up to and including
    /// the start.
    Medication,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum Rule {
    Measured { variable: String, timing: Timing },
    GreaterThan { variable: String, timing: Timing, threshold: f64 },
    Quotient { numerator: String, numerator_timing: Timing, denominator: String, denominator_timing: Timing },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateDef {
    pub name: String,
    pub kind: CovariateKind,
    pub units: String,
    #[serde(flatten)]
    pub rule: Rule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub entries: Vec<CovariateDef>,
}

fn measured(name: &str, kind: CovariateKind, units: &str, timing: Timing) -> CovariateDef {
    CovariateDef {
        name: name.into(),
        kind,
        units: units.into(),
        rule: Rule::Measured { variable: name.into(), timing },
    }
}

impl Default for CovariateSpec {
    /// The 28 baseline covariates: demographics and severity, comorbidities,
    /// medications, ventilator settings and blood gases.
    fn default() -> Self {
        use CovariateKind::{Binary, Numeric};
        use Timing::{Medication, Static, Windowed};
        let mut e = vec![
            measured("age", Numeric, "yr", Static),
            measured("male_sex", Binary, "flag", Static),
            measured("bmi", Numeric, "kg/m2", Static),
            measured("sofa", Numeric, "points", Static),
        ];
        for c in ["diabetes", "renal_failure", "hepatic_disease", "coronary_artery_disease", "cancer", "copd", "immunodeficiency"]
        {
            e.push(measured(c, Binary, "flag", Static));
        }
        e.push(CovariateDef {
            name: "morbid_obesity".into(),
            kind: Binary,
            units: "flag".into(),
            rule: Rule::GreaterThan { variable: "bmi".into(), timing: Static, threshold: 35.0 },
        });
        for m in ["vasopressors", "neuromuscular_blockers", "renal_replacement_therapy", "glucocorticoids"] {
            e.push(measured(m, Binary, "flag", Medication));
        }
        e.push(measured("tidal_volume", Numeric, "ml", Windowed));
        e.push(CovariateDef {
            name: "tidal_volume_per_kg_pbw".into(),
            kind: Numeric,
            units: "ml/kg".into(),
            rule: Rule::Quotient {
                numerator: "tidal_volume".into(),
                numerator_timing: Windowed,
                denominator: "pbw".into(),
                denominator_timing: Static,
            },
        });
        for (v, u) in [
            ("respiratory_rate", "1/min"),
            ("peep", "cmH2O"),
            ("fio2", "%"),
            ("plateau_pressure", "cmH2O"),
            ("driving_pressure", "cmH2O"),
            ("pao2", "mmHg"),
            ("pf_ratio", "mmHg"),
            ("paco2", "mmHg"),
            ("arterial_ph", "pH"),
            ("lung_compliance_static", "ml/cmH2O"),
        ] {
            e.push(measured(v, Numeric, u, Windowed));
        }
        Self { entries: e }
    }
}

impl CovariateSpec {
    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn kinds(&self) -> Vec<CovariateKind> {
        self.entries.iter().map(|e| e.kind).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::InvalidConfig("covariate spec is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate covariate `{}`", e.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Kept iff P/F is strictly below this.
    pub pf: f64,
    /// Kept iff FiO₂ (%) is at least this.
    pub fio2: f64,
    /// Kept iff PEEP is at least this.
    pub peep: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { pf: 150.0, fio2: 60.0, peep: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortRules {
    pub lookback_hours: f64,
    pub fallback_minutes: f64,
    pub early_window: [f64; 2],
    pub late_window: [f64; 2],
    pub max_prone_hours: f64,
    pub thresholds: Thresholds,
    /// Measured variable holding the outcome (P/F ratio).
    pub outcome_variable: String,
    /// Covariate names checked by the inclusion criteria.
    pub pao2: String,
    pub fio2: String,
    pub peep: String,
    pub pf: String,
}

impl Default for CohortRules {
    fn default() -> Self {
        Self {
            lookback_hours: 8.0,
            fallback_minutes: 30.0,
            early_window: [2.0, 8.0],
            late_window: [12.0, 24.0],
            max_prone_hours: 96.0,
            thresholds: Thresholds::default(),
            outcome_variable: "pf_ratio".into(),
            pao2: "pao2".into(),
            fio2: "fio2".into(),
            peep: "peep".into(),
            pf: "pf_ratio".into(),
        }
    }
}

fn hours(h: f64) -> Duration {
    Duration::seconds((h * 3600.0).round() as i64)
}

impl CohortRules {
    pub fn validate(&self) -> Result<()> {
        let ok_window = |w: &[f64; 2]| w[0] >= 0.0 && w[0] < w[1];
        if !(self.lookback_hours > 0.0) || !(self.fallback_minutes >= 0.0) || !(self.max_prone_hours > 0.0) {
            return Err(Error::InvalidConfig("cohort durations must be positive".into()));
        }
        if !ok_window(&self.early_window) || !ok_window(&self.late_window) {
            return Err(Error::InvalidConfig("outcome windows must satisfy 0 <= from < to".into()));
        }
        // Outcomes must start after the covariate fallback window closes.
        let first = self.early_window[0].min(self.late_window[0]);
        if hours(first) <= Duration::seconds((self.fallback_minutes * 60.0).round() as i64) {
            return Err(Error::InvalidConfig("outcome windows overlap the covariate fallback window".into()));
        }
        Ok(())
    }
}

/// Last value of `variable` read under `timing`, with its timestamp.
fn read_variable(
    start: Instant,
    events: &[Event],
    variable: &str,
    timing: Timing,
    rules: &CohortRules,
) -> Option<(f64, Instant)> {
    let lookback = start - hours(rules.lookback_hours);
    let fallback_end = start + Duration::seconds((rules.fallback_minutes * 60.0).round() as i64);
    match timing {
        Timing::Medication => {
            let hit = events.iter().rev().find(|e| {
                e.timestamp >= lookback
                    && e.timestamp <= start
                    && matches!(&e.payload, Payload::Medication { name, administered: true } if name == variable)
            });
            Some(hit.map_or((0.0, lookback), |e| (1.0, e.timestamp)))
        }
        Timing::Windowed | Timing::Static => {
            let values = events.iter().filter_map(|e| match e.measurement() {
                Some((v, x)) if v == variable => Some((x, e.timestamp)),
                _ => None,
            });
            let before = values
                .clone()
                .filter(|&(_, ts)| ts < start && (timing == Timing::Static || ts >= lookback))
                .last();
            before.or_else(|| values.into_iter().find(|&(_, ts)| ts >= start && ts <= fallback_end))
        }
    }
}

/// Baseline covariate vector (None = missing) and the latest timestamp any
/// value was read from.
pub fn extract_covariates(
    session: &Session,
    events: &[Event],
    spec: &CovariateSpec,
    rules: &CohortRules,
) -> (Vec<Option<f64>>, Option<Instant>) {
    let mut latest: Option<Instant> = None;
    let mut note = |ts: Instant| latest = Some(latest.map_or(ts, |l| l.max(ts)));
    let mut x = Vec::with_capacity(spec.entries.len());
    for entry in &spec.entries {
        let value = match &entry.rule {
            Rule::Measured { variable, timing } => read_variable(session.start, events, variable, *timing, rules).map(|(v, ts)| {
                if *timing != Timing::Medication || v > 0.0 {
                    note(ts);
                }
                if entry.kind == CovariateKind::Binary {
                    f64::from(u8::from(v != 0.0))
                } else {
                    v
                }
            }),
            Rule::GreaterThan { variable, timing, threshold } => {
                read_variable(session.start, events, variable, *timing, rules).map(|(v, ts)| {
                    note(ts);
                    f64::from(u8::from(v > *threshold))
                })
            }
            Rule::Quotient { numerator, numerator_timing, denominator, denominator_timing } => {
                let a = read_variable(session.start, events, numerator, *numerator_timing, rules);
                let b = read_variable(session.start, events, denominator, *denominator_timing, rules);
                match (a, b) {
                    (Some((a, ta)), Some((b, tb))) if b != 0.0 => {
                        note(ta);
                        note(tb);
                        Some(a / b)
                    }
                    _ => None,
                }
            }
        };
        x.push(value);
    }
    (x, latest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Early,
    Late,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Early => "early",
            Outcome::Late => "late",
        })
    }
}

impl FromStr for Outcome {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "early" => Ok(Outcome::Early),
            "late" => Ok(Outcome::Late),
            other => Err(Error::InvalidInput(format!("unknown outcome `{other}` (expected early or late)"))),
        }
    }
}

/// Last outcome measurement in `[start + from, min(start + to, end))`.
pub fn extract_outcome(session: &Session, events: &[Event], window: Outcome, rules: &CohortRules) -> Option<(f64, Instant)> {
    let [from, to] = match window {
        Outcome::Early => rules.early_window,
        Outcome::Late => rules.late_window,
    };
    let lo = session.start + hours(from);
    let hi = (session.start + hours(to)).min(session.end);
    events
        .iter()
        .filter(|e| e.timestamp >= lo && e.timestamp < hi)
        .filter_map(|e| match e.measurement() {
            Some((v, x)) if v == rules.outcome_variable => Some((x, e.timestamp)),
            _ => None,
        })
        .last()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub patient_id: String,
    pub session_start: Option<Instant>,
    pub session_end: Option<Instant>,
    pub provenance: Option<Provenance>,
    pub x: Vec<Option<f64>>,
    pub t: u8,
    pub y_early: Option<f64>,
    pub y_late: Option<f64>,
    /// Latest timestamp a covariate was read from.
    pub covariate_time: Option<Instant>,
    /// Timestamps of the early and late outcome measurements.
    pub outcome_times: [Option<Instant>; 2],
}

impl Observation {
    pub fn outcome(&self, which: Outcome) -> Option<f64> {
        match which {
            Outcome::Early => self.y_early,
            Outcome::Late => self.y_late,
        }
    }

    pub fn duration_hours(&self) -> Option<f64> {
        Some((self.session_end? - self.session_start?).num_seconds() as f64 / 3600.0)
    }
}

pub fn observe(session: &Session, events: &[Event], spec: &CovariateSpec, rules: &CohortRules) -> Observation {
    let (x, covariate_time) = extract_covariates(session, events, spec, rules);
    let early = extract_outcome(session, events, Outcome::Early, rules);
    let late = extract_outcome(session, events, Outcome::Late, rules);
    Observation {
        patient_id: session.patient_id.clone(),
        session_start: Some(session.start),
        session_end: Some(session.end),
        provenance: Some(session.provenance),
        x,
        t: u8::from(session.position == Position::Prone),
        y_early: early.map(|o| o.0),
        y_late: late.map(|o| o.0),
        covariate_time,
        outcome_times: [early.map(|o| o.1), late.map(|o| o.1)],
    }
}

/// Rows removed by each inclusion criterion, in the order they are checked.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Funnel {
    pub candidates: usize,
    pub missing_baseline: usize,
    pub pf_too_high: usize,
    pub fio2_too_low: usize,
    pub peep_too_low: usize,
    pub prone_too_long: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    MissingBaseline,
    PfTooHigh,
    Fio2TooLow,
    PeepTooLow,
    ProneTooLong,
}

/// Inclusion verdict for one observation; depends on that row only.
pub fn inclusion_verdict(obs: &Observation, spec: &CovariateSpec, rules: &CohortRules) -> Verdict {
    let get = |name: &str| spec.index_of(name).and_then(|k| obs.x.get(k).copied().flatten());
    let (Some(_pao2), Some(fio2), Some(peep), Some(pf)) = (get(&rules.pao2), get(&rules.fio2), get(&rules.peep), get(&rules.pf))
    else {
        return Verdict::MissingBaseline;
    };
    let th = &rules.thresholds;
    if !(pf < th.pf) {
        Verdict::PfTooHigh
    } else if !(fio2 >= th.fio2) {
        Verdict::Fio2TooLow
    } else if !(peep >= th.peep) {
        Verdict::PeepTooLow
    } else if obs.t == 1 && obs.duration_hours().is_some_and(|h| h > rules.max_prone_hours) {
        Verdict::ProneTooLong
    } else {
        Verdict::Keep
    }
}

pub fn apply_inclusion(observations: Vec<Observation>, spec: &CovariateSpec, rules: &CohortRules) -> (Vec<Observation>, Funnel) {
    let mut funnel = Funnel { candidates: observations.len(), ..Funnel::default() };
    let mut kept = Vec::new();
    for obs in observations {
        match inclusion_verdict(&obs, spec, rules) {
            Verdict::Keep => kept.push(obs),
            Verdict::MissingBaseline => funnel.missing_baseline += 1,
            Verdict::PfTooHigh => funnel.pf_too_high += 1,
            Verdict::Fio2TooLow => funnel.fio2_too_low += 1,
            Verdict::PeepTooLow => funnel.peep_too_low += 1,
            Verdict::ProneTooLong => funnel.prone_too_long += 1,
        }
    }
    funnel.kept = kept.len();
    (kept, funnel)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub names: Vec<String>,
    pub kinds: Vec<CovariateKind>,
    pub observations: Vec<Observation>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Observations with the given outcome present.
    pub fn with_outcome(&self, which: Outcome) -> Vec<&Observation> {
        self.observations.iter().filter(|o| o.outcome(which).is_some()).collect()
    }

    pub fn provenance_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for o in &self.observations {
            let key = match (o.t, o.provenance) {
                (1, _) => "prone".to_string(),
                (_, Some(p)) => format!("supine_{p}"),
                (_, None) => "supine".to_string(),
            };
            *out.entry(key).or_default() += 1;
        }
        out
    }
}

/// Observations for every session, then the inclusion criteria.
pub fn build_cohort(log: &EventLog, sessions: &[Session], spec: &CovariateSpec, rules: &CohortRules) -> Result<(Cohort, Funnel)> {
    spec.validate()?;
    rules.validate()?;
    let observations: Vec<Observation> = sessions
        .par_iter()
        .map(|s| {
            let events = log.patients.get(&s.patient_id).map_or(&[][..], Vec::as_slice);
            observe(s, events, spec, rules)
        })
        .collect();
    let (kept, funnel) = apply_inclusion(observations, spec, rules);
    Ok((Cohort { names: spec.names(), kinds: spec.kinds(), observations: kept }, funnel))
}

/// Per-covariate fill values: training mean for numeric covariates, 0 for
/// binary ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputeStats {
    pub fill: Vec<f64>,
}

pub fn fit_impute(rows: &[&[Option<f64>]], names: &[String], kinds: &[CovariateKind]) -> Result<ImputeStats> {
    let mut fill = Vec::with_capacity(kinds.len());
    for (k, kind) in kinds.iter().enumerate() {
        let present: Vec<f64> = rows.iter().filter_map(|r| r[k]).collect();
        if present.is_empty() {
            return Err(Error::AllMissing(names.get(k).cloned().unwrap_or_else(|| format!("x{k}"))));
        }
        fill.push(match kind {
            CovariateKind::Binary => 0.0,
            CovariateKind::Numeric => present.iter().sum::<f64>() / present.len() as f64,
        });
    }
    Ok(ImputeStats { fill })
}

pub fn apply_impute(x: &[Option<f64>], stats: &ImputeStats) -> Vec<f64> {
    x.iter().zip(&stats.fill).map(|(v, f)| v.unwrap_or(*f)).collect()
}

/// Train, validation and test row indices; pairwise disjoint and covering
/// `0..n`. Validation rows are carved out of the training portion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndex {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl SplitIndex {
    /// Training plus validation rows, in ascending order.
    pub fn development(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.train.iter().chain(&self.validation).copied().collect();
        v.sort_unstable();
        v
    }
}

pub const MIN_SPLIT_ROWS: usize = 10;

pub fn split(n: usize, seed: u64, test_frac: f64, val_frac: f64) -> Result<SplitIndex> {
    if n < MIN_SPLIT_ROWS {
        return Err(Error::InvalidInput(format!("need at least {MIN_SPLIT_ROWS} observations to split, got {n}")));
    }
    if !(0.0..1.0).contains(&test_frac) || !(0.0..1.0).contains(&val_frac) {
        return Err(Error::InvalidConfig("split fractions must lie in [0, 1)".into()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seeded(seed));
    let n_test = (test_frac * n as f64).round() as usize;
    let n_val = (val_frac * (n - n_test) as f64).round() as usize;
    let mut test = perm[..n_test].to_vec();
    let mut validation = perm[n_test..n_test + n_val].to_vec();
    let mut train = perm[n_test + n_val..].to_vec();
    test.sort_unstable();
    validation.sort_unstable();
    train.sort_unstable();
    Ok(SplitIndex { train, validation, test, seed })
}

const META: [&str; 8] = ["treatment", "y_early", "y_late", "patient_id", "session_start", "session_end", "provenance", ""];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes the cohort as delimited text; missing values are empty fields.
/// `extra` appends named columns (one value per observation).
pub fn write_cohort<W: Write>(out: W, cohort: &Cohort, extra: &[(&str, &[f64])]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = cohort.names.clone();
    header.extend(META[..7].iter().map(|s| s.to_string()));
    header.extend(extra.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header)?;
    for (i, o) in cohort.observations.iter().enumerate() {
        let mut rec: Vec<String> = o.x.iter().map(|v| fmt_opt(*v)).collect();
        rec.push(o.t.to_string());
        rec.push(fmt_opt(o.y_early));
        rec.push(fmt_opt(o.y_late));
        rec.push(o.patient_id.clone());
        rec.push(o.session_start.map(|t| format_timestamp(&t)).unwrap_or_default());
        rec.push(o.session_end.map(|t| format_timestamp(&t)).unwrap_or_default());
        rec.push(o.provenance.map(|p| p.to_string()).unwrap_or_default());
        for (_, col) in extra {
            rec.push(col[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a cohort file. Covariates are the columns before `treatment`;
/// columns after `provenance` are ignored. A covariate is binary when every
/// present value is 0 or 1.
pub fn read_cohort<R: Read>(source: R) -> Result<Cohort> {
    let mut reader = csv::Reader::from_reader(source);
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("cohort file has no `{name}` column")))
    };
    let t_col = col("treatment")?;
    let ye = col("y_early")?;
    let yl = col("y_late")?;
    let optional = |name: &str| headers.iter().position(|h| h == name);
    let (pid, ss, se, pv) = (optional("patient_id"), optional("session_start"), optional("session_end"), optional("provenance"));
    let names: Vec<String> = headers.iter().take(t_col).map(str::to_string).collect();
    if names.is_empty() {
        return Err(Error::InvalidInput("cohort file has no covariate columns".into()));
    }

    let mut observations = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| Error::Record { line, message };
        let num = |k: usize| -> Result<Option<f64>> {
            let s = rec.get(k).unwrap_or("").trim();
            if s.is_empty() {
                return Ok(None);
            }
            let v: f64 = s.parse().map_err(|_| bad(format!("non-numeric value `{s}` in `{}`", &headers[k])))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite value in `{}`", &headers[k])));
            }
            Ok(Some(v))
        };
        let x = (0..t_col).map(num).collect::<Result<Vec<_>>>()?;
        let t = match rec.get(t_col).unwrap_or("").trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("treatment must be 0 or 1, got `{other}`"))),
        };
        let text = |k: Option<usize>| k.and_then(|k| rec.get(k)).map(str::trim).filter(|s| !s.is_empty());
        let time = |k: Option<usize>| -> Result<Option<Instant>> {
            text(k).map(|s| parse_timestamp(s).ok_or_else(|| bad(format!("malformed timestamp `{s}`")))).transpose()
        };
        observations.push(Observation {
            patient_id: text(pid).unwrap_or("").to_string(),
            session_start: time(ss)?,
            session_end: time(se)?,
            provenance: text(pv).map(str::parse).transpose().map_err(|e: Error| bad(e.to_string()))?,
            x,
            t,
            y_early: num(ye)?,
            y_late: num(yl)?,
            covariate_time: None,
            outcome_times: [None, None],
        });
    }
    let kinds = (0..names.len())
        .map(|k| {
            let binary = observations.iter().filter_map(|o| o.x[k]).all(|v| v == 0.0 || v == 1.0);
            if binary {
                CovariateKind::Binary
            } else {
                CovariateKind::Numeric
            }
        })
        .collect();
    Ok(Cohort { names, kinds, observations })
}

/// Imputed model-ready splits for one outcome.
#[derive(Debug, Clone)]
pub struct OutcomeData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub stats: ImputeStats,
    pub split: SplitIndex,
}

impl OutcomeData {
    /// Training and validation rows together (the classical models' training set).
    pub fn development(&self) -> Dataset {
        let mut x = self.train.x.clone();
        for r in self.validation.x.rows() {
            x.push_row(r).expect("same width");
        }
        let t = self.train.t.iter().chain(&self.validation.t).copied().collect();
        let y = self.train.y.iter().chain(&self.validation.y).copied().collect();
        Dataset::with_names(x, t, y, self.train.feature_names.clone()).expect("valid parts")
    }
}

/// Drops rows without the outcome, splits, fits imputation on the
/// training portion (train plus validation) and applies it everywhere.
pub fn prepare_outcome(cohort: &Cohort, which: Outcome, seed: u64, test_frac: f64, val_frac: f64) -> Result<OutcomeData> {
    let rows = cohort.with_outcome(which);
    if rows.is_empty() {
        return Err(Error::Empty(format!("no observations with the {which} outcome")));
    }
    let split = split(rows.len(), seed, test_frac, val_frac)?;
    let dev = split.development();
    let dev_x: Vec<&[Option<f64>]> = dev.iter().map(|&i| rows[i].x.as_slice()).collect();
    let stats = fit_impute(&dev_x, &cohort.names, &cohort.kinds)?;
    let build = |idx: &[usize]| -> Result<Dataset> {
        let d = cohort.names.len();
        let mut flat = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            flat.extend(apply_impute(&rows[i].x, &stats));
        }
        let x = ndarray::Array2::from_shape_vec((idx.len(), d), flat).expect("row-major fill");
        let t = idx.iter().map(|&i| rows[i].t).collect();
        let y = idx.iter().map(|&i| rows[i].outcome(which).expect("filtered")).collect();
        Dataset::with_names(x, t, y, cohort.names.clone())
    };
    Ok(OutcomeData { train: build(&split.train)?, validation: build(&split.validation)?, test: build(&split.test)?, stats, split })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(h: f64) -> Instant {
        parse_timestamp("2020-03-01T00:00:00Z").unwrap() + hours(h)
    }

    fn meas(h: f64, var: &str, v: f64) -> Event {
        Event { patient_id: "p".into(), timestamp: at(h), payload: Payload::Measurement { variable: var.into(), value: v }, line: 0 }
    }

    fn med(h: f64, name: &str) -> Event {
        Event { patient_id: "p".into(), timestamp: at(h), payload: Payload::Medication { name: name.into(), administered: true }, line: 0 }
    }

    fn session(start: f64, end: f64, position: Position) -> Session {
        Session {
            patient_id: "p".into(),
            start: at(start),
            end: at(end),
            position,
            provenance: Provenance::Original,
            parent_end: None,
        }
    }

    fn value(events: &[Event], name: &str) -> Option<f64> {
        let spec = CovariateSpec::default();
        let s = session(10.0, 30.0, Position::Supine);
        let (x, _) = extract_covariates(&s, events, &spec, &CohortRules::default());
        x[spec.index_of(name).unwrap()]
    }

    #[test]
    fn default_spec_has_28_unique_covariates() {
        let spec = CovariateSpec::default();
        assert_eq!(spec.entries.len(), 28);
        spec.validate().unwrap();
    }

    #[test]
    fn last_value_in_lookback() {
        let ev = vec![meas(7.0, "peep", 8.0), meas(9.0, "peep", 10.0), meas(10.2, "peep", 99.0)];
        assert_eq!(value(&ev, "peep"), Some(10.0));
    }

    #[test]
    fn fallback_after_start() {
        let ev = vec![meas(1.0, "pao2", 50.0), meas(10.0 + 20.0 / 60.0, "pao2", 70.0)];
        assert_eq!(value(&ev, "pao2"), Some(70.0));
        let late = vec![meas(10.0 + 40.0 / 60.0, "pao2", 70.0)];
        assert_eq!(value(&late, "pao2"), None);
        assert_eq!(value(&[], "fio2"), None);
    }

    #[test]
    fn static_medication_and_derived_values() {
        let ev = vec![
            meas(0.0, "bmi", 36.0),
            meas(0.0, "pbw", 70.0),
            meas(0.0, "copd", 1.0),
            med(3.0, "vasopressors"),
            med(9.0, "glucocorticoids"),
            meas(9.5, "tidal_volume", 420.0),
        ];
        assert_eq!(value(&ev, "bmi"), Some(36.0));
        assert_eq!(value(&ev, "morbid_obesity"), Some(1.0));
        assert_eq!(value(&ev, "copd"), Some(1.0));
        assert_eq!(value(&ev, "diabetes"), None);
        assert_eq!(value(&ev, "vasopressors"), Some(1.0));
        assert_eq!(value(&ev, "glucocorticoids"), Some(1.0));
        assert_eq!(value(&ev, "neuromuscular_blockers"), Some(0.0));
        assert_eq!(value(&ev, "tidal_volume_per_kg_pbw"), Some(6.0));
    }

    #[test]
    fn outcome_windows() {
        let rules = CohortRules::default();
        let ev = vec![meas(3.0, "pf_ratio", 80.0), meas(5.0, "pf_ratio", 90.0)];
        let s = session(0.0, 6.0, Position::Prone);
        assert_eq!(extract_outcome(&s, &ev, Outcome::Early, &rules).map(|o| o.0), Some(90.0));
        assert_eq!(extract_outcome(&s, &ev, Outcome::Late, &rules), None);
        let ev = vec![meas(1.0, "pf_ratio", 80.0), meas(11.0, "pf_ratio", 85.0)];
        assert_eq!(extract_outcome(&session(0.0, 10.0, Position::Prone), &ev, Outcome::Late, &rules), None);
        assert_eq!(extract_outcome(&session(0.0, 20.0, Position::Prone), &ev[..1], Outcome::Early, &rules), None);
        // The window end is exclusive and clipped by the session end.
        let ev = vec![meas(4.0, "pf_ratio", 70.0), meas(5.0, "pf_ratio", 75.0)];
        assert_eq!(extract_outcome(&session(0.0, 5.0, Position::Prone), &ev, Outcome::Early, &rules).map(|o| o.0), Some(70.0));
    }

    fn baseline(pf: f64, fio2: f64, peep: f64, hours: f64, t: u8) -> Observation {
        let spec = CovariateSpec::default();
        let mut x = vec![None; spec.entries.len()];
        x[spec.index_of("pao2").unwrap()] = Some(70.0);
        x[spec.index_of("pf_ratio").unwrap()] = Some(pf);
        x[spec.index_of("fio2").unwrap()] = Some(fio2);
        x[spec.index_of("peep").unwrap()] = Some(peep);
        Observation {
            patient_id: "p".into(),
            session_start: Some(at(0.0)),
            session_end: Some(at(hours)),
            provenance: Some(Provenance::Original),
            x,
            t,
            y_early: None,
            y_late: None,
            covariate_time: None,
            outcome_times: [None, None],
        }
    }

    #[test]
    fn inclusion_boundaries() {
        let spec = CovariateSpec::default();
        let rules = CohortRules::default();
        let v = |o: Observation| inclusion_verdict(&o, &spec, &rules);
        assert_eq!(v(baseline(150.0, 80.0, 10.0, 20.0, 0)), Verdict::PfTooHigh);
        assert_eq!(v(baseline(149.0, 60.0, 5.0, 20.0, 0)), Verdict::Keep);
        assert_eq!(v(baseline(149.0, 59.9, 5.0, 20.0, 0)), Verdict::Fio2TooLow);
        assert_eq!(v(baseline(149.0, 60.0, 4.9, 20.0, 0)), Verdict::PeepTooLow);
        assert_eq!(v(baseline(100.0, 80.0, 10.0, 97.0, 1)), Verdict::ProneTooLong);
        assert_eq!(v(baseline(100.0, 80.0, 10.0, 96.0, 1)), Verdict::Keep);
        assert_eq!(v(baseline(100.0, 80.0, 10.0, 97.0, 0)), Verdict::Keep);
        let mut missing = baseline(100.0, 80.0, 10.0, 20.0, 0);
        missing.x[spec.index_of("pao2").unwrap()] = None;
        assert_eq!(v(missing), Verdict::MissingBaseline);
    }

    #[test]
    fn funnel_counts() {
        let spec = CovariateSpec::default();
        let rows = vec![baseline(150.0, 80.0, 10.0, 20.0, 0), baseline(100.0, 80.0, 10.0, 20.0, 1), baseline(100.0, 80.0, 10.0, 99.0, 1)];
        let (kept, f) = apply_inclusion(rows, &spec, &CohortRules::default());
        assert_eq!(kept.len(), 1);
        assert_eq!((f.candidates, f.pf_too_high, f.prone_too_long, f.kept), (3, 1, 1, 1));
    }

    #[test]
    fn imputation_uses_training_rows_only() {
        let names = vec!["peep".to_string(), "copd".to_string()];
        let kinds = [CovariateKind::Numeric, CovariateKind::Binary];
        let rows: Vec<Vec<Option<f64>>> = vec![
            vec![Some(10.0), Some(1.0)],
            vec![Some(20.0), None],
            vec![None, None],
            vec![Some(40.0), Some(1.0)],
            vec![Some(50.0), Some(0.0)],
        ];
        let train: Vec<&[Option<f64>]> = rows[..3].iter().map(Vec::as_slice).collect();
        let stats = fit_impute(&train, &names, &kinds).unwrap();
        // train mean (10 + 20) / 2 = 15; over all five rows it would be 30.
        assert_eq!(stats.fill, vec![15.0, 0.0]);
        assert_eq!(apply_impute(&rows[2], &stats), vec![15.0, 0.0]);
        let once: Vec<Option<f64>> = apply_impute(&rows[1], &stats).into_iter().map(Some).collect();
        assert_eq!(apply_impute(&once, &stats), apply_impute(&rows[1], &stats));

        let empty: Vec<&[Option<f64>]> = vec![&rows[2]];
        assert!(matches!(fit_impute(&empty, &names, &kinds), Err(Error::AllMissing(n)) if n == "peep"));
    }

    #[test]
    fn split_contract() {
        let s = split(100, 7, 0.2, 0.3).unwrap();
        assert_eq!(s.test.len(), 20);
        assert_eq!(s.validation.len(), 24);
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(s, split(100, 7, 0.2, 0.3).unwrap());
        assert_ne!(s.test, split(100, 8, 0.2, 0.3).unwrap().test);
        assert!(split(9, 7, 0.2, 0.3).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let spec = CovariateSpec::default();
        let mut o = baseline(100.0, 80.0, 10.0, 20.0, 1);
        o.y_early = Some(120.5);
        let cohort = Cohort { names: spec.names(), kinds: spec.kinds(), observations: vec![o.clone()] };
        let mut buf = Vec::new();
        write_cohort(&mut buf, &cohort, &[("y1", &[3.0])]).unwrap();
        let back = read_cohort(buf.as_slice()).unwrap();
        assert_eq!(back.names, cohort.names);
        let b = &back.observations[0];
        assert_eq!((b.x.clone(), b.t, b.y_early, b.y_late), (o.x, o.t, o.y_early, o.y_late));
        assert_eq!((b.session_start, b.session_end, b.provenance), (o.session_start, o.session_end, o.provenance));
    }
}
