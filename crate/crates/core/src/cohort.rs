//! Screening cohort data model: per-image density records, visit-level
//! aggregation, subject assembly on the age timescale and CSV I/O.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    CC,
    MLO,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Manufacturer {
    Hologic,
    GEHC,
}

impl Manufacturer {
    /// Indicator entering the longitudinal design (Hologic vs GEHC).
    pub fn indicator(self) -> f64 {
        match self {
            Manufacturer::Hologic => 1.0,
            Manufacturer::GEHC => 0.0,
        }
    }
}

macro_rules! enum_text {
    ($ty:ty, $($variant:ident => $text:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                match self { $(Self::$variant => f.write_str($text)),+ }
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.trim() {
                    $($text => Ok(Self::$variant),)+
                    other => Err(format!("unknown {} value `{}`", stringify!($ty), other)),
                }
            }
        }
    };
}

enum_text!(Side, Left => "Left", Right => "Right");
enum_text!(View, CC => "CC", MLO => "MLO");
enum_text!(Manufacturer, Hologic => "Hologic", GEHC => "GEHC");

/// One processed mammogram as scored by the segmentation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDensityRecord {
    pub subject_id: String,
    pub visit_index: u32,
    pub age_at_visit: f64,
    pub side: Side,
    pub view: View,
    /// cm²
    pub dense_area: f64,
    /// cm²
    pub breast_area: f64,
    pub manufacturer: Manufacturer,
    pub center: u8,
}

impl ImageDensityRecord {
    pub fn percent_density(&self) -> f64 {
        100.0 * self.dense_area / self.breast_area
    }

    fn validate(&self) -> Result<()> {
        let ok = self.dense_area.is_finite()
            && self.breast_area.is_finite()
            && self.age_at_visit.is_finite()
            && self.dense_area >= 0.0
            && self.breast_area > 0.0
            && self.dense_area <= self.breast_area;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidRecord(format!(
                "subject {} visit {} {} {}: dense {} / breast {}",
                self.subject_id,
                self.visit_index,
                self.side,
                self.view,
                self.dense_area,
                self.breast_area
            )))
        }
    }
}

/// Visit-level summary of the (up to four) images of one screening visit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisitMeasurement {
    pub age: f64,
    pub dense_area_total: f64,
    pub percent_density_avg: f64,
}

/// Aggregates the images of one subject-visit: views are averaged within each
/// breast, then dense area is summed and percent density averaged across breasts.
pub fn aggregate_visit(records: &[ImageDensityRecord]) -> Result<VisitMeasurement> {
    let first = records
        .first()
        .ok_or(Error::EmptyInput("visit without images"))?;
    let mut da = [(0.0, 0usize); 2];
    let mut pd = [0.0; 2];
    for r in records {
        if r.subject_id != first.subject_id || r.visit_index != first.visit_index {
            return Err(Error::InvalidRecord(format!(
                "records from different visits: ({}, {}) vs ({}, {})",
                first.subject_id, first.visit_index, r.subject_id, r.visit_index
            )));
        }
        r.validate()?;
        let k = match r.side {
            Side::Left => 0,
            Side::Right => 1,
        };
        da[k].0 += r.dense_area;
        da[k].1 += 1;
        pd[k] += r.percent_density();
    }
    if da.iter().any(|(_, n)| *n == 0) {
        return Err(Error::IncompleteVisit {
            subject_id: first.subject_id.clone(),
            visit_index: first.visit_index,
        });
    }
    let per_breast_da = [da[0].0 / da[0].1 as f64, da[1].0 / da[1].1 as f64];
    let per_breast_pd = [pd[0] / da[0].1 as f64, pd[1] / da[1].1 as f64];
    Ok(VisitMeasurement {
        age: first.age_at_visit,
        dense_area_total: per_breast_da[0] + per_breast_da[1],
        percent_density_avg: 0.5 * (per_breast_pd[0] + per_breast_pd[1]),
    })
}

/// A biomarker value observed at a given age, on the modeled scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub age: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    /// Entry age: age at the first screening visit.
    pub t0: f64,
    /// Baseline-age covariate (equals `t0` for screening data).
    pub age0: f64,
    /// Manufacturer indicator (1 = Hologic).
    pub manuf: f64,
    /// Baseline survival covariates; empty for the screening model.
    #[serde(default)]
    pub survival_covariates: Vec<f64>,
    pub observations: Vec<Observation>,
    pub event_age: f64,
    pub event: bool,
}

impl SubjectRecord {
    pub fn n_obs(&self) -> usize {
        self.observations.len()
    }

    pub fn last_age(&self) -> f64 {
        self.observations.last().map_or(self.t0, |o| o.age)
    }

    /// Copy of the subject with observations after `landmark` removed.
    pub fn truncated_at(&self, landmark: f64) -> SubjectRecord {
        let mut s = self.clone();
        s.observations.retain(|o| o.age <= landmark);
        s
    }

    pub fn check(&self) -> Result<()> {
        let bad = |msg: &str| Error::InvalidRecord(format!("subject {}: {msg}", self.subject_id));
        if let Some(first) = self.observations.first() {
            if first.age != self.t0 {
                return Err(bad("entry age differs from first visit age"));
            }
        }
        if self
            .observations
            .windows(2)
            .any(|w| !(w[0].age < w[1].age))
        {
            return Err(bad("visit ages not strictly increasing"));
        }
        if self.event_age < self.t0 {
            return Err(Error::EventBeforeEntry(self.subject_id.clone()));
        }
        if self.event_age < self.last_age() {
            return Err(bad("event age precedes last visit"));
        }
        if self
            .observations
            .iter()
            .any(|o| !o.value.is_finite() || !o.age.is_finite())
        {
            return Err(bad("non-finite measurement"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum BiomarkerKind {
    #[default]
    DenseArea,
    PercentDensity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Transform {
    #[default]
    None,
    Sqrt,
}

/// Immutable collection of subjects ready for modeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub subjects: Vec<SubjectRecord>,
    pub biomarker_kind: BiomarkerKind,
    pub transform: Transform,
}

impl Cohort {
    pub fn new(
        subjects: Vec<SubjectRecord>,
        biomarker_kind: BiomarkerKind,
        transform: Transform,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &subjects {
            if !seen.insert(s.subject_id.as_str()) {
                return Err(Error::InvalidRecord(format!(
                    "duplicate subject id {}",
                    s.subject_id
                )));
            }
            s.check()?;
        }
        Ok(Cohort {
            subjects,
            biomarker_kind,
            transform,
        })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn n_events(&self) -> usize {
        self.subjects.iter().filter(|s| s.event).count()
    }

    pub fn event_ages(&self) -> Vec<f64> {
        self.subjects
            .iter()
            .filter(|s| s.event)
            .map(|s| s.event_age)
            .collect()
    }

    /// (min entry age, max exit age).
    pub fn age_span(&self) -> Option<(f64, f64)> {
        let lo = self.subjects.iter().map(|s| s.t0).reduce(f64::min)?;
        let hi = self.subjects.iter().map(|s| s.event_age).reduce(f64::max)?;
        Some((lo, hi))
    }

    /// Sub-cohort with the subjects at the given indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            biomarker_kind: self.biomarker_kind,
            transform: self.transform,
        }
    }

    pub fn find(&self, subject_id: &str) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.subject_id == subject_id)
    }
}

/// Observed outcome for one subject, as supplied by the events file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_age: f64,
    pub event: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub subject_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub biomarker_kind: BiomarkerKind,
    pub transform: Transform,
    /// Restrict to entry ages in [40, 74].
    pub paper_selection: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            biomarker_kind: BiomarkerKind::DenseArea,
            transform: Transform::Sqrt,
            paper_selection: false,
        }
    }
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Assembles subjects from image-level records and outcomes.
///
/// Returns the cohort together with the subjects that were dropped and why.
/// Visits mixing manufacturers are rejected (the visit is dropped). Censored
/// subjects get their last visit age as exit age; observations after an event
/// are discarded.
pub fn build_cohort(
    images: &[ImageDensityRecord],
    events: &HashMap<String, EventRecord>,
    options: BuildOptions,
) -> Result<(Cohort, Vec<Exclusion>)> {
    let mut seen = HashSet::new();
    let mut by_subject: BTreeMap<&str, BTreeMap<u32, Vec<ImageDensityRecord>>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for r in images {
        let key = (r.subject_id.as_str(), r.visit_index, r.side, r.view);
        if !seen.insert(key) {
            return Err(Error::DuplicateImage {
                subject_id: r.subject_id.clone(),
                visit_index: r.visit_index,
                side: r.side.to_string(),
                view: r.view.to_string(),
            });
        }
        if !by_subject.contains_key(r.subject_id.as_str()) {
            order.push(r.subject_id.as_str());
        }
        by_subject
            .entry(r.subject_id.as_str())
            .or_default()
            .entry(r.visit_index)
            .or_default()
            .push(r.clone());
    }

    let mut subjects = Vec::new();
    let mut excluded = Vec::new();
    for id in order {
        let visits = &by_subject[id];
        let outcome = events
            .get(id)
            .ok_or_else(|| Error::MissingEvents(id.to_string()))?;
        let mut measured: Vec<(VisitMeasurement, Manufacturer)> = Vec::new();
        for recs in visits.values() {
            let manuf = recs[0].manufacturer;
            if recs.iter().any(|r| r.manufacturer != manuf) {
                log::warn!("subject {id}: visit {} mixes manufacturers, dropped", recs[0].visit_index);
                continue;
            }
            if recs
                .iter()
                .any(|r| (r.age_at_visit - recs[0].age_at_visit).abs() > 1e-6)
            {
                return Err(Error::InvalidRecord(format!(
                    "subject {id} visit {}: inconsistent ages",
                    recs[0].visit_index
                )));
            }
            let mut vm = aggregate_visit(recs)?;
            vm.age = round4(vm.age);
            measured.push((vm, manuf));
        }
        measured.sort_by(|a, b| a.0.age.total_cmp(&b.0.age));
        if measured.windows(2).any(|w| w[0].0.age == w[1].0.age) {
            excluded.push(Exclusion {
                subject_id: id.to_string(),
                reason: "duplicate visit ages".into(),
            });
            continue;
        }
        let Some((first, baseline_manuf)) = measured.first().copied() else {
            excluded.push(Exclusion {
                subject_id: id.to_string(),
                reason: "fewer than two visits".into(),
            });
            continue;
        };
        let t0 = first.age;
        let event_age = round4(outcome.event_age);
        if event_age < t0 {
            return Err(Error::EventBeforeEntry(id.to_string()));
        }
        let mut obs: Vec<Observation> = Vec::with_capacity(measured.len());
        for (vm, _) in &measured {
            let raw = match options.biomarker_kind {
                BiomarkerKind::DenseArea => vm.dense_area_total,
                BiomarkerKind::PercentDensity => vm.percent_density_avg,
            };
            let value = match options.transform {
                Transform::None => raw,
                Transform::Sqrt => raw.sqrt(),
            };
            obs.push(Observation { age: vm.age, value });
        }
        if outcome.event {
            obs.retain(|o| o.age <= event_age);
        }
        if obs.len() < 2 {
            excluded.push(Exclusion {
                subject_id: id.to_string(),
                reason: "fewer than two visits".into(),
            });
            continue;
        }
        if options.paper_selection && !(40.0..=74.0).contains(&t0) {
            excluded.push(Exclusion {
                subject_id: id.to_string(),
                reason: "entry age outside [40, 74]".into(),
            });
            continue;
        }
        let last = obs.last().map(|o| o.age).unwrap_or(t0);
        let exit = if outcome.event { event_age } else { last };
        subjects.push(SubjectRecord {
            subject_id: id.to_string(),
            t0,
            age0: t0,
            manuf: baseline_manuf.indicator(),
            survival_covariates: Vec::new(),
            observations: obs,
            event_age: exit,
            event: outcome.event,
        });
    }
    let cohort = Cohort::new(subjects, options.biomarker_kind, options.transform)?;
    Ok((cohort, excluded))
}

// ---------------------------------------------------------------------------
// CSV I/O

struct Columns {
    index: HashMap<String, usize>,
}

impl Columns {
    fn new(headers: &csv::StringRecord, required: &[&str]) -> Result<Self> {
        let index: HashMap<String, usize> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect();
        for name in required {
            if !index.contains_key(*name) {
                return Err(Error::MissingColumn((*name).to_string()));
            }
        }
        Ok(Columns { index })
    }

    fn get<'r>(&self, rec: &'r csv::StringRecord, name: &str, line: u64) -> Result<&'r str> {
        rec.get(self.index[name])
            .map(str::trim)
            .ok_or_else(|| Error::Csv {
                line,
                message: format!("missing field `{name}`"),
            })
    }

    fn parse<T: FromStr>(&self, rec: &csv::StringRecord, name: &str, line: u64) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.get(rec, name, line)?;
        raw.parse::<T>().map_err(|e| Error::Csv {
            line,
            message: format!("field `{name}` = `{raw}`: {e}"),
        })
    }
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(csv_err)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Csv {
            line,
            message: format!("{other:?}"),
        },
    }
}

fn parse_indicator(raw: &str, line: u64) -> Result<bool> {
    match raw {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Csv {
            line,
            message: format!("event_indicator must be 0 or 1, got `{other}`"),
        }),
    }
}

const IMAGE_COLUMNS: [&str; 9] = [
    "subject_id",
    "visit_index",
    "age",
    "side",
    "view",
    "dense_area_cm2",
    "breast_area_cm2",
    "manufacturer",
    "center",
];

pub fn read_images_csv(path: impl AsRef<Path>) -> Result<Vec<ImageDensityRecord>> {
    let mut rdr = reader(path.as_ref())?;
    let cols = Columns::new(rdr.headers().map_err(csv_err)?, &IMAGE_COLUMNS)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let center: u8 = cols.parse(&rec, "center", line)?;
        if !(1..=2).contains(&center) {
            return Err(Error::Csv {
                line,
                message: format!("unknown center {center}"),
            });
        }
        out.push(ImageDensityRecord {
            subject_id: cols.get(&rec, "subject_id", line)?.to_string(),
            visit_index: cols.parse(&rec, "visit_index", line)?,
            age_at_visit: cols.parse(&rec, "age", line)?,
            side: cols.parse(&rec, "side", line)?,
            view: cols.parse(&rec, "view", line)?,
            dense_area: cols.parse(&rec, "dense_area_cm2", line)?,
            breast_area: cols.parse(&rec, "breast_area_cm2", line)?,
            manufacturer: cols.parse(&rec, "manufacturer", line)?,
            center,
        });
    }
    Ok(out)
}

pub fn read_events_csv(path: impl AsRef<Path>) -> Result<HashMap<String, EventRecord>> {
    let mut rdr = reader(path.as_ref())?;
    let cols = Columns::new(
        rdr.headers().map_err(csv_err)?,
        &["subject_id", "event_age", "event_indicator"],
    )?;
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = cols.get(&rec, "subject_id", line)?.to_string();
        let event = parse_indicator(cols.get(&rec, "event_indicator", line)?, line)?;
        let event_age: f64 = cols.parse(&rec, "event_age", line)?;
        if out.insert(id.clone(), EventRecord { event_age, event }).is_some() {
            return Err(Error::Csv {
                line,
                message: format!("duplicate subject {id}"),
            });
        }
    }
    Ok(out)
}

const COHORT_COLUMNS: [&str; 8] = [
    "subject_id",
    "age",
    "y_value",
    "t0",
    "age0",
    "manuf",
    "event_age",
    "event_indicator",
];

/// Reads a visit-level cohort file. Rows of one subject must be contiguous.
pub fn read_cohort_csv(path: impl AsRef<Path>) -> Result<Cohort> {
    let mut rdr = reader(path.as_ref())?;
    let cols = Columns::new(rdr.headers().map_err(csv_err)?, &COHORT_COLUMNS)?;
    let mut subjects: Vec<SubjectRecord> = Vec::new();
    let mut closed = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = cols.get(&rec, "subject_id", line)?;
        let obs = Observation {
            age: cols.parse(&rec, "age", line)?,
            value: cols.parse(&rec, "y_value", line)?,
        };
        let t0: f64 = cols.parse(&rec, "t0", line)?;
        let age0: f64 = cols.parse(&rec, "age0", line)?;
        let manuf: f64 = cols.parse(&rec, "manuf", line)?;
        let event_age: f64 = cols.parse(&rec, "event_age", line)?;
        let event = parse_indicator(cols.get(&rec, "event_indicator", line)?, line)?;
        match subjects.last_mut() {
            Some(s) if s.subject_id == id => {
                if s.t0 != t0
                    || s.age0 != age0
                    || s.manuf != manuf
                    || s.event_age != event_age
                    || s.event != event
                {
                    return Err(Error::Csv {
                        line,
                        message: format!("subject {id}: subject-level fields differ between rows"),
                    });
                }
                s.observations.push(obs);
            }
            _ => {
                if let Some(prev) = subjects.last() {
                    closed.insert(prev.subject_id.clone());
                }
                if closed.contains(id) {
                    return Err(Error::Csv {
                        line,
                        message: format!("rows of subject {id} are not contiguous"),
                    });
                }
                subjects.push(SubjectRecord {
                    subject_id: id.to_string(),
                    t0,
                    age0,
                    manuf,
                    survival_covariates: Vec::new(),
                    observations: vec![obs],
                    event_age,
                    event,
                });
            }
        }
    }
    Cohort::new(subjects, BiomarkerKind::default(), Transform::None)
}

pub fn write_cohort_csv(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    w.write_record(COHORT_COLUMNS).map_err(csv_err)?;
    for s in &cohort.subjects {
        for o in &s.observations {
            w.write_record([
                s.subject_id.clone(),
                o.age.to_string(),
                o.value.to_string(),
                s.t0.to_string(),
                s.age0.to_string(),
                s.manuf.to_string(),
                s.event_age.to_string(),
                if s.event { "1" } else { "0" }.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
