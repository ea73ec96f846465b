//! Two-arm trial data: CSV ingestion, complete-case filtering and validation.
//!
//! The interchange format is comma-separated UTF-8 with a header row and `.`
//! as decimal separator. Default columns are `id, arm, time, event` followed
//! by the predictor columns; `arm` is `0` (control) or `1` (treated) and
//! `event` is `1` (death observed) or `0` (censored).

use std::collections::HashSet;
use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Control,
    Treated,
}

impl Arm {
    pub fn code(self) -> u8 {
        match self {
            Arm::Control => 0,
            Arm::Treated => 1,
        }
    }

    pub fn from_code(s: &str) -> Option<Arm> {
        match s.trim() {
            "0" => Some(Arm::Control),
            "1" => Some(Arm::Treated),
            _ => None,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Control => f.write_str("control"),
            Arm::Treated => f.write_str("treated"),
        }
    }
}

/// How the raw survival time maps to the endpoint used for moment estimation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointTransform {
    #[default]
    Identity,
    Log,
}

impl EndpointTransform {
    pub fn apply(self, time: f64) -> f64 {
        match self {
            EndpointTransform::Identity => time,
            EndpointTransform::Log => time.ln(),
        }
    }

    pub fn invert(self, endpoint: f64) -> f64 {
        match self {
            EndpointTransform::Identity => endpoint,
            EndpointTransform::Log => endpoint.exp(),
        }
    }
}

impl std::str::FromStr for EndpointTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(EndpointTransform::Identity),
            "log" => Ok(EndpointTransform::Log),
            other => Err(Error::Validation(format!(
                "unknown endpoint transform `{other}` (expected identity or log)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub arm: Arm,
    /// Raw survival time (months), used by the survival module.
    pub time: f64,
    /// `time` after the dataset's endpoint transform, used for moments.
    pub outcome: f64,
    /// `true` when death was observed, `false` when censored.
    pub event: bool,
    pub predictors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    predictor_names: Vec<String>,
    records: Vec<PatientRecord>,
    endpoint_transform: EndpointTransform,
    dropped_rows: usize,
}

impl Dataset {
    /// Builds a dataset after structural checks: non-empty unique predictor
    /// names, aligned predictor vectors, unique ids, finite positive times.
    ///
    /// Per-arm sufficiency is not checked here; see [`Dataset::check_usable`].
    pub fn new(
        predictor_names: Vec<String>,
        records: Vec<PatientRecord>,
        endpoint_transform: EndpointTransform,
    ) -> Result<Self> {
        if predictor_names.is_empty() {
            return Err(Error::Validation("at least one predictor is required".into()));
        }
        let mut seen = HashSet::new();
        for name in &predictor_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Validation(format!("duplicate predictor name `{name}`")));
            }
        }
        let p = predictor_names.len();
        let mut ids = HashSet::new();
        for r in &records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("duplicate patient id `{}`", r.id)));
            }
            if r.predictors.len() != p {
                return Err(Error::Validation(format!(
                    "patient `{}` has {} predictor values, expected {p}",
                    r.id,
                    r.predictors.len()
                )));
            }
            if !(r.time.is_finite() && r.time > 0.0) {
                return Err(Error::Validation(format!(
                    "patient `{}` has non-positive time {}",
                    r.id, r.time
                )));
            }
            if r.predictors.iter().any(|v| !v.is_finite()) || !r.outcome.is_finite() {
                return Err(Error::Validation(format!(
                    "patient `{}` has a non-finite value",
                    r.id
                )));
            }
        }
        Ok(Dataset {
            predictor_names,
            records,
            endpoint_transform,
            dropped_rows: 0,
        })
    }

    /// Builds records from raw `(id, arm, time, event, predictors)` tuples,
    /// deriving each outcome through `transform`.
    pub fn from_raw<I>(
        predictor_names: Vec<String>,
        rows: I,
        transform: EndpointTransform,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Arm, f64, bool, Vec<f64>)>,
    {
        let records = rows
            .into_iter()
            .map(|(id, arm, time, event, predictors)| PatientRecord {
                id,
                arm,
                time,
                outcome: transform.apply(time),
                event,
                predictors,
            })
            .collect();
        Dataset::new(predictor_names, records, transform)
    }

    /// Errors unless each arm has at least two records.
    pub fn check_usable(&self) -> Result<()> {
        for arm in [Arm::Control, Arm::Treated] {
            let n = self.arm_count(arm);
            if n < 2 {
                return Err(Error::InsufficientData(format!(
                    "{arm} arm has {n} usable rows, at least 2 required"
                )));
            }
        }
        Ok(())
    }

    pub fn predictor_names(&self) -> &[String] {
        &self.predictor_names
    }

    pub fn p(&self) -> usize {
        self.predictor_names.len()
    }

    pub fn records(&self) -> &[PatientRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn endpoint_transform(&self) -> EndpointTransform {
        self.endpoint_transform
    }

    /// Rows removed during ingestion because a mapped cell was missing or invalid.
    pub fn dropped_rows(&self) -> usize {
        self.dropped_rows
    }

    pub fn arm_count(&self, arm: Arm) -> usize {
        self.records.iter().filter(|r| r.arm == arm).count()
    }

    pub fn predictor_index(&self, name: &str) -> Option<usize> {
        self.predictor_names.iter().position(|n| n == name)
    }

    /// Returns a copy with predictor `j` replaced by `scale * x + shift`.
    pub fn map_predictor(&self, j: usize, scale: f64, shift: f64) -> Dataset {
        let mut out = self.clone();
        for r in &mut out.records {
            r.predictors[j] = scale * r.predictors[j] + shift;
        }
        out
    }

    /// Returns a copy keeping only the predictor columns in `keep` (in that order).
    pub fn select_predictors(&self, keep: &[usize]) -> Result<Dataset> {
        let names = keep.iter().map(|&j| self.predictor_names[j].clone()).collect();
        let records = self
            .records
            .iter()
            .map(|r| PatientRecord {
                predictors: keep.iter().map(|&j| r.predictors[j]).collect(),
                ..r.clone()
            })
            .collect();
        let mut ds = Dataset::new(names, records, self.endpoint_transform)?;
        ds.dropped_rows = self.dropped_rows;
        Ok(ds)
    }
}

/// Maps logical fields onto CSV header names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub id: String,
    pub arm: String,
    pub time: String,
    pub event: String,
    /// Predictor columns in order; `None` means every other column in header order.
    pub predictors: Option<Vec<String>>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            id: "id".into(),
            arm: "arm".into(),
            time: "time".into(),
            event: "event".into(),
            predictors: None,
        }
    }
}

/// Reads a CSV file and returns a dataset that passed [`Dataset::check_usable`].
pub fn load_csv(path: &Path, mapping: &ColumnMapping, transform: EndpointTransform) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let ds = read_csv(file, mapping, transform)?;
    ds.check_usable()?;
    Ok(ds)
}

/// Parses CSV without the per-arm sufficiency check (used by `validate`).
pub fn read_csv<R: Read>(
    reader: R,
    mapping: &ColumnMapping,
    transform: EndpointTransform,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let locate = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_owned(),
            })
    };
    let id_col = locate(&mapping.id)?;
    let arm_col = locate(&mapping.arm)?;
    let time_col = locate(&mapping.time)?;
    let event_col = locate(&mapping.event)?;
    let fixed = [id_col, arm_col, time_col, event_col];

    let predictor_names: Vec<String> = match &mapping.predictors {
        Some(list) => list.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|(i, _)| !fixed.contains(i))
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let predictor_cols = predictor_names
        .iter()
        .map(|n| locate(n))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    let mut dropped = 0usize;
    for row in rdr.records() {
        let row = row?;
        match parse_row(&row, id_col, arm_col, time_col, event_col, &predictor_cols, transform) {
            Some(rec) => records.push(rec),
            None => dropped += 1,
        }
    }
    let mut ds = Dataset::new(predictor_names, records, transform)?;
    ds.dropped_rows = dropped;
    Ok(ds)
}

fn parse_row(
    row: &csv::StringRecord,
    id_col: usize,
    arm_col: usize,
    time_col: usize,
    event_col: usize,
    predictor_cols: &[usize],
    transform: EndpointTransform,
) -> Option<PatientRecord> {
    let id = row.get(id_col)?.to_owned();
    if id.is_empty() {
        return None;
    }
    let arm = Arm::from_code(row.get(arm_col)?)?;
    let time = parse_finite(row.get(time_col)?)?;
    if time <= 0.0 {
        return None;
    }
    let event = match row.get(event_col)? {
        "1" => true,
        "0" => false,
        _ => return None,
    };
    let predictors = predictor_cols
        .iter()
        .map(|&c| row.get(c).and_then(parse_finite))
        .collect::<Option<Vec<f64>>>()?;
    let outcome = transform.apply(time);
    outcome.is_finite().then_some(PatientRecord {
        id,
        arm,
        time,
        outcome,
        event,
        predictors,
    })
}

fn parse_finite(cell: &str) -> Option<f64> {
    cell.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads `id` plus the `required` predictor columns of `names` for scoring.
/// Returns full-length vectors; columns outside `required` are NaN when absent.
/// Unlike [`read_csv`], malformed rows are errors rather than dropped.
pub fn read_predictor_table<R: Read>(
    reader: R,
    id_column: &str,
    names: &[String],
    required: &[usize],
) -> Result<Vec<(String, Vec<f64>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let find = |name: &str| header.iter().position(|h| h == name);
    let id_col = find(id_column).ok_or_else(|| Error::MissingColumn {
        column: id_column.to_owned(),
    })?;
    let mut cols = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        let c = find(name);
        if c.is_none() && required.contains(&j) {
            return Err(Error::MissingColumn { column: name.clone() });
        }
        cols.push(c);
    }
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row?;
        let id = row.get(id_col).unwrap_or_default().to_owned();
        if id.is_empty() || !seen.insert(id.clone()) {
            return Err(Error::Validation(format!(
                "row {}: patient id is empty or repeated",
                line + 2
            )));
        }
        let mut values = vec![f64::NAN; names.len()];
        for (j, c) in cols.iter().enumerate() {
            let Some(c) = c else { continue };
            match row.get(*c).and_then(parse_finite) {
                Some(v) => values[j] = v,
                None if required.contains(&j) => {
                    return Err(Error::Validation(format!(
                        "row {}: `{}` is not a finite number",
                        line + 2,
                        names[j]
                    )))
                }
                None => {}
            }
        }
        out.push((id, values));
    }
    Ok(out)
}

/// Writes a dataset back out in the default column layout.
pub fn write_csv<W: std::io::Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_owned(), "arm".into(), "time".into(), "event".into()];
    header.extend(ds.predictor_names.iter().cloned());
    w.write_record(&header)?;
    for r in &ds.records {
        let mut row = vec![
            r.id.clone(),
            r.arm.code().to_string(),
            format_number(r.time),
            if r.event { "1".into() } else { "0".into() },
        ];
        row.extend(r.predictors.iter().map(|&v| format_number(v)));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

/// 17 significant digits, enough for an exact f64 round trip.
pub fn format_number(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub n: usize,
    pub n_uncensored: usize,
    /// Uncensored rows ≥ p + 2, the minimum for moment estimation.
    pub sufficient_for_moments: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnSummary {
    pub name: String,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub constant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub n_records: usize,
    pub dropped_rows: usize,
    pub p: usize,
    pub required_uncensored_per_arm: usize,
    pub arms: Vec<ArmSummary>,
    pub columns: Vec<ColumnSummary>,
    pub constant_columns: Vec<String>,
    pub endpoint_transform: EndpointTransform,
}

impl ValidationReport {
    pub fn is_sufficient(&self) -> bool {
        self.arms.iter().all(|a| a.sufficient_for_moments) && self.constant_columns.is_empty()
    }
}

pub fn validate(ds: &Dataset) -> ValidationReport {
    let p = ds.p();
    let required = p + 2;
    let arms = [Arm::Control, Arm::Treated]
        .into_iter()
        .map(|arm| {
            let n = ds.arm_count(arm);
            let n_uncensored = ds.records.iter().filter(|r| r.arm == arm && r.event).count();
            ArmSummary {
                arm,
                n,
                n_uncensored,
                sufficient_for_moments: n_uncensored >= required,
            }
        })
        .collect();
    let columns: Vec<ColumnSummary> = ds
        .predictor_names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let values = ds.records.iter().map(|r| r.predictors[j]);
            let min = values.clone().reduce(f64::min);
            let max = values.reduce(f64::max);
            let constant = match (min, max) {
                (Some(lo), Some(hi)) => lo == hi,
                _ => false,
            };
            ColumnSummary {
                name: name.clone(),
                min,
                max,
                constant,
            }
        })
        .collect();
    let constant_columns = columns
        .iter()
        .filter(|c| c.constant)
        .map(|c| c.name.clone())
        .collect();
    ValidationReport {
        n_records: ds.len(),
        dropped_rows: ds.dropped_rows,
        p,
        required_uncensored_per_arm: required,
        arms,
        columns,
        constant_columns,
        endpoint_transform: ds.endpoint_transform,
    }
}
