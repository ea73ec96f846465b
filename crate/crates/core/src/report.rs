//! JSON report document, output files and number formatting.

use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::causal::{Accuracy, PciProfile, Subset};
use crate::dataset::{ColumnMapping, EndpointTransform, ValidationReport};
use crate::error::{Error, Result};
use crate::moments::MomentEstimates;
use crate::pipeline::{Analysis, AnalysisConfig, SelectionRule};
use crate::plot;
use crate::responders::{ResponderClass, SuccessCurve};
use crate::search::{ChampionCriterion, SearchResult, SearchRow};
use crate::survival::SubgroupAudit;

pub const REPORT_SCHEMA_VERSION: &str = "1.0";

/// JSON Schema for `report.json`.
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

pub const REPORT_FILE: &str = "report.json";
pub const MODEL_FILE: &str = "model.json";
pub const SEARCH_CSV_FILE: &str = "search.csv";
pub const SEARCH_JSON_FILE: &str = "search.json";
pub const FIG_PCI_FILE: &str = "pci_by_cardinality.svg";
pub const FIG_SUCCESS_FILE: &str = "success_by_rho.svg";
pub const FIG_SURVIVAL_FILE: &str = "survival_by_class.svg";

pub const CENSORING_POLICY: &str = "Censored records are excluded from moment estimation. \
Kaplan-Meier curves and log-rank tests use every record with its censoring flag.";

/// Pretty JSON whose floats carry 17 significant digits; non-finite values become null.
struct SigFormatter<'a> {
    inner: PrettyFormatter<'a>,
}

macro_rules! delegate {
    ($($name:ident($($arg:ident: $ty:ty),*);)*) => {
        $(
            fn $name<W: ?Sized + io::Write>(&mut self, w: &mut W $(, $arg: $ty)*) -> io::Result<()> {
                self.inner.$name(w $(, $arg)*)
            }
        )*
    };
}

impl Formatter for SigFormatter<'_> {
    delegate! {
        begin_array();
        end_array();
        begin_array_value(first: bool);
        end_array_value();
        begin_object();
        end_object();
        begin_object_key(first: bool);
        begin_object_value();
        end_object_value();
    }

    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            write!(w, "{value:.16e}")
        } else {
            w.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, f64::from(value))
    }
}

/// Serializes `value` with 17-significant-digit floats and a trailing newline.
pub fn to_json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let fmt = SigFormatter {
        inner: PrettyFormatter::with_indent(b"  "),
    };
    let mut ser = serde_json::Serializer::with_formatter(&mut out, fmt);
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct Generator {
    pub name: &'static str,
    pub version: &'static str,
}

impl Default for Generator {
    fn default() -> Self {
        Generator {
            name: "predcausal",
            version: env!("CARGO_PKG_VERSION"),
        }
    }
}

/// Configuration echo. The worker count is omitted: it cannot change results.
#[derive(Debug, Clone, Serialize)]
pub struct ReportConfig {
    pub input_file: String,
    pub column_mapping: ColumnMapping,
    pub rho_step: f64,
    pub threshold: f64,
    pub endpoint_transform: EndpointTransform,
    pub max_cardinality: Option<usize>,
    pub criterion: ChampionCriterion,
    pub seed: Option<u64>,
}

impl From<&AnalysisConfig> for ReportConfig {
    fn from(c: &AnalysisConfig) -> Self {
        ReportConfig {
            input_file: c
                .input
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            column_mapping: c.column_mapping.clone(),
            rho_step: c.rho_step,
            threshold: c.threshold,
            endpoint_transform: c.endpoint_transform,
            max_cardinality: c.max_cardinality,
            criterion: c.criterion,
            seed: c.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DataSection {
    pub validation: ValidationReport,
    pub censoring_policy: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridSection {
    pub count: usize,
    pub first: f64,
    pub last: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChampionRow {
    pub cardinality: usize,
    pub bitmask: Subset,
    pub predictors: Vec<String>,
    pub pci_min: f64,
    pub pci_mean: f64,
    pub pci_max: f64,
    pub accuracy: Accuracy,
    pub rho_low: f64,
    pub rho_high: f64,
    pub feasible_count: usize,
}

impl ChampionRow {
    fn new(p: &PciProfile, names: &[String]) -> ChampionRow {
        ChampionRow {
            cardinality: p.subset.len(),
            bitmask: p.subset,
            predictors: p.subset.names(names),
            pci_min: p.pci_min,
            pci_mean: p.pci_mean,
            pci_max: p.pci_max,
            accuracy: p.accuracy,
            rho_low: p.rhos[0],
            rho_high: p.rhos[p.rhos.len() - 1],
            feasible_count: p.rhos.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchSection {
    pub predictor_count: usize,
    pub subset_count: usize,
    /// `2^p − 1`, or the capped total when a maximum cardinality is set.
    pub expected_subset_count: u64,
    pub infeasible_count: usize,
    pub criterion: ChampionCriterion,
    pub threshold: f64,
    pub model_count_note: String,
    /// One entry per cardinality; null when every subset of that size is infeasible.
    pub champions: Vec<Option<ChampionRow>>,
}

pub fn model_count_note(p: usize, subset_count: usize) -> String {
    let full = (1u128 << p) - 1;
    let mut note = format!(
        "Exhaustive search over {p} candidate predictors has 2^{p} - 1 = {full} non-empty subsets; {subset_count} were evaluated."
    );
    if p == 13 {
        note.push_str(
            " A total of 8204 models for 13 candidate predictors does not match 2^13 - 1 = 8191 and cannot arise from enumerating non-empty subsets.",
        );
    }
    note
}

impl SearchSection {
    pub fn new(s: &SearchResult) -> SearchSection {
        let p = s.predictor_names.len();
        let cap = s.champions.len();
        let expected = (1..=cap as u64).map(|k| binomial(p as u64, k)).sum();
        SearchSection {
            predictor_count: p,
            subset_count: s.subset_count,
            expected_subset_count: expected,
            infeasible_count: s.infeasible_count,
            criterion: s.criterion,
            threshold: s.threshold,
            model_count_note: model_count_note(p, s.subset_count),
            champions: s
                .champions
                .iter()
                .map(|c| c.as_ref().map(|p| ChampionRow::new(p, &s.predictor_names)))
                .collect(),
        }
    }
}

fn binomial(n: u64, k: u64) -> u64 {
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionSection {
    pub rule: SelectionRule,
    pub bitmask: Subset,
    pub predictors: Vec<String>,
    pub cardinality: usize,
    pub profile: PciProfile,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ClassCounts {
    pub good: usize,
    pub rare: usize,
    pub bad: usize,
}

impl ClassCounts {
    pub fn of(curves: &[SuccessCurve]) -> ClassCounts {
        let mut c = ClassCounts::default();
        for curve in curves {
            match curve.classification {
                ResponderClass::Good => c.good += 1,
                ResponderClass::Rare => c.rare += 1,
                ResponderClass::Bad => c.bad += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResponderSection {
    pub counts: ClassCounts,
    pub patients: Vec<SuccessCurve>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema_version: &'static str,
    pub generator: Generator,
    pub config: ReportConfig,
    pub data: DataSection,
    pub moments: MomentEstimates,
    pub rho_grid: GridSection,
    pub search: SearchSection,
    pub selection: SelectionSection,
    pub responders: ResponderSection,
    pub survival: SubgroupAudit,
    pub artifacts: Vec<&'static str>,
}

impl Report {
    pub fn new(a: &Analysis, cfg: &AnalysisConfig) -> Report {
        let values = a.search.grid.values().to_vec();
        Report {
            schema_version: REPORT_SCHEMA_VERSION,
            generator: Generator::default(),
            config: cfg.into(),
            data: DataSection {
                validation: a.validation.clone(),
                censoring_policy: CENSORING_POLICY,
            },
            moments: a.moments.clone(),
            rho_grid: GridSection {
                count: values.len(),
                first: values[0],
                last: values[values.len() - 1],
                values,
            },
            search: SearchSection::new(&a.search),
            selection: SelectionSection {
                rule: a.rule,
                bitmask: a.scored.subset,
                predictors: a.scored.subset.names(&a.moments.predictor_names),
                cardinality: a.scored.subset.len(),
                profile: a.scored.clone(),
            },
            responders: ResponderSection {
                counts: ClassCounts::of(&a.curves),
                patients: a.curves.clone(),
            },
            survival: a.audit.clone(),
            artifacts: vec![
                REPORT_FILE,
                MODEL_FILE,
                SEARCH_CSV_FILE,
                SEARCH_JSON_FILE,
                FIG_PCI_FILE,
                FIG_SUCCESS_FILE,
                FIG_SURVIVAL_FILE,
            ],
        }
    }
}

/// Full per-subset table, as written to `search.json`.
#[derive(Debug, Clone, Serialize)]
pub struct SearchTable {
    pub schema_version: &'static str,
    pub predictor_names: Vec<String>,
    pub subset_count: usize,
    pub model_count_note: String,
    pub rows: Vec<SearchRow>,
}

impl SearchTable {
    pub fn new(s: &SearchResult) -> SearchTable {
        SearchTable {
            schema_version: REPORT_SCHEMA_VERSION,
            predictor_names: s.predictor_names.clone(),
            subset_count: s.subset_count,
            model_count_note: model_count_note(s.predictor_names.len(), s.subset_count),
            rows: s.rows().collect(),
        }
    }
}

/// Output of scoring new patients against a saved model.
#[derive(Debug, Clone, Serialize)]
pub struct ScoreReport {
    pub schema_version: &'static str,
    pub predictors: Vec<String>,
    pub endpoint_transform: EndpointTransform,
    pub counts: ClassCounts,
    pub patients: Vec<SuccessCurve>,
}

impl ScoreReport {
    pub fn new(model: &crate::pipeline::FittedModel, patients: Vec<SuccessCurve>) -> ScoreReport {
        ScoreReport {
            schema_version: REPORT_SCHEMA_VERSION,
            predictors: model.subset_names.clone(),
            endpoint_transform: model.endpoint_transform,
            counts: ClassCounts::of(&patients),
            patients,
        }
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_search_outputs(dir: &Path, search: &SearchResult) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = Vec::new();
    search.write_table_csv(&mut csv)?;
    let files = [
        (SEARCH_CSV_FILE, csv),
        (SEARCH_JSON_FILE, to_json_bytes(&SearchTable::new(search))?),
        (FIG_PCI_FILE, plot::pci_by_cardinality(search).into_bytes()),
    ];
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = dir.join(name);
        write_file(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}

/// Writes the report, model, search table and figures into `dir`.
pub fn write_analysis(dir: &Path, a: &Analysis, cfg: &AnalysisConfig) -> Result<Vec<PathBuf>> {
    let mut written = write_search_outputs(dir, &a.search)?;
    let model = a.fitted_model(cfg.endpoint_transform);
    let title = format!(
        "Probability of treatment success, model {}",
        a.scored.subset.names(&a.moments.predictor_names).join(", ")
    );
    let files = [
        (REPORT_FILE, to_json_bytes(&Report::new(a, cfg))?),
        (MODEL_FILE, to_json_bytes(&model)?),
        (FIG_SUCCESS_FILE, plot::success_by_rho(&a.curves, &title).into_bytes()),
        (FIG_SURVIVAL_FILE, plot::survival_by_class(&a.audit).into_bytes()),
    ];
    for (name, bytes) in files {
        let path = dir.join(name);
        write_file(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_with_17_digits() {
        #[derive(Serialize)]
        struct T {
            a: f64,
            b: Vec<f64>,
            c: f64,
        }
        let v = T {
            a: 0.1,
            b: vec![1.0 / 3.0, -2.5e-300],
            c: f64::NAN,
        };
        let text = String::from_utf8(to_json_bytes(&v).unwrap()).unwrap();
        assert!(text.contains("1.0000000000000001e-1"), "{text}");
        assert!(text.contains("\"c\": null"));
        let back: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(back["a"].as_f64(), Some(0.1));
        assert_eq!(back["b"][0].as_f64(), Some(1.0 / 3.0));
        assert_eq!(back["b"][1].as_f64(), Some(-2.5e-300));
    }

    #[test]
    fn model_count_note_flags_8204() {
        let note = model_count_note(13, 8191);
        assert!(note.contains("8191") && note.contains("8204"));
        assert!(!model_count_note(4, 15).contains("8204"));
    }

    #[test]
    fn schema_is_json() {
        let v: serde_json::Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
        assert_eq!(v["properties"]["schema_version"]["const"], REPORT_SCHEMA_VERSION);
    }
}
