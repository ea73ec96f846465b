//! End-to-end analysis: load → moments → search → select → score → audit.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::causal::{feasible_rhos, PciProfile, RhoGrid, Subset, DEFAULT_RHO_STEP};
use crate::dataset::{load_csv, validate, ColumnMapping, Dataset, EndpointTransform, ValidationReport};
use crate::error::{Error, Result};
use crate::moments::{estimate_moments, MomentEstimates};
use crate::responders::{score_cohort, Scorer, SuccessCurve};
use crate::search::{enumerate_and_score, ChampionCriterion, SearchOptions, SearchResult, DEFAULT_THRESHOLD};
use crate::survival::{subgroup_audit, SubgroupAudit};

pub const MODEL_SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub input: PathBuf,
    pub column_mapping: ColumnMapping,
    pub rho_step: f64,
    pub threshold: f64,
    pub endpoint_transform: EndpointTransform,
    pub max_cardinality: Option<usize>,
    pub worker_count: Option<usize>,
    /// Recorded in the report; the analysis itself draws no random numbers.
    pub seed: Option<u64>,
    pub criterion: ChampionCriterion,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            input: PathBuf::new(),
            column_mapping: ColumnMapping::default(),
            rho_step: DEFAULT_RHO_STEP,
            threshold: DEFAULT_THRESHOLD,
            endpoint_transform: EndpointTransform::default(),
            max_cardinality: None,
            worker_count: None,
            seed: None,
            criterion: ChampionCriterion::default(),
        }
    }
}

impl AnalysisConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.rho_step > 0.0 && self.rho_step <= 0.5) {
            return Err(Error::Validation(format!("rho_step {} outside (0, 0.5]", self.rho_step)));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Validation(format!("threshold {} outside [0, 1)", self.threshold)));
        }
        if self.worker_count == Some(0) {
            return Err(Error::Validation("worker_count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<RhoGrid> {
        RhoGrid::with_step(self.rho_step)
    }

    pub fn search_options(&self) -> SearchOptions {
        SearchOptions {
            max_cardinality: self.max_cardinality,
            criterion: self.criterion,
            threshold: self.threshold,
            workers: self.worker_count,
        }
    }
}

/// How the scoring subset was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Smallest champion with pci_min above the threshold.
    Parsimonious,
    /// No champion cleared the threshold; the champion with the largest pci_min.
    FallbackMaxPciMin,
}

/// What the `score` subcommand needs to rescore new patients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub schema_version: String,
    pub moments: MomentEstimates,
    pub subset: Subset,
    pub subset_names: Vec<String>,
    pub rho_grid: Vec<f64>,
    pub endpoint_transform: EndpointTransform,
}

impl FittedModel {
    pub fn new(moments: MomentEstimates, subset: Subset, grid: &RhoGrid, transform: EndpointTransform) -> FittedModel {
        FittedModel {
            schema_version: MODEL_SCHEMA_VERSION.into(),
            subset_names: subset.names(&moments.predictor_names),
            moments,
            subset,
            rho_grid: grid.values().to_vec(),
            endpoint_transform: transform,
        }
    }

    pub fn from_json(text: &str) -> Result<FittedModel> {
        let model: FittedModel = serde_json::from_str(text)?;
        if model.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "model schema version {} is not supported (expected {MODEL_SCHEMA_VERSION})",
                model.schema_version
            )));
        }
        model.moments.check()?;
        model.subset.check(model.moments.p())?;
        if model.subset.names(&model.moments.predictor_names) != model.subset_names {
            return Err(Error::Schema("subset_names disagree with the subset bitmask".into()));
        }
        model.grid()?;
        Ok(model)
    }

    pub fn grid(&self) -> Result<RhoGrid> {
        RhoGrid::new(self.rho_grid.clone())
    }
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub validation: ValidationReport,
    pub moments: MomentEstimates,
    pub search: SearchResult,
    pub scored: PciProfile,
    pub rule: SelectionRule,
    pub curves: Vec<SuccessCurve>,
    pub audit: SubgroupAudit,
}

impl Analysis {
    pub fn fitted_model(&self, transform: EndpointTransform) -> FittedModel {
        FittedModel::new(self.moments.clone(), self.scored.subset, &self.search.grid, transform)
    }
}

pub fn run_analyze(cfg: &AnalysisConfig) -> Result<Analysis> {
    cfg.check()?;
    let ds = load_csv(&cfg.input, &cfg.column_mapping, cfg.endpoint_transform)?;
    analyze_dataset(&ds, cfg)
}

pub fn analyze_dataset(ds: &Dataset, cfg: &AnalysisConfig) -> Result<Analysis> {
    cfg.check()?;
    let grid = cfg.grid()?;
    let validation = validate(ds);
    let moments = estimate_moments(ds)?;
    let search = enumerate_and_score(&moments, &grid, &cfg.search_options())?;
    let (scored, rule) = match &search.selected {
        Some(p) => (p.clone(), SelectionRule::Parsimonious),
        None => {
            let best = search
                .champions
                .iter()
                .flatten()
                // Strict comparison keeps the smallest cardinality on ties.
                .fold(None::<&PciProfile>, |acc, c| match acc {
                    Some(a) if a.pci_min >= c.pci_min => Some(a),
                    _ => Some(c),
                });
            match best {
                Some(p) => (p.clone(), SelectionRule::FallbackMaxPciMin),
                None => {
                    let all = Subset(u64::MAX >> (64 - moments.p()));
                    // Reports the eigenvalues of the full model.
                    feasible_rhos(&moments, all, &grid)?;
                    return Err(Error::Infeasible {
                        subset: all.indices(),
                        eigenvalues_at_zero: Vec::new(),
                    });
                }
            }
        }
    };
    let curves = with_workers(cfg.worker_count, || score_cohort(&moments, scored.subset, ds, &grid))?;
    let audit = subgroup_audit(ds, &curves)?;
    Ok(Analysis {
        validation,
        moments,
        search,
        scored,
        rule,
        curves,
        audit,
    })
}

/// Success curves for predictor vectors scored against a saved model.
pub fn score_patients(model: &FittedModel, rows: &[(String, Vec<f64>)]) -> Result<Vec<SuccessCurve>> {
    let grid = model.grid()?;
    let scorer = Scorer::new(&model.moments, model.subset, &grid)?;
    rows.iter().map(|(id, s)| scorer.curve(id, s)).collect()
}

pub(crate) fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Validation(format!("cannot build worker pool: {e}")))?
            .install(f),
        None => f(),
    }
}
