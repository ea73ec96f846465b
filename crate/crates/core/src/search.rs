//! Exhaustive best-subset search over predictor combinations.
//!
//! Every non-empty subset (optionally capped in size) is scored independently
//! from one immutable [`MomentEstimates`]; results come back in ascending
//! bitmask order whatever the number of worker threads.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::causal::{profile_of, summarize, Accuracy, PciProfile, PciSummary, RhoGrid, Subset, SubsetModel};
use crate::error::{Error, Result};
use crate::moments::MomentEstimates;

/// Largest p enumerated without a cardinality cap.
pub const MAX_EXHAUSTIVE_P: usize = 24;

/// Upper bound on the number of subsets any single search may score.
pub const MAX_SUBSETS: u64 = (1 << MAX_EXHAUSTIVE_P) - 1;

pub const DEFAULT_THRESHOLD: f64 = 0.7;

/// Statistic that decides the best subset within a cardinality.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChampionCriterion {
    #[default]
    Mean,
    Min,
}

impl ChampionCriterion {
    fn key(self, s: &PciSummary) -> f64 {
        match self {
            ChampionCriterion::Mean => s.pci_mean,
            ChampionCriterion::Min => s.pci_min,
        }
    }
}

impl std::str::FromStr for ChampionCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ChampionCriterion::Mean),
            "min" => Ok(ChampionCriterion::Min),
            other => Err(Error::Validation(format!(
                "unknown champion criterion `{other}` (expected mean or min)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOptions {
    pub max_cardinality: Option<usize>,
    pub criterion: ChampionCriterion,
    pub threshold: f64,
    /// `None` uses rayon's global pool.
    pub workers: Option<usize>,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            max_cardinality: None,
            criterion: ChampionCriterion::Mean,
            threshold: DEFAULT_THRESHOLD,
            workers: None,
        }
    }
}

/// One row of the search table. `summary` is `None` for infeasible subsets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsetScore {
    pub subset: Subset,
    pub summary: Option<PciSummary>,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub predictor_names: Vec<String>,
    pub grid: RhoGrid,
    pub scores: Vec<SubsetScore>,
    /// Best profile per cardinality; index `k - 1`. `None` when every subset
    /// of that size is infeasible.
    pub champions: Vec<Option<PciProfile>>,
    pub selected: Option<PciProfile>,
    pub threshold: f64,
    pub criterion: ChampionCriterion,
    pub subset_count: usize,
    pub infeasible_count: usize,
}

impl SearchResult {
    pub fn champion(&self, k: usize) -> Option<&PciProfile> {
        self.champions.get(k.checked_sub(1)?)?.as_ref()
    }
}

fn subsets_to_score(p: usize, cap: Option<usize>) -> Result<Vec<Subset>> {
    if p == 0 || p > 64 {
        return Err(Error::Capacity(format!("p = {p} outside 1..=64")));
    }
    match cap {
        None if p > MAX_EXHAUSTIVE_P => Err(Error::Capacity(format!(
            "p = {p} exceeds {MAX_EXHAUSTIVE_P} for exhaustive enumeration; set a maximum cardinality"
        ))),
        None => Ok((1u64..1u64 << p).map(Subset).collect()),
        Some(0) => Err(Error::Capacity("maximum cardinality must be at least 1".into())),
        Some(cap) => {
            let cap = cap.min(p);
            let total: u64 = (1..=cap as u64).map(|k| binomial(p as u64, k)).fold(0u64, u64::saturating_add);
            if total > MAX_SUBSETS {
                return Err(Error::Capacity(format!(
                    "{total} subsets of size <= {cap} exceed the limit of {MAX_SUBSETS}; lower the cap"
                )));
            }
            if p <= MAX_EXHAUSTIVE_P {
                return Ok((1u64..1u64 << p)
                    .filter(|m| m.count_ones() as usize <= cap)
                    .map(Subset)
                    .collect());
            }
            let mut out = Vec::with_capacity(total as usize);
            for k in 1..=cap {
                combinations(p, k, &mut out);
            }
            out.sort_unstable();
            Ok(out)
        }
    }
}

fn binomial(n: u64, k: u64) -> u64 {
    (0..k).fold(1u64, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

fn combinations(p: usize, k: usize, out: &mut Vec<Subset>) {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(Subset::from_indices(&idx));
        let Some(pos) = (0..k).rev().find(|&i| idx[i] < p - k + i) else {
            return;
        };
        idx[pos] += 1;
        for j in pos + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn score_all(m: &MomentEstimates, grid: &RhoGrid, subsets: &[Subset]) -> Result<Vec<SubsetScore>> {
    subsets
        .par_iter()
        .map(|&subset| {
            let model = SubsetModel::new(m, subset)?;
            Ok(SubsetScore {
                subset,
                summary: summarize(&model, grid)?,
            })
        })
        .collect()
}

pub fn enumerate_and_score(
    m: &MomentEstimates,
    grid: &RhoGrid,
    opts: &SearchOptions,
) -> Result<SearchResult> {
    if !(0.0..1.0).contains(&opts.threshold) {
        return Err(Error::Validation(format!(
            "threshold {} outside [0, 1)",
            opts.threshold
        )));
    }
    let subsets = subsets_to_score(m.p(), opts.max_cardinality)?;
    let scores = match opts.workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Validation(format!("cannot build worker pool: {e}")))?;
            pool.install(|| score_all(m, grid, &subsets))?
        }
        None => score_all(m, grid, &subsets)?,
    };

    let max_k = scores.iter().map(|s| s.subset.len()).max().unwrap_or(0);
    let mut best: Vec<Option<(Subset, f64)>> = vec![None; max_k];
    for s in &scores {
        let Some(summary) = &s.summary else { continue };
        let key = opts.criterion.key(summary);
        let slot = &mut best[s.subset.len() - 1];
        // Strict comparison keeps the lowest bitmask on ties.
        if slot.is_none_or(|(_, k)| key > k) {
            *slot = Some((s.subset, key));
        }
    }
    let champions = best
        .into_iter()
        .map(|slot| {
            slot.map(|(subset, _)| {
                let model = SubsetModel::new(m, subset)?;
                profile_of(&model, grid).expect("champion subsets are feasible")
            })
            .transpose()
        })
        .collect::<Result<Vec<_>>>()?;
    let selected = select_parsimonious(&champions, opts.threshold).cloned();
    let infeasible_count = scores.iter().filter(|s| s.summary.is_none()).count();
    Ok(SearchResult {
        predictor_names: m.predictor_names.clone(),
        grid: grid.clone(),
        subset_count: scores.len(),
        scores,
        champions,
        selected,
        threshold: opts.threshold,
        criterion: opts.criterion,
        infeasible_count,
    })
}

/// Champion of the smallest cardinality whose minimum PCI exceeds `threshold`.
pub fn select_parsimonious(champions: &[Option<PciProfile>], threshold: f64) -> Option<&PciProfile> {
    champions
        .iter()
        .flatten()
        .find(|c| c.pci_min > threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRow {
    pub bitmask: u64,
    pub size: usize,
    pub predictors: Vec<String>,
    pub feasible: bool,
    pub pci_min: Option<f64>,
    pub pci_mean: Option<f64>,
    pub pci_max: Option<f64>,
    pub accuracy: Option<Accuracy>,
    pub rho_low: Option<f64>,
    pub rho_high: Option<f64>,
}

impl SearchResult {
    pub fn rows(&self) -> impl Iterator<Item = SearchRow> + '_ {
        self.scores.iter().map(|s| {
            let sm = s.summary.as_ref();
            SearchRow {
                bitmask: s.subset.0,
                size: s.subset.len(),
                predictors: s.subset.names(&self.predictor_names),
                feasible: sm.is_some(),
                pci_min: sm.map(|x| x.pci_min),
                pci_mean: sm.map(|x| x.pci_mean),
                pci_max: sm.map(|x| x.pci_max),
                accuracy: sm.map(PciSummary::accuracy),
                rho_low: sm.map(|x| self.grid.values()[x.first]),
                rho_high: sm.map(|x| self.grid.values()[x.last]),
            }
        })
    }

    /// Search table as CSV; predictor names are joined with `;`.
    pub fn write_table_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "bitmask", "size", "predictors", "feasible", "pci_min", "pci_mean", "pci_max", "accuracy",
            "rho_low", "rho_high",
        ])?;
        let num = |v: Option<f64>| v.map(crate::dataset::format_number).unwrap_or_default();
        for row in self.rows() {
            w.write_record([
                row.bitmask.to_string(),
                row.size.to_string(),
                row.predictors.join(";"),
                row.feasible.to_string(),
                num(row.pci_min),
                num(row.pci_mean),
                num(row.pci_max),
                row.accuracy.map(|a| a.label().to_owned()).unwrap_or_default(),
                num(row.rho_low),
                num(row.rho_high),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<search table>", e))?;
        Ok(())
    }
}
