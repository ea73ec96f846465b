//! Per-patient probability of treatment success across the sensitivity grid,
//! and the good / rare / bad responder classification built on it.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::causal::{conditional_delta_with, FeasibleRange, RhoGrid, Subset, SubsetModel};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::moments::MomentEstimates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponderClass {
    Good,
    Rare,
    Bad,
}

impl fmt::Display for ResponderClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResponderClass::Good => "good",
            ResponderClass::Rare => "rare",
            ResponderClass::Bad => "bad",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessCurve {
    pub patient_id: String,
    pub rhos: Vec<f64>,
    pub prob_by_rho: Vec<f64>,
    pub classification: ResponderClass,
    pub mean_delta: f64,
    pub sd_delta_given_s: Vec<f64>,
}

/// Standard normal CDF via the regularized upper incomplete gamma function,
/// `erfc(z) = Q(1/2, z²)` for `z ≥ 0`.
pub fn std_normal_cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x == 0.0 {
        return 0.5;
    }
    let tail = 0.5 * gamma_ur(0.5, 0.5 * x * x);
    if x >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// P(Δ > 0) for Δ ~ N(mean, sd²); a zero sd gives 1, 0.5 or 0 by the sign of `mean`.
pub fn success_from(mean: f64, sd: f64) -> f64 {
    if sd > 0.0 {
        std_normal_cdf(mean / sd)
    } else if mean > 0.0 {
        1.0
    } else if mean < 0.0 {
        0.0
    } else {
        0.5
    }
}

pub fn success_probability(m: &MomentEstimates, subset: Subset, s: &[f64], rho: f64) -> Result<f64> {
    let model = SubsetModel::new(m, subset)?;
    let mean = model.mean_delta(s)?;
    let var = model.conditional_var(rho)?;
    Ok(success_from(mean, var.sqrt()))
}

/// Good if every probability exceeds 0.5, Bad if every one is below, else Rare.
pub fn classify(probs: &[f64]) -> Result<ResponderClass> {
    if probs.is_empty() {
        return Err(Error::Domain("cannot classify an empty success curve".into()));
    }
    Ok(if probs.iter().all(|&p| p > 0.5) {
        ResponderClass::Good
    } else if probs.iter().all(|&p| p < 0.5) {
        ResponderClass::Bad
    } else {
        ResponderClass::Rare
    })
}

/// Scores one predictor vector against a prepared subset model.
pub struct Scorer<'a> {
    model: SubsetModel,
    range: FeasibleRange,
    grid: &'a RhoGrid,
}

impl<'a> Scorer<'a> {
    pub fn new(m: &MomentEstimates, subset: Subset, grid: &'a RhoGrid) -> Result<Scorer<'a>> {
        let range = crate::causal::feasible_rhos(m, subset, grid)?;
        Ok(Scorer {
            model: SubsetModel::new(m, subset)?,
            range,
            grid,
        })
    }

    pub fn feasible(&self) -> &FeasibleRange {
        &self.range
    }

    pub fn curve(&self, patient_id: &str, s: &[f64]) -> Result<SuccessCurve> {
        let cd = conditional_delta_with(&self.model, &self.range, s, self.grid)?;
        let prob_by_rho: Vec<f64> = cd
            .sd_delta_given_s
            .iter()
            .map(|&sd| success_from(cd.mean_delta, sd))
            .collect();
        Ok(SuccessCurve {
            patient_id: patient_id.to_owned(),
            classification: classify(&prob_by_rho)?,
            rhos: cd.rhos,
            prob_by_rho,
            mean_delta: cd.mean_delta,
            sd_delta_given_s: cd.sd_delta_given_s,
        })
    }
}

/// One curve per record, in dataset order. Both arms are scored.
pub fn score_cohort(
    m: &MomentEstimates,
    subset: Subset,
    ds: &Dataset,
    grid: &RhoGrid,
) -> Result<Vec<SuccessCurve>> {
    let scorer = Scorer::new(m, subset, grid)?;
    ds.records()
        .par_iter()
        .map(|r| scorer.curve(&r.id, &r.predictors))
        .collect()
}
