//! Sensitivity analysis over the unidentified correlation between potential
//! outcomes, and the predictive causal information (PCI) of a predictor subset.
//!
//! For a subset `A` of predictors with covariance `Σ_A` and endpoint covariances
//! `c0 = Cov(Y0, S_A)`, `c1 = Cov(Y1, S_A)`, the individual causal effect
//! `Δ = Y1 - Y0` has
//!
//! ```text
//! Var(Δ; ρ)        = var0 + var1 - 2 ρ sqrt(var0 var1)
//! explained(A)     = d' Σ_A⁻¹ d,           d = c1 - c0
//! PCI(A, ρ)        = explained(A) / Var(Δ; ρ)
//! E[Δ | S_A = s]   = (mu1 - mu0) + d' Σ_A⁻¹ (s - mu_A)
//! Var[Δ | S_A = s] = Var(Δ; ρ) - explained(A)
//! ```
//!
//! `ρ` is admissible when the joint covariance of `(Y0, Y1, S_A)` is positive
//! semidefinite. With `Σ_A` positive definite this reduces to the 2×2 Schur
//! complement of `Σ_A`, i.e. the conditional covariance of `(Y0, Y1)` given `S_A`,
//! having minimum eigenvalue at least `-FEASIBILITY_TOLERANCE`.

use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::MomentEstimates;

pub const FEASIBILITY_TOLERANCE: f64 = 1e-10;

/// Largest round-off excess over 1 that PCI is silently clamped against.
pub const PCI_CLAMP_LIMIT: f64 = 1e-9;

pub const DEFAULT_RHO_STEP: f64 = 0.01;

/// Predictor index set as a bitmask over at most 64 predictors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Subset(pub u64);

impl Subset {
    pub fn from_indices(indices: &[usize]) -> Subset {
        Subset(indices.iter().fold(0u64, |acc, &i| acc | (1u64 << i)))
    }

    pub fn indices(self) -> Vec<usize> {
        (0..64).filter(|&i| self.0 >> i & 1 == 1).collect()
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, i: usize) -> bool {
        i < 64 && self.0 >> i & 1 == 1
    }

    pub fn union(self, other: Subset) -> Subset {
        Subset(self.0 | other.0)
    }

    pub fn names(self, all: &[String]) -> Vec<String> {
        self.indices().into_iter().map(|i| all[i].clone()).collect()
    }

    pub fn check(self, p: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Domain("predictor subset is empty".into()));
        }
        if p < 64 && self.0 >> p != 0 {
            return Err(Error::Domain(format!(
                "subset {:?} references predictors beyond p = {p}",
                self.indices()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.indices())
    }
}

/// Ordered sensitivity values for the correlation between potential outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoGrid {
    values: Vec<f64>,
}

impl RhoGrid {
    pub fn new(values: Vec<f64>) -> Result<RhoGrid> {
        if values.is_empty() {
            return Err(Error::Validation("rho grid is empty".into()));
        }
        if values.iter().any(|&r| !(r > -1.0 && r < 1.0)) {
            return Err(Error::Validation("rho values must lie in (-1, 1)".into()));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation("rho values must be strictly increasing".into()));
        }
        Ok(RhoGrid { values })
    }

    /// Symmetric grid `{k·step : |k·step| < 1}`; step 0.01 gives -0.99..0.99.
    pub fn with_step(step: f64) -> Result<RhoGrid> {
        if !(step > 0.0 && step <= 0.5) {
            return Err(Error::Validation(format!("rho step {step} outside (0, 0.5]")));
        }
        let kmax = ((1.0 - 1e-9) / step).floor() as i64;
        let values = (-kmax..=kmax)
            .map(|k| k as f64 * step)
            .filter(|r| r.abs() < 1.0)
            .collect();
        RhoGrid::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl Default for RhoGrid {
    fn default() -> Self {
        RhoGrid::with_step(DEFAULT_RHO_STEP).expect("default step is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accuracy {
    Negligible,
    Low,
    Moderate,
    High,
    VeryHigh,
}

impl Accuracy {
    /// Half-open bands: (-, 0.3], (0.3, 0.5], (0.5, 0.7], (0.7, 0.9], (0.9, 1].
    pub fn from_pci(pci: f64) -> Accuracy {
        if pci <= 0.3 {
            Accuracy::Negligible
        } else if pci <= 0.5 {
            Accuracy::Low
        } else if pci <= 0.7 {
            Accuracy::Moderate
        } else if pci <= 0.9 {
            Accuracy::High
        } else {
            Accuracy::VeryHigh
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Accuracy::Negligible => "negligible",
            Accuracy::Low => "low",
            Accuracy::Moderate => "moderate",
            Accuracy::High => "high",
            Accuracy::VeryHigh => "very high",
        }
    }
}

/// Builds the `(k + 2)`-square joint covariance of `(Y0, Y1, S_A)` at `rho`.
pub fn joint_covariance(m: &MomentEstimates, subset: Subset, rho: f64) -> DMatrix<f64> {
    let idx = subset.indices();
    let k = idx.len();
    let mut out = DMatrix::zeros(k + 2, k + 2);
    let c01 = rho * (m.var0 * m.var1).sqrt();
    out[(0, 0)] = m.var0;
    out[(1, 1)] = m.var1;
    out[(0, 1)] = c01;
    out[(1, 0)] = c01;
    for (a, &i) in idx.iter().enumerate() {
        out[(0, a + 2)] = m.cov0_s[i];
        out[(a + 2, 0)] = m.cov0_s[i];
        out[(1, a + 2)] = m.cov1_s[i];
        out[(a + 2, 1)] = m.cov1_s[i];
        for (b, &j) in idx.iter().enumerate() {
            out[(a + 2, b + 2)] = m.sigma_s[(i, j)];
        }
    }
    out
}

/// Everything about one subset that does not depend on `rho`, factorized once.
#[derive(Debug, Clone)]
pub struct SubsetModel {
    subset: Subset,
    indices: Vec<usize>,
    /// `Σ_A⁻¹ d`, the regression of the causal effect on `S_A`.
    coef: DVector<f64>,
    mean_s: DVector<f64>,
    mean_shift: f64,
    explained: f64,
    var0: f64,
    var1: f64,
    sd_product: f64,
    /// Residual variances of Y0 and Y1 given `S_A`, and `c0' Σ_A⁻¹ c1`.
    resid0: f64,
    resid1: f64,
    proj01: f64,
}

impl SubsetModel {
    pub fn new(m: &MomentEstimates, subset: Subset) -> Result<SubsetModel> {
        subset.check(m.p())?;
        let indices = subset.indices();
        let k = indices.len();
        let sigma = DMatrix::from_fn(k, k, |a, b| m.sigma_s[(indices[a], indices[b])]);
        let chol: Cholesky<f64, Dyn> = Cholesky::new(sigma).ok_or_else(|| Error::Singular {
            condition: f64::INFINITY,
            columns: subset.names(&m.predictor_names),
        })?;
        let c0 = DVector::from_iterator(k, indices.iter().map(|&i| m.cov0_s[i]));
        let c1 = DVector::from_iterator(k, indices.iter().map(|&i| m.cov1_s[i]));
        let d = &c1 - &c0;

        // Whitened vectors L⁻¹ c give the quadratic forms as plain dot products.
        let l = chol.l();
        let w0 = l.solve_lower_triangular(&c0).expect("cholesky factor is nonsingular");
        let w1 = l.solve_lower_triangular(&c1).expect("cholesky factor is nonsingular");
        let wd = l.solve_lower_triangular(&d).expect("cholesky factor is nonsingular");
        let coef = chol.solve(&d);

        Ok(SubsetModel {
            subset,
            mean_s: DVector::from_iterator(k, indices.iter().map(|&i| m.mu_s[i])),
            indices,
            coef,
            mean_shift: m.mu1 - m.mu0,
            explained: wd.norm_squared(),
            var0: m.var0,
            var1: m.var1,
            sd_product: (m.var0 * m.var1).sqrt(),
            resid0: m.var0 - w0.norm_squared(),
            resid1: m.var1 - w1.norm_squared(),
            proj01: w0.dot(&w1),
        })
    }

    pub fn subset(&self) -> Subset {
        self.subset
    }

    /// `d' Σ_A⁻¹ d`, the part of Var(Δ) carried by the predictors.
    pub fn explained(&self) -> f64 {
        self.explained
    }

    pub fn coefficients(&self) -> &DVector<f64> {
        &self.coef
    }

    /// Minimum eigenvalue of the conditional covariance of `(Y0, Y1)` given `S_A`.
    pub fn schur_min_eigenvalue(&self, rho: f64) -> f64 {
        let off = rho * self.sd_product - self.proj01;
        let half_sum = 0.5 * (self.resid0 + self.resid1);
        let half_diff = 0.5 * (self.resid0 - self.resid1);
        half_sum - half_diff.hypot(off)
    }

    pub fn is_feasible(&self, rho: f64) -> bool {
        (-1.0..=1.0).contains(&rho) && self.schur_min_eigenvalue(rho) >= -FEASIBILITY_TOLERANCE
    }

    /// Var(Δ; ρ) = var0 + var1 − 2ρ·sqrt(var0·var1).
    pub fn var_delta(&self, rho: f64) -> f64 {
        self.var0 + self.var1 - 2.0 * rho * self.sd_product
    }

    fn check_rho(&self, rho: f64) -> Result<()> {
        if !self.is_feasible(rho) {
            return Err(Error::Domain(format!(
                "rho = {rho} is infeasible for subset {}",
                self.subset
            )));
        }
        Ok(())
    }

    pub fn pci(&self, rho: f64) -> Result<f64> {
        self.check_rho(rho)?;
        let total = self.var_delta(rho);
        if !(total > 0.0) {
            return Err(Error::Domain(format!(
                "Var(delta) = {total} is not positive at rho = {rho}"
            )));
        }
        let raw = self.explained / total;
        if raw > 1.0 + PCI_CLAMP_LIMIT {
            return Err(Error::Domain(format!(
                "PCI {raw} exceeds 1 beyond round-off at rho = {rho}"
            )));
        }
        Ok(raw.clamp(0.0, 1.0))
    }

    /// E[Δ | S_A = s]; `s` is a full-length predictor vector.
    pub fn mean_delta(&self, s: &[f64]) -> Result<f64> {
        let mut acc = self.mean_shift;
        for (a, &i) in self.indices.iter().enumerate() {
            let v = *s.get(i).ok_or_else(|| {
                Error::Domain(format!("predictor vector too short for index {i}"))
            })?;
            if !v.is_finite() {
                return Err(Error::Domain(format!("predictor {i} has no value")));
            }
            acc += self.coef[a] * (v - self.mean_s[a]);
        }
        Ok(acc)
    }

    /// Var[Δ | S_A] at `rho`, with round-off negatives snapped to zero.
    pub fn conditional_var(&self, rho: f64) -> Result<f64> {
        self.check_rho(rho)?;
        let total = self.var_delta(rho);
        let v = total - self.explained;
        if v >= 0.0 {
            Ok(v)
        } else if -v <= PCI_CLAMP_LIMIT * total.abs().max(1.0) {
            Ok(0.0)
        } else {
            Err(Error::Domain(format!(
                "conditional variance {v} is negative at rho = {rho}"
            )))
        }
    }
}

/// Feasible part of a grid for one subset. Feasible indices are contiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibleRange {
    pub subset: Subset,
    pub mask: Vec<bool>,
    /// Inclusive index range into the grid.
    pub first: usize,
    pub last: usize,
}

impl FeasibleRange {
    pub fn rhos<'g>(&self, grid: &'g RhoGrid) -> &'g [f64] {
        &grid.values()[self.first..=self.last]
    }

    pub fn count(&self) -> usize {
        self.last - self.first + 1
    }
}

fn feasible_range_of(model: &SubsetModel, grid: &RhoGrid) -> Option<FeasibleRange> {
    let mask: Vec<bool> = grid.values().iter().map(|&r| model.is_feasible(r)).collect();
    let first = mask.iter().position(|&f| f)?;
    let last = mask.iter().rposition(|&f| f)?;
    // λmin is concave in ρ, so the set is an interval; close any round-off gap.
    let mut mask = mask;
    mask[first..=last].iter_mut().for_each(|f| *f = true);
    Some(FeasibleRange {
        subset: model.subset,
        mask,
        first,
        last,
    })
}

fn infeasible_error(m: &MomentEstimates, subset: Subset) -> Error {
    let eig = SymmetricEigen::new(joint_covariance(m, subset, 0.0));
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(f64::total_cmp);
    Error::Infeasible {
        subset: subset.indices(),
        eigenvalues_at_zero: eigenvalues,
    }
}

pub fn feasible_rhos(m: &MomentEstimates, subset: Subset, grid: &RhoGrid) -> Result<FeasibleRange> {
    let model = SubsetModel::new(m, subset)?;
    feasible_range_of(&model, grid).ok_or_else(|| infeasible_error(m, subset))
}

pub fn compute_pci(m: &MomentEstimates, subset: Subset, rho: f64) -> Result<f64> {
    SubsetModel::new(m, subset)?.pci(rho)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PciProfile {
    pub subset: Subset,
    pub feasible: FeasibleRange,
    pub rhos: Vec<f64>,
    pub pci_by_rho: Vec<f64>,
    pub pci_min: f64,
    pub pci_mean: f64,
    pub pci_max: f64,
    pub accuracy: Accuracy,
    pub explained: f64,
}

/// Summary statistics of a profile without the per-ρ vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PciSummary {
    pub pci_min: f64,
    pub pci_mean: f64,
    pub pci_max: f64,
    pub first: usize,
    pub last: usize,
}

impl PciSummary {
    pub fn accuracy(&self) -> Accuracy {
        Accuracy::from_pci(self.pci_mean)
    }
}

/// Feasible range and PCI summary for one subset; `None` if no ρ is feasible.
pub fn summarize(model: &SubsetModel, grid: &RhoGrid) -> Result<Option<PciSummary>> {
    let Some(range) = feasible_range_of(model, grid) else {
        return Ok(None);
    };
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for &rho in range.rhos(grid) {
        let v = model.pci(rho)?;
        min = min.min(v);
        max = max.max(v);
        sum += v;
    }
    Ok(Some(PciSummary {
        pci_min: min,
        pci_mean: sum / range.count() as f64,
        pci_max: max,
        first: range.first,
        last: range.last,
    }))
}

pub fn pci_profile(m: &MomentEstimates, subset: Subset, grid: &RhoGrid) -> Result<PciProfile> {
    let model = SubsetModel::new(m, subset)?;
    profile_of(&model, grid).ok_or_else(|| infeasible_error(m, subset))?
}

pub(crate) fn profile_of(model: &SubsetModel, grid: &RhoGrid) -> Option<Result<PciProfile>> {
    let feasible = feasible_range_of(model, grid)?;
    Some((|| {
        let rhos = feasible.rhos(grid).to_vec();
        let pci_by_rho = rhos.iter().map(|&r| model.pci(r)).collect::<Result<Vec<_>>>()?;
        let pci_min = pci_by_rho.iter().copied().fold(f64::INFINITY, f64::min);
        let pci_max = pci_by_rho.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pci_mean = pci_by_rho.iter().sum::<f64>() / pci_by_rho.len() as f64;
        Ok(PciProfile {
            subset: model.subset,
            feasible,
            rhos,
            pci_by_rho,
            pci_min,
            pci_mean,
            pci_max,
            accuracy: Accuracy::from_pci(pci_mean),
            explained: model.explained,
        })
    })())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalDelta {
    /// E[Δ | S_A = s]; the same at every ρ.
    pub mean_delta: f64,
    pub rhos: Vec<f64>,
    pub var_delta: Vec<f64>,
    pub sd_delta_given_s: Vec<f64>,
}

pub fn conditional_delta(
    m: &MomentEstimates,
    subset: Subset,
    s: &[f64],
    grid: &RhoGrid,
) -> Result<ConditionalDelta> {
    let model = SubsetModel::new(m, subset)?;
    let range = feasible_range_of(&model, grid).ok_or_else(|| infeasible_error(m, subset))?;
    conditional_delta_with(&model, &range, s, grid)
}

pub(crate) fn conditional_delta_with(
    model: &SubsetModel,
    range: &FeasibleRange,
    s: &[f64],
    grid: &RhoGrid,
) -> Result<ConditionalDelta> {
    let mean_delta = model.mean_delta(s)?;
    let rhos = range.rhos(grid).to_vec();
    let var_delta = rhos.iter().map(|&r| model.var_delta(r)).collect();
    let sd_delta_given_s = rhos
        .iter()
        .map(|&r| model.conditional_var(r).map(f64::sqrt))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConditionalDelta {
        mean_delta,
        rhos,
        var_delta,
        sd_delta_given_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|i| format!("x{i}")).collect()
    }

    /// Moments read off a full joint covariance of (Y0, Y1, S).
    fn moments_from_joint(joint: &DMatrix<f64>, mu: &[f64]) -> MomentEstimates {
        let p = joint.nrows() - 2;
        MomentEstimates {
            mu0: mu[0],
            mu1: mu[1],
            var0: joint[(0, 0)],
            var1: joint[(1, 1)],
            mu_s: mu[2..].to_vec(),
            sigma_s: joint.view((2, 2), (p, p)).into_owned(),
            cov0_s: (0..p).map(|j| joint[(0, j + 2)]).collect(),
            cov1_s: (0..p).map(|j| joint[(1, j + 2)]).collect(),
            n0: 100,
            n1: 100,
            predictor_names: names(p),
        }
    }

    fn deterministic_world() -> MomentEstimates {
        MomentEstimates {
            mu0: 0.0,
            mu1: 0.0,
            var0: 1.0,
            var1: 4.0,
            mu_s: vec![0.0],
            sigma_s: DMatrix::from_element(1, 1, 1.0),
            cov0_s: vec![1.0],
            cov1_s: vec![2.0],
            n0: 10,
            n1: 10,
            predictor_names: names(1),
        }
    }

    /// Independent PSD oracle: full eigen-decomposition of the joint matrix
    /// assembled entry by entry.
    fn oracle_feasible(m: &MomentEstimates, subset: Subset, rho: f64) -> bool {
        let idx = subset.indices();
        let k = idx.len();
        let mut a = DMatrix::<f64>::zeros(k + 2, k + 2);
        let ys = [(m.var0, &m.cov0_s), (m.var1, &m.cov1_s)];
        for (r, (v, c)) in ys.iter().enumerate() {
            a[(r, r)] = *v;
            for (b, &j) in idx.iter().enumerate() {
                a[(r, b + 2)] = c[j];
                a[(b + 2, r)] = c[j];
            }
        }
        a[(0, 1)] = rho * (m.var0 * m.var1).sqrt();
        a[(1, 0)] = a[(0, 1)];
        for (x, &i) in idx.iter().enumerate() {
            for (y, &j) in idx.iter().enumerate() {
                a[(x + 2, y + 2)] = m.sigma_s[(i, j)];
            }
        }
        a.symmetric_eigenvalues().min() >= -FEASIBILITY_TOLERANCE
    }

    #[test]
    fn default_grid_has_199_points() {
        let g = RhoGrid::default();
        assert_eq!(g.len(), 199);
        assert_eq!(g.values()[0], -0.99);
        assert_eq!(g.values()[99], 0.0);
        assert_eq!(g.values()[198], 0.99);
        assert!(RhoGrid::with_step(0.0).is_err());
        assert!(RhoGrid::with_step(0.6).is_err());
        assert_eq!(RhoGrid::with_step(0.5).unwrap().values(), &[-0.5, 0.0, 0.5]);
        assert!(RhoGrid::new(vec![0.1, 0.1]).is_err());
        assert!(RhoGrid::new(vec![1.0]).is_err());
    }

    #[test]
    fn block_diagonal_is_feasible_everywhere() {
        let m = MomentEstimates {
            mu0: 0.0,
            mu1: 0.0,
            var0: 1.0,
            var1: 1.0,
            mu_s: vec![0.0; 3],
            sigma_s: DMatrix::identity(3, 3),
            cov0_s: vec![0.0; 3],
            cov1_s: vec![0.0; 3],
            n0: 10,
            n1: 10,
            predictor_names: names(3),
        };
        let grid = RhoGrid::default();
        let r = feasible_rhos(&m, Subset(0b111), &grid).unwrap();
        assert!(r.mask.iter().all(|&f| f));
        assert_eq!((r.first, r.last), (0, 198));
    }

    #[test]
    fn deterministic_world_is_feasible_only_at_one() {
        let m = deterministic_world();
        let grid = RhoGrid::default();
        // Determinant sweep oracle: det of the 3×3 joint matrix at every grid ρ.
        for &rho in grid.values() {
            let c = 2.0 * rho;
            let det = 1.0 * (4.0 - 4.0) - c * (c - 2.0) + 1.0 * (2.0 * c - 4.0);
            assert!(det < 0.0, "rho {rho} det {det}");
        }
        match feasible_rhos(&m, Subset(1), &grid) {
            Err(Error::Infeasible { eigenvalues_at_zero, .. }) => {
                assert_eq!(eigenvalues_at_zero.len(), 3);
                assert!(eigenvalues_at_zero[0] < 0.0);
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
        let model = SubsetModel::new(&m, Subset(1)).unwrap();
        assert!(model.is_feasible(1.0));
        assert!(!model.is_feasible(0.99));
    }

    #[test]
    fn near_deterministic_world_keeps_only_099() {
        let e2 = 0.012;
        let m = MomentEstimates {
            var0: 1.0 + e2,
            var1: 4.0 + e2,
            ..deterministic_world()
        };
        let grid = RhoGrid::default();
        let r = feasible_rhos(&m, Subset(1), &grid).unwrap();
        assert_eq!((r.first, r.last), (198, 198));
        for (i, &rho) in grid.values().iter().enumerate() {
            assert_eq!(oracle_feasible(&m, Subset(1), rho), i == 198);
        }
    }

    #[test]
    fn pci_zero_when_arm_covariances_agree() {
        let m = MomentEstimates {
            cov1_s: vec![1.0],
            var0: 2.0,
            var1: 3.0,
            ..deterministic_world()
        };
        let grid = RhoGrid::default();
        let prof = pci_profile(&m, Subset(1), &grid).unwrap();
        assert!(prof.pci_by_rho.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pci_one_at_deterministic_boundary() {
        let m = deterministic_world();
        let pci = compute_pci(&m, Subset(1), 1.0).unwrap();
        assert!((pci - 1.0).abs() < 1e-9);
        assert!(matches!(compute_pci(&m, Subset(1), 0.5), Err(Error::Domain(_))));
    }

    fn two_predictor_example() -> MomentEstimates {
        MomentEstimates {
            mu0: 0.0,
            mu1: 0.0,
            var0: 1.0,
            var1: 1.0,
            mu_s: vec![0.0, 0.0],
            sigma_s: DMatrix::identity(2, 2),
            cov0_s: vec![0.3, 0.0],
            cov1_s: vec![0.6, 0.2],
            n0: 10,
            n1: 10,
            predictor_names: names(2),
        }
    }

    #[test]
    fn pci_two_predictor_closed_form() {
        let pci = compute_pci(&two_predictor_example(), Subset(0b11), 0.5).unwrap();
        assert!((pci - 0.13).abs() < 1e-12, "{pci}");
    }

    #[test]
    fn pci_two_predictor_monte_carlo_r2() {
        // Sample (Y0, Y1, S1, S2) and regress Δ on S by least squares.
        let m = two_predictor_example();
        let joint = joint_covariance(&m, Subset(0b11), 0.5);
        let l = joint.cholesky().unwrap().l();
        let mut rng = ChaCha8Rng::seed_from_u64(20240601);
        let n = 1_000_000;
        let (mut sxx, mut sxy, mut syy) = (DMatrix::<f64>::zeros(2, 2), DVector::<f64>::zeros(2), 0.0);
        let (mut mx, mut my) = (DVector::<f64>::zeros(2), 0.0);
        let mut draws = Vec::with_capacity(n);
        for _ in 0..n {
            let z = DVector::<f64>::from_fn(4, |_, _| rng.sample(StandardNormal));
            let v = &l * z;
            let delta = v[1] - v[0];
            let s = DVector::from_column_slice(&[v[2], v[3]]);
            mx += &s;
            my += delta;
            draws.push((s, delta));
        }
        mx /= n as f64;
        my /= n as f64;
        for (s, d) in &draws {
            let ds = s - &mx;
            let dd = d - my;
            sxx += &ds * ds.transpose();
            sxy += &ds * dd;
            syy += dd * dd;
        }
        let beta = sxx.clone().lu().solve(&sxy).unwrap();
        let r2 = beta.dot(&sxy) / syy;
        assert!((r2 - 0.13).abs() < 0.005, "{r2}");
    }

    #[test]
    fn accuracy_bands() {
        assert_eq!(Accuracy::from_pci(0.486), Accuracy::Low);
        assert_eq!(Accuracy::from_pci(0.98), Accuracy::VeryHigh);
        assert_eq!(Accuracy::from_pci(0.3), Accuracy::Negligible);
        assert_eq!(Accuracy::from_pci(0.5), Accuracy::Low);
        assert_eq!(Accuracy::from_pci(0.7), Accuracy::Moderate);
        assert_eq!(Accuracy::from_pci(0.74), Accuracy::High);
        assert_eq!(Accuracy::from_pci(0.9), Accuracy::High);
        assert_eq!(Accuracy::from_pci(0.9000001), Accuracy::VeryHigh);
    }

    #[test]
    fn conditional_delta_centered_is_zero() {
        let m = two_predictor_example();
        let cd = conditional_delta(&m, Subset(0b11), &[0.0, 0.0], &RhoGrid::default()).unwrap();
        assert_eq!(cd.mean_delta, 0.0);
    }

    #[test]
    fn conditional_delta_deterministic_world() {
        let m = deterministic_world();
        let model = SubsetModel::new(&m, Subset(1)).unwrap();
        assert_eq!(model.mean_delta(&[3.0]).unwrap(), 3.0);
        assert_eq!(model.conditional_var(1.0).unwrap(), 0.0);
    }

    #[test]
    fn conditional_delta_doubles_with_outcome() {
        let m = two_predictor_example();
        let m2 = m.scale_outcome(2.0);
        let grid = RhoGrid::default();
        let s = [1.3, -0.4];
        let a = conditional_delta(&m, Subset(0b11), &s, &grid).unwrap();
        let b = conditional_delta(&m2, Subset(0b11), &s, &grid).unwrap();
        assert!((b.mean_delta - 2.0 * a.mean_delta).abs() < 1e-12);
        for (x, y) in a.sd_delta_given_s.iter().zip(&b.sd_delta_given_s) {
            assert!((y - 2.0 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_delta_missing_value() {
        let m = two_predictor_example();
        let r = conditional_delta(&m, Subset(0b10), &[0.0, f64::NAN], &RhoGrid::default());
        assert!(matches!(r, Err(Error::Domain(_))));
        assert!(conditional_delta(&m, Subset(0b01), &[0.5, f64::NAN], &RhoGrid::default()).is_ok());
    }

    #[test]
    fn subset_bounds_checked() {
        let m = two_predictor_example();
        assert!(matches!(SubsetModel::new(&m, Subset(0)), Err(Error::Domain(_))));
        assert!(matches!(SubsetModel::new(&m, Subset(0b100)), Err(Error::Domain(_))));
    }

    fn random_joint(seed: u64, p: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = p + 2;
        let a = DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
        let scale = DVector::<f64>::from_fn(n, |_, _| rng.random_range(0.2..5.0));
        let mut j = &a * a.transpose() + DMatrix::identity(n, n) * 0.05;
        for r in 0..n {
            for c in 0..n {
                j[(r, c)] *= scale[r] * scale[c];
            }
        }
        j
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn feasible_set_matches_oracle_and_is_contiguous(seed in any::<u64>(), p in 1usize..5, mask in 1u64..16) {
            let m = moments_from_joint(&random_joint(seed, p), &vec![0.0; p + 2]);
            let subset = Subset(mask & ((1 << p) - 1));
            prop_assume!(!subset.is_empty());
            let grid = RhoGrid::default();
            let range = feasible_rhos(&m, subset, &grid).unwrap();
            let oracle: Vec<bool> = grid.values().iter().map(|&r| oracle_feasible(&m, subset, r)).collect();
            prop_assert_eq!(&range.mask, &oracle);
            let first = oracle.iter().position(|&b| b).unwrap();
            let last = oracle.iter().rposition(|&b| b).unwrap();
            prop_assert!(oracle[first..=last].iter().all(|&b| b));
        }

        #[test]
        fn pci_monotone_in_nested_subsets(seed in any::<u64>(), a in 1u64..32, b in 0u64..32) {
            let p = 5;
            let m = moments_from_joint(&random_joint(seed, p), &vec![0.0; p + 2]);
            let small = SubsetModel::new(&m, Subset(a)).unwrap();
            let big = SubsetModel::new(&m, Subset(a | b)).unwrap();
            for &rho in RhoGrid::default().values() {
                if small.is_feasible(rho) && big.is_feasible(rho) {
                    prop_assert!(small.pci(rho).unwrap() <= big.pci(rho).unwrap() + 1e-12);
                }
            }
        }

        #[test]
        fn pci_invariant_to_outcome_scale(seed in any::<u64>(), c in 0.01f64..100.0) {
            let m = moments_from_joint(&random_joint(seed, 3), &[0.0; 5]);
            let a = SubsetModel::new(&m, Subset(0b111)).unwrap();
            let b = SubsetModel::new(&m.scale_outcome(c), Subset(0b111)).unwrap();
            for &rho in RhoGrid::default().values() {
                if a.is_feasible(rho) && b.is_feasible(rho) {
                    prop_assert!((a.pci(rho).unwrap() - b.pci(rho).unwrap()).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn pci_invariant_to_predictor_linear_maps(seed in any::<u64>()) {
            let m = moments_from_joint(&random_joint(seed, 3), &[0.0; 5]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
            let a = DMatrix::<f64>::from_fn(3, 3, |_, _| rng.sample(StandardNormal)) + DMatrix::identity(3, 3) * 2.0;
            prop_assume!(a.determinant().abs() > 0.1);
            let b = DVector::<f64>::from_fn(3, |_, _| rng.sample(StandardNormal));
            let mapped = m.map_predictors(&a, &b);
            let x = SubsetModel::new(&m, Subset(0b111)).unwrap();
            let y = SubsetModel::new(&mapped, Subset(0b111)).unwrap();
            prop_assert!((x.explained() - y.explained()).abs() < 1e-10 * (1.0 + x.explained()));
        }

        #[test]
        fn var_delta_strictly_decreasing(seed in any::<u64>()) {
            let m = moments_from_joint(&random_joint(seed, 2), &[0.0; 4]);
            let model = SubsetModel::new(&m, Subset(0b11)).unwrap();
            let grid = RhoGrid::default();
            for w in grid.values().windows(2) {
                prop_assert!(model.var_delta(w[1]) < model.var_delta(w[0]));
            }
            if model.explained() > 0.0 {
                let range = feasible_rhos(&m, Subset(0b11), &grid).unwrap();
                let pcis: Vec<f64> = range.rhos(&grid).iter().map(|&r| model.pci(r).unwrap()).collect();
                for w in pcis.windows(2) {
                    prop_assert!(w[1] > w[0]);
                }
            }
        }
    }
}
