//! Seeded synthetic two-arm trials drawn from a fully specified joint normal
//! model of `(Y0, Y1, S)`, with the latent potential outcomes kept as ground
//! truth.
//!
//! Random numbers come from ChaCha8 (`rand_chacha`) seeded with the spec's
//! `seed`; normals use `rand_distr::StandardNormal`. Both are portable, so a
//! given spec produces the same bytes on every platform.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::causal::{compute_pci, Subset};
use crate::dataset::{Arm, Dataset, EndpointTransform, PatientRecord};
use crate::error::{Error, Result};
use crate::moments::MomentEstimates;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub mu0: f64,
    pub mu1: f64,
    pub var0: f64,
    pub var1: f64,
    pub true_rho: f64,
    #[serde(rename = "muS")]
    pub mu_s: Vec<f64>,
    #[serde(rename = "SigmaS")]
    pub sigma_s: Vec<Vec<f64>>,
    #[serde(rename = "cov0S")]
    pub cov0_s: Vec<f64>,
    #[serde(rename = "cov1S")]
    pub cov1_s: Vec<f64>,
    #[serde(default)]
    pub predictor_names: Option<Vec<String>>,
    pub n: usize,
    #[serde(default)]
    pub censoring_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// `time = exp(Y)` under `log`, `time = Y` under `identity`.
    #[serde(default = "default_transform")]
    pub endpoint_transform: EndpointTransform,
}

fn default_transform() -> EndpointTransform {
    EndpointTransform::Log
}

impl SimulationSpec {
    pub fn p(&self) -> usize {
        self.mu_s.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.predictor_names
            .clone()
            .unwrap_or_else(|| (1..=self.p()).map(|j| format!("x{j}")).collect())
    }

    /// Joint covariance of `(Y0, Y1, S)`.
    pub fn joint_covariance(&self) -> DMatrix<f64> {
        let p = self.p();
        let mut a = DMatrix::zeros(p + 2, p + 2);
        a[(0, 0)] = self.var0;
        a[(1, 1)] = self.var1;
        a[(0, 1)] = self.true_rho * (self.var0 * self.var1).sqrt();
        a[(1, 0)] = a[(0, 1)];
        for j in 0..p {
            a[(0, j + 2)] = self.cov0_s[j];
            a[(j + 2, 0)] = self.cov0_s[j];
            a[(1, j + 2)] = self.cov1_s[j];
            a[(j + 2, 1)] = self.cov1_s[j];
            for k in 0..p {
                a[(j + 2, k + 2)] = self.sigma_s[j][k];
            }
        }
        a
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        if p == 0 {
            return Err(Error::Validation("simulation needs at least one predictor".into()));
        }
        let dims_ok = self.cov0_s.len() == p
            && self.cov1_s.len() == p
            && self.sigma_s.len() == p
            && self.sigma_s.iter().all(|r| r.len() == p)
            && self.predictor_names.as_ref().is_none_or(|n| n.len() == p);
        if !dims_ok {
            return Err(Error::Validation("simulation spec dimensions disagree".into()));
        }
        if !(self.var0 > 0.0 && self.var1 > 0.0) {
            return Err(Error::Validation("var0 and var1 must be positive".into()));
        }
        if !(-1.0..=1.0).contains(&self.true_rho) {
            return Err(Error::Validation(format!("true_rho {} outside [-1, 1]", self.true_rho)));
        }
        if !(0.0..1.0).contains(&self.censoring_rate) {
            return Err(Error::Validation(format!(
                "censoring_rate {} outside [0, 1)",
                self.censoring_rate
            )));
        }
        if self.n == 0 {
            return Err(Error::Validation("n must be positive".into()));
        }
        for j in 0..p {
            for k in 0..j {
                if self.sigma_s[j][k] != self.sigma_s[k][j] {
                    return Err(Error::Validation("SigmaS is not symmetric".into()));
                }
            }
        }
        let lmin = SymmetricEigen::new(self.joint_covariance()).eigenvalues.min();
        if lmin < -crate::causal::FEASIBILITY_TOLERANCE {
            return Err(Error::Validation(format!(
                "joint covariance is not positive semidefinite (minimum eigenvalue {lmin:.3e})"
            )));
        }
        Ok(())
    }

    /// The population moments the spec implies; arm sizes are nominal halves.
    pub fn population_moments(&self) -> MomentEstimates {
        let p = self.p();
        MomentEstimates {
            mu0: self.mu0,
            mu1: self.mu1,
            var0: self.var0,
            var1: self.var1,
            mu_s: self.mu_s.clone(),
            sigma_s: DMatrix::from_fn(p, p, |i, j| self.sigma_s[i][j]),
            cov0_s: self.cov0_s.clone(),
            cov1_s: self.cov1_s.clone(),
            n0: self.n / 2,
            n1: self.n - self.n / 2,
            predictor_names: self.names(),
        }
    }

    /// PCI of `subset` at the true correlation.
    pub fn analytic_pci(&self, subset: Subset) -> Result<f64> {
        compute_pci(&self.population_moments(), subset, self.true_rho)
    }
}

/// Lower-triangular `L` with `L L' = a` for positive semidefinite `a`;
/// columns whose pivot vanishes are left at zero.
fn psd_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
    let tol = 1e-12 * scale;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let d = a[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if d > tol {
            let pivot = d.sqrt();
            l[(j, j)] = pivot;
            for i in j + 1..n {
                let s = a[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
                l[(i, j)] = s / pivot;
            }
        } else if d < -1e-8 * scale {
            return Err(Error::Validation(format!(
                "joint covariance is not positive semidefinite (pivot {d:.3e})"
            )));
        }
    }
    Ok(l)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub id: String,
    pub arm: Arm,
    pub y0: f64,
    pub y1: f64,
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: Dataset,
    pub truth: Vec<TruthRow>,
}

/// Draws `spec.n` patients. Per patient the generator is consumed in a fixed
/// order: arm coin, `p + 2` normals, censoring coin, censoring fraction.
pub fn simulate(spec: &SimulationSpec) -> Result<Simulation> {
    spec.validate()?;
    let p = spec.p();
    let l = psd_factor(&spec.joint_covariance())?;
    let mut mean = DVector::zeros(p + 2);
    mean[0] = spec.mu0;
    mean[1] = spec.mu1;
    for j in 0..p {
        mean[j + 2] = spec.mu_s[j];
    }
    let transform = spec.endpoint_transform;
    let width = spec.n.saturating_sub(1).to_string().len().max(4);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.n);
    let mut truth = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let arm = if rng.random::<bool>() { Arm::Treated } else { Arm::Control };
        let z = DVector::<f64>::from_fn(p + 2, |_, _| rng.sample(StandardNormal));
        let v = &mean + &l * z;
        let censor = rng.random::<f64>() < spec.censoring_rate;
        let fraction: f64 = rng.random();
        let id = format!("P{i:0width$}");
        let y = if arm == Arm::Treated { v[1] } else { v[0] };
        let full_time = transform.invert(y);
        if !(full_time.is_finite() && full_time > 0.0) {
            return Err(Error::Validation(format!(
                "patient {id} drew non-positive survival time {full_time}; use the log endpoint transform"
            )));
        }
        // Censoring time uniform on (0, T): the patient is known alive at time·U.
        let (time, event) = if censor {
            (full_time * fraction.max(f64::MIN_POSITIVE), false)
        } else {
            (full_time, true)
        };
        records.push(PatientRecord {
            id: id.clone(),
            arm,
            time,
            outcome: transform.apply(time),
            event,
            predictors: v.rows(2, p).iter().copied().collect(),
        });
        truth.push(TruthRow {
            id,
            arm,
            y0: v[0],
            y1: v[1],
            delta: v[1] - v[0],
        });
    }
    Ok(Simulation {
        dataset: Dataset::new(spec.names(), records, transform)?,
        truth,
    })
}

pub fn write_truth_csv<W: std::io::Write>(truth: &[TruthRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "arm", "y0", "y1", "delta"])?;
    for t in truth {
        w.write_record([
            t.id.clone(),
            t.arm.code().to_string(),
            crate::dataset::format_number(t.y0),
            crate::dataset::format_number(t.y1),
            crate::dataset::format_number(t.delta),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<truth csv>", e))?;
    Ok(())
}

/// A random positive definite spec with `p` predictors, for oracle checks.
pub fn random_spec<R: Rng>(rng: &mut R, p: usize, n: usize, seed: u64) -> SimulationSpec {
    let k = p + 2;
    let a = DMatrix::<f64>::from_fn(k, k, |_, _| rng.sample(StandardNormal));
    let scale: Vec<f64> = (0..k).map(|_| rng.random_range(0.3..2.0)).collect();
    let mut joint = &a * a.transpose() / k as f64 + DMatrix::identity(k, k) * 0.2;
    for i in 0..k {
        for j in 0..k {
            joint[(i, j)] *= scale[i] * scale[j];
        }
    }
    let mu: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..3.0)).collect();
    SimulationSpec {
        mu0: mu[0],
        mu1: mu[1],
        var0: joint[(0, 0)],
        var1: joint[(1, 1)],
        true_rho: joint[(0, 1)] / (joint[(0, 0)] * joint[(1, 1)]).sqrt(),
        mu_s: mu[2..].to_vec(),
        sigma_s: (0..p).map(|i| (0..p).map(|j| joint[(i + 2, j + 2)]).collect()).collect(),
        cov0_s: (0..p).map(|j| joint[(0, j + 2)]).collect(),
        cov1_s: (0..p).map(|j| joint[(1, j + 2)]).collect(),
        predictor_names: None,
        n,
        censoring_rate: 0.0,
        seed,
        endpoint_transform: EndpointTransform::Log,
    }
}

/// Thirteen blood and immunosenescence biomarkers, in column order.
pub const BIOMARKER_NAMES: [&str; 13] = [
    "egf",
    "eosinophils",
    "lymphocytes",
    "neutrophils",
    "platelets",
    "monocytes",
    "nlr",
    "plr",
    "cd19_b",
    "cd8_t",
    "cd8_cd28neg_t",
    "cd4_cd8_ratio",
    "cd4_t",
];

/// Columns of [`BIOMARKER_NAMES`] that modify the treatment effect in [`PlantedTrial`].
pub const PLANTED_INFORMATIVE: [usize; 5] = [12, 0, 6, 5, 3];

const BIOMARKER_SCALE: [(f64, f64); 13] = [
    (900.0, 450.0),
    (3.0, 1.5),
    (25.0, 8.0),
    (60.0, 10.0),
    (280.0, 80.0),
    (7.0, 2.5),
    (3.0, 1.2),
    (150.0, 60.0),
    (10.0, 4.0),
    (30.0, 8.0),
    (20.0, 7.0),
    (1.8, 0.7),
    (40.0, 12.0),
];

/// Trial with 5 effect-modifying biomarkers among 13, on the log-month scale.
///
/// With standardized biomarkers `z`, `Y0 = baseline + γ'z + e0` and
/// `Y1 = baseline + effect_mean + (γ + β)'z + e1`, where `β` equals
/// `effect_loading` on the informative columns and zero elsewhere, `γ` is a
/// prognostic pattern orthogonal to `β`, and `(e0, e1)` have standard
/// deviation `residual_sd` and correlation `residual_corr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTrial {
    pub n: usize,
    pub seed: u64,
    pub censoring_rate: f64,
    pub baseline: f64,
    pub effect_mean: f64,
    pub effect_loading: f64,
    pub prognostic: f64,
    pub residual_sd: f64,
    pub residual_corr: f64,
}

impl Default for PlantedTrial {
    fn default() -> Self {
        PlantedTrial {
            n: 200,
            seed: 1,
            censoring_rate: 0.1,
            baseline: 2.2,
            effect_mean: 0.9,
            effect_loading: 0.3,
            prognostic: 0.1,
            residual_sd: 0.2,
            residual_corr: 0.5,
        }
    }
}

impl PlantedTrial {
    pub fn spec(&self) -> SimulationSpec {
        let p = BIOMARKER_NAMES.len();
        let mut beta = vec![0.0; p];
        for &j in &PLANTED_INFORMATIVE {
            beta[j] = self.effect_loading;
        }
        // Alternating signs over four informative columns: orthogonal to β.
        let mut gamma = vec![0.0; p];
        for (k, &j) in PLANTED_INFORMATIVE[..4].iter().enumerate() {
            gamma[j] = if k % 2 == 0 { self.prognostic } else { -self.prognostic };
        }
        let gamma1: Vec<f64> = gamma.iter().zip(&beta).map(|(g, b)| g + b).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let e2 = self.residual_sd * self.residual_sd;
        let var0 = dot(&gamma, &gamma) + e2;
        let var1 = dot(&gamma1, &gamma1) + e2;
        let cov01 = dot(&gamma, &gamma1) + self.residual_corr * e2;
        let sd: Vec<f64> = BIOMARKER_SCALE.iter().map(|&(_, s)| s).collect();
        SimulationSpec {
            mu0: self.baseline,
            mu1: self.baseline + self.effect_mean,
            var0,
            var1,
            true_rho: cov01 / (var0 * var1).sqrt(),
            mu_s: BIOMARKER_SCALE.iter().map(|&(m, _)| m).collect(),
            sigma_s: (0..p)
                .map(|i| (0..p).map(|j| if i == j { sd[i] * sd[i] } else { 0.0 }).collect())
                .collect(),
            cov0_s: (0..p).map(|j| gamma[j] * sd[j]).collect(),
            cov1_s: (0..p).map(|j| gamma1[j] * sd[j]).collect(),
            predictor_names: Some(BIOMARKER_NAMES.iter().map(|s| s.to_string()).collect()),
            n: self.n,
            censoring_rate: self.censoring_rate,
            seed: self.seed,
            endpoint_transform: EndpointTransform::Log,
        }
    }
}
