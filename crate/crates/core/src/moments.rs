//! Identifiable first and second moments of `(Y0, Y1, S)` from the two arms.
//!
//! The control arm identifies the moments of `Y0`, the treated arm those of
//! `Y1`, and both arms together those of the pre-treatment predictors `S`.
//! The cross moment `Cov(Y0, Y1)` is never observed; it is swept by the
//! sensitivity grid in [`crate::causal`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::{Arm, Dataset, PatientRecord};
use crate::error::{Error, Result};

/// Minimum eigenvalue accepted for the predictor covariance.
pub const PD_TOLERANCE: f64 = 1e-10;

/// Largest accepted condition number of the predictor correlation matrix.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimates {
    pub mu0: f64,
    pub mu1: f64,
    pub var0: f64,
    pub var1: f64,
    #[serde(rename = "muS")]
    pub mu_s: Vec<f64>,
    #[serde(rename = "SigmaS", with = "matrix_rows")]
    pub sigma_s: DMatrix<f64>,
    #[serde(rename = "cov0S")]
    pub cov0_s: Vec<f64>,
    #[serde(rename = "cov1S")]
    pub cov1_s: Vec<f64>,
    pub n0: usize,
    pub n1: usize,
    pub predictor_names: Vec<String>,
}

impl MomentEstimates {
    pub fn p(&self) -> usize {
        self.mu_s.len()
    }

    /// Checks the structural invariants; used after deserialization and by
    /// hand-built configurations.
    pub fn check(&self) -> Result<()> {
        let p = self.p();
        if p == 0 {
            return Err(Error::Validation("moments need at least one predictor".into()));
        }
        if self.cov0_s.len() != p
            || self.cov1_s.len() != p
            || self.sigma_s.nrows() != p
            || self.sigma_s.ncols() != p
            || self.predictor_names.len() != p
        {
            return Err(Error::Validation("moment dimensions disagree".into()));
        }
        if !(self.var0 > 0.0 && self.var1 > 0.0) {
            return Err(Error::Validation(format!(
                "endpoint variances must be positive (var0 = {}, var1 = {})",
                self.var0, self.var1
            )));
        }
        for i in 0..p {
            for j in 0..i {
                let (a, b) = (self.sigma_s[(i, j)], self.sigma_s[(j, i)]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::Validation("SigmaS is not symmetric".into()));
                }
            }
        }
        check_conditioning(&self.sigma_s, &self.predictor_names)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: MomentEstimates = serde_json::from_str(text)?;
        m.check()?;
        Ok(m)
    }

    /// Multiplies the endpoint by `c` in both arms.
    pub fn scale_outcome(&self, c: f64) -> MomentEstimates {
        MomentEstimates {
            mu0: c * self.mu0,
            mu1: c * self.mu1,
            var0: c * c * self.var0,
            var1: c * c * self.var1,
            cov0_s: self.cov0_s.iter().map(|v| c * v).collect(),
            cov1_s: self.cov1_s.iter().map(|v| c * v).collect(),
            ..self.clone()
        }
    }

    /// Applies `s -> a s + b` to the predictor vector, with `a` square of size p.
    pub fn map_predictors(&self, a: &DMatrix<f64>, b: &DVector<f64>) -> MomentEstimates {
        let mu = a * DVector::from_column_slice(&self.mu_s) + b;
        let sigma = a * &self.sigma_s * a.transpose();
        let c0 = a * DVector::from_column_slice(&self.cov0_s);
        let c1 = a * DVector::from_column_slice(&self.cov1_s);
        MomentEstimates {
            mu_s: mu.iter().copied().collect(),
            sigma_s: (&sigma + sigma.transpose()) * 0.5,
            cov0_s: c0.iter().copied().collect(),
            cov1_s: c1.iter().copied().collect(),
            ..self.clone()
        }
    }
}

struct ArmMoments {
    n: usize,
    mean_y: f64,
    mean_s: DVector<f64>,
    ss_y: f64,
    cross: DVector<f64>,
    scatter: DMatrix<f64>,
}

fn arm_moments(rows: &[&PatientRecord], p: usize) -> ArmMoments {
    let n = rows.len();
    let nf = n as f64;
    let mean_y = rows.iter().map(|r| r.outcome).sum::<f64>() / nf;
    let mut mean_s = DVector::zeros(p);
    for r in rows {
        for j in 0..p {
            mean_s[j] += r.predictors[j];
        }
    }
    mean_s /= nf;

    let mut ss_y = 0.0;
    let mut cross = DVector::zeros(p);
    let mut scatter = DMatrix::zeros(p, p);
    let mut dev = DVector::zeros(p);
    for r in rows {
        let dy = r.outcome - mean_y;
        ss_y += dy * dy;
        for j in 0..p {
            dev[j] = r.predictors[j] - mean_s[j];
        }
        cross.axpy(dy, &dev, 1.0);
        for i in 0..p {
            for j in 0..=i {
                scatter[(i, j)] += dev[i] * dev[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            scatter[(j, i)] = scatter[(i, j)];
        }
    }
    ArmMoments {
        n,
        mean_y,
        mean_s,
        ss_y,
        cross,
        scatter,
    }
}

/// Unbiased sample moments from uncensored records.
///
/// Records are visited in ascending id order so the result is bit-identical
/// under any permutation of the input rows.
pub fn estimate_moments(ds: &Dataset) -> Result<MomentEstimates> {
    let p = ds.p();
    let mut rows: Vec<&PatientRecord> = ds.records().iter().filter(|r| r.event).collect();
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    let control: Vec<&PatientRecord> = rows.iter().copied().filter(|r| r.arm == Arm::Control).collect();
    let treated: Vec<&PatientRecord> = rows.iter().copied().filter(|r| r.arm == Arm::Treated).collect();
    for (arm, n) in [(Arm::Control, control.len()), (Arm::Treated, treated.len())] {
        if n < p + 2 {
            return Err(Error::InsufficientData(format!(
                "{arm} arm has {n} uncensored records; at least p + 2 = {} required",
                p + 2
            )));
        }
    }
    let a0 = arm_moments(&control, p);
    let a1 = arm_moments(&treated, p);

    let n_total = (a0.n + a1.n) as f64;
    let mu_s = (&a0.mean_s * a0.n as f64 + &a1.mean_s * a1.n as f64) / n_total;
    let sigma_s = (&a0.scatter + &a1.scatter) / (n_total - 2.0);
    let d0 = (a0.n - 1) as f64;
    let d1 = (a1.n - 1) as f64;

    let m = MomentEstimates {
        mu0: a0.mean_y,
        mu1: a1.mean_y,
        var0: a0.ss_y / d0,
        var1: a1.ss_y / d1,
        mu_s: mu_s.iter().copied().collect(),
        sigma_s,
        cov0_s: (a0.cross / d0).iter().copied().collect(),
        cov1_s: (a1.cross / d1).iter().copied().collect(),
        n0: a0.n,
        n1: a1.n,
        predictor_names: ds.predictor_names().to_vec(),
    };
    if !(m.var0 > 0.0 && m.var1 > 0.0) {
        return Err(Error::InsufficientData(
            "endpoint is constant within an arm; variance must be positive".into(),
        ));
    }
    check_conditioning(&m.sigma_s, &m.predictor_names)?;
    Ok(m)
}

/// Rejects a predictor covariance that is not safely positive definite.
///
/// Conditioning is judged on the correlation matrix so that predictor units
/// do not matter; the raw minimum eigenvalue must also exceed [`PD_TOLERANCE`].
fn check_conditioning(sigma: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let p = sigma.nrows();
    let degenerate: Vec<String> = (0..p)
        .filter(|&j| !(sigma[(j, j)] > PD_TOLERANCE))
        .map(|j| names[j].clone())
        .collect();
    if !degenerate.is_empty() {
        return Err(Error::Singular {
            condition: f64::INFINITY,
            columns: degenerate,
        });
    }
    let sd: Vec<f64> = (0..p).map(|j| sigma[(j, j)].sqrt()).collect();
    let corr = DMatrix::from_fn(p, p, |i, j| sigma[(i, j)] / (sd[i] * sd[j]));
    let eig = SymmetricEigen::new(corr);
    let (imin, &lmin) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("p >= 1");
    let lmax = eig.eigenvalues.max();
    let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    let raw_min = SymmetricEigen::new(sigma.clone()).eigenvalues.min();
    if condition > MAX_CONDITION || raw_min <= PD_TOLERANCE {
        let v = eig.eigenvectors.column(imin);
        let vmax = v.amax();
        let columns = (0..p)
            .filter(|&j| v[j].abs() > 0.05 * vmax)
            .map(|j| names[j].clone())
            .collect();
        return Err(Error::Singular { condition, columns });
    }
    Ok(())
}

mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(D::Error::custom("SigmaS must be a square array of rows"));
        }
        Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::EndpointTransform;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn ds_from(rows: Vec<(Arm, f64, Vec<f64>)>, names: &[&str]) -> Dataset {
        Dataset::from_raw(
            names.iter().map(|s| s.to_string()).collect(),
            rows.into_iter()
                .enumerate()
                .map(|(i, (arm, y, s))| (format!("p{i:06}"), arm, y, true, s)),
            EndpointTransform::Identity,
        )
        .unwrap()
    }

    #[test]
    fn hand_computed_small_example() {
        // Predictor equal to outcome within each arm; p = 1 needs 3 per arm.
        let rows = vec![
            (Arm::Control, 1.0, vec![1.0]),
            (Arm::Control, 2.0, vec![2.0]),
            (Arm::Control, 3.0, vec![3.0]),
            (Arm::Treated, 2.0, vec![2.0]),
            (Arm::Treated, 3.0, vec![3.0]),
            (Arm::Treated, 4.0, vec![4.0]),
        ];
        let m = estimate_moments(&ds_from(rows, &["s"])).unwrap();
        assert_eq!((m.mu0, m.mu1, m.var0, m.var1), (2.0, 3.0, 1.0, 1.0));
        assert_eq!(m.cov0_s, vec![1.0]);
        assert_eq!(m.cov1_s, vec![1.0]);
        // Pooled within-arm scatter (2 + 2) / (6 - 2) and pooled mean 2.5.
        assert_eq!(m.sigma_s[(0, 0)], 1.0);
        assert_eq!(m.mu_s, vec![2.5]);
        assert_eq!((m.n0, m.n1), (3, 3));
    }

    #[test]
    fn censored_rows_are_excluded() {
        let mut ds_rows: Vec<(String, Arm, f64, bool, Vec<f64>)> = (0..4)
            .flat_map(|i| {
                [
                    (format!("c{i}"), Arm::Control, 1.0 + i as f64, true, vec![i as f64 * 0.5]),
                    (format!("t{i}"), Arm::Treated, 2.0 + i as f64, true, vec![(i * i) as f64]),
                ]
            })
            .collect();
        let base = Dataset::from_raw(vec!["s".into()], ds_rows.clone(), EndpointTransform::Identity).unwrap();
        ds_rows.push(("zz".into(), Arm::Control, 100.0, false, vec![50.0]));
        let with_censored = Dataset::from_raw(vec!["s".into()], ds_rows, EndpointTransform::Identity).unwrap();
        assert_eq!(estimate_moments(&base).unwrap(), estimate_moments(&with_censored).unwrap());
    }

    #[test]
    fn duplicated_column_is_singular() {
        let rows = (0..10)
            .map(|i| {
                let arm = if i % 2 == 0 { Arm::Control } else { Arm::Treated };
                let x = (i * i % 7) as f64;
                let z = (i % 3) as f64;
                (arm, 1.0 + i as f64, vec![x, z, x])
            })
            .collect();
        match estimate_moments(&ds_from(rows, &["a", "b", "a_copy"])) {
            Err(Error::Singular { columns, .. }) => assert_eq!(columns, vec!["a", "a_copy"]),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn too_few_uncensored_rows() {
        let rows = vec![
            (Arm::Control, 1.0, vec![1.0]),
            (Arm::Control, 2.0, vec![2.0]),
            (Arm::Treated, 2.0, vec![2.0]),
            (Arm::Treated, 3.0, vec![3.5]),
            (Arm::Treated, 4.0, vec![4.0]),
        ];
        assert!(matches!(
            estimate_moments(&ds_from(rows, &["s"])),
            Err(Error::InsufficientData(_))
        ));
    }

    fn mc_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n)
            .map(|_| {
                let arm = if rng.random::<bool>() { Arm::Treated } else { Arm::Control };
                let y: f64 = rng.sample(StandardNormal);
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                (arm, 5.0 + y, vec![2.0 * a, a + b])
            })
            .collect();
        ds_from(rows, &["a", "b"])
    }

    #[test]
    fn independent_predictors_have_small_covariance() {
        let m = estimate_moments(&mc_dataset(100_000, 7)).unwrap();
        for c in m.cov0_s.iter().chain(&m.cov1_s) {
            assert!(c.abs() < 0.02, "{c}");
        }
    }

    #[test]
    fn pooled_covariance_matches_each_arm() {
        let ds = mc_dataset(100_000, 11);
        let m = estimate_moments(&ds).unwrap();
        // True covariance [[4, 2], [2, 2]].
        let truth = [[4.0, 2.0], [2.0, 2.0]];
        for arm in [Arm::Control, Arm::Treated] {
            let rows: Vec<&PatientRecord> = ds.records().iter().filter(|r| r.arm == arm).collect();
            let am = arm_moments(&rows, 2);
            let arm_cov = am.scatter / (am.n - 1) as f64;
            for i in 0..2 {
                for j in 0..2 {
                    let rel = (m.sigma_s[(i, j)] - arm_cov[(i, j)]).abs() / truth[i][j];
                    assert!(rel < 0.02, "{i}{j}: {rel}");
                }
            }
        }
    }

    #[test]
    fn affine_equivariance_of_one_predictor() {
        let ds = mc_dataset(500, 3);
        let m = estimate_moments(&ds).unwrap();
        let (a, b) = (-3.5, 120.0);
        let mapped = estimate_moments(&ds.map_predictor(1, a, b)).unwrap();
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * (1.0 + y.abs());
        assert!(close(mapped.mu_s[1], a * m.mu_s[1] + b));
        assert!(close(mapped.mu_s[0], m.mu_s[0]));
        assert!(close(mapped.sigma_s[(1, 1)], a * a * m.sigma_s[(1, 1)]));
        assert!(close(mapped.sigma_s[(0, 1)], a * m.sigma_s[(0, 1)]));
        assert!(close(mapped.sigma_s[(0, 0)], m.sigma_s[(0, 0)]));
        assert!(close(mapped.cov0_s[1], a * m.cov0_s[1]));
        assert!(close(mapped.cov1_s[1], a * m.cov1_s[1]));
        assert!(close(mapped.cov1_s[0], m.cov1_s[0]));
    }

    #[test]
    fn permutation_invariance_is_exact() {
        let ds = mc_dataset(300, 5);
        let mut records = ds.records().to_vec();
        records.reverse();
        records.swap(3, 200);
        let shuffled = Dataset::new(ds.predictor_names().to_vec(), records, ds.endpoint_transform()).unwrap();
        assert_eq!(estimate_moments(&ds).unwrap(), estimate_moments(&shuffled).unwrap());
    }

    #[test]
    fn json_uses_documented_field_names() {
        let m = estimate_moments(&mc_dataset(50, 1)).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        for key in ["mu0", "mu1", "var0", "var1", "muS", "SigmaS", "cov0S", "cov1S", "n0", "n1", "predictor_names"] {
            assert!(text.contains(&format!("\"{key}\"")), "{key}");
        }
        assert_eq!(MomentEstimates::from_json(&text).unwrap(), m);
    }

    #[test]
    fn from_json_rejects_non_pd_sigma() {
        let text = r#"{"mu0":0,"mu1":0,"var0":1,"var1":1,"muS":[0,0],"SigmaS":[[1,1],[1,1]],
            "cov0S":[0,0],"cov1S":[0,0],"n0":5,"n1":5,"predictor_names":["a","b"]}"#;
        assert!(matches!(MomentEstimates::from_json(text), Err(Error::Singular { .. })));
    }
}
