//! Kaplan-Meier estimation and the two-group log-rank test, plus the audit of
//! treated-vs-control survival inside each responder class.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::dataset::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::responders::{ResponderClass, SuccessCurve};

/// Horizon (months) for the long-term survivor summary.
pub const LONG_TERM_MONTHS: f64 = 24.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub event_times: Vec<f64>,
    pub survival: Vec<f64>,
    /// Number at risk just before each event time.
    pub at_risk: Vec<usize>,
    pub deaths: Vec<usize>,
    pub n: usize,
    /// Largest observed time (event or censoring); the curve is defined up to here.
    pub last_time: f64,
}

impl KmCurve {
    /// Right-continuous step function value at `t`.
    pub fn survival_at(&self, t: f64) -> f64 {
        let k = self.event_times.partition_point(|&e| e <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }

    /// First time with S(t) ≤ 0.5, if reached.
    pub fn median(&self) -> Option<f64> {
        self.survival
            .iter()
            .position(|&s| s <= 0.5)
            .map(|i| self.event_times[i])
    }
}

fn sorted_observations(times: &[f64], events: &[bool]) -> Result<Vec<(f64, bool)>> {
    if times.len() != events.len() {
        return Err(Error::Domain(format!(
            "{} times but {} event flags",
            times.len(),
            events.len()
        )));
    }
    if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::Domain(format!("survival time {t} is not positive")));
    }
    let mut obs: Vec<(f64, bool)> = times.iter().copied().zip(events.iter().copied()).collect();
    obs.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
    Ok(obs)
}

/// Product-limit estimator. At tied times deaths are counted before censorings.
pub fn km_estimate(times: &[f64], events: &[bool]) -> Result<KmCurve> {
    if times.is_empty() {
        return Err(Error::Domain("Kaplan-Meier needs at least one observation".into()));
    }
    let obs = sorted_observations(times, events)?;
    let n = obs.len();
    let mut curve = KmCurve {
        event_times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        deaths: Vec::new(),
        n,
        last_time: obs[n - 1].0,
    };
    let mut s = 1.0;
    let mut censored = false;
    let mut i = 0;
    while i < n {
        let t = obs[i].0;
        let at_risk = n - i;
        let mut deaths = 0;
        let mut j = i;
        while j < n && obs[j].0 == t {
            deaths += obs[j].1 as usize;
            j += 1;
        }
        if deaths > 0 {
            // Before any censoring the product telescopes to a count ratio.
            s = if censored {
                s * ((at_risk - deaths) as f64 / at_risk as f64)
            } else {
                (at_risk - deaths) as f64 / n as f64
            };
            curve.event_times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(at_risk);
            curve.deaths.push(deaths);
        }
        censored |= j - i > deaths;
        i = j;
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRankResult {
    pub statistic: f64,
    pub p_value: f64,
    pub observed: [f64; 2],
    pub expected: [f64; 2],
    pub variance: f64,
}

/// Upper tail of the chi-square distribution with one degree of freedom,
/// Q(1/2, x/2) by the regularized incomplete gamma function.
pub fn chi2_1df_upper(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        gamma_ur(0.5, 0.5 * x)
    }
}

/// Unweighted two-group log-rank test.
pub fn log_rank(t1: &[f64], e1: &[bool], t2: &[f64], e2: &[bool]) -> Result<LogRankResult> {
    if t1.is_empty() || t2.is_empty() {
        return Err(Error::DegenerateTest("both groups need at least one patient".into()));
    }
    let mut obs: Vec<(f64, bool, usize)> = sorted_observations(t1, e1)?
        .into_iter()
        .map(|(t, e)| (t, e, 0))
        .chain(sorted_observations(t2, e2)?.into_iter().map(|(t, e)| (t, e, 1)))
        .collect();
    obs.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));

    let mut at_risk = [t1.len() as f64, t2.len() as f64];
    let mut observed = [0.0; 2];
    let mut expected = [0.0; 2];
    let mut variance = 0.0;
    let mut i = 0;
    while i < obs.len() {
        let t = obs[i].0;
        let mut d = [0.0; 2];
        let mut left = [0.0; 2];
        let mut j = i;
        while j < obs.len() && obs[j].0 == t {
            let g = obs[j].2;
            if obs[j].1 {
                d[g] += 1.0;
            }
            left[g] += 1.0;
            j += 1;
        }
        let dt = d[0] + d[1];
        if dt > 0.0 {
            let n = at_risk[0] + at_risk[1];
            observed[0] += d[0];
            observed[1] += d[1];
            expected[0] += at_risk[0] * dt / n;
            expected[1] += at_risk[1] * dt / n;
            if n > 1.0 {
                variance += at_risk[0] * at_risk[1] * dt * (n - dt) / (n * n * (n - 1.0));
            }
        }
        at_risk[0] -= left[0];
        at_risk[1] -= left[1];
        i = j;
    }
    if !(variance > 0.0) {
        return Err(Error::DegenerateTest(
            "log-rank variance is zero (no informative events)".into(),
        ));
    }
    // Symmetric in the group labels: O1 - E1 = -(O2 - E2) in exact arithmetic.
    let diff = 0.5 * ((observed[0] - expected[0]) - (observed[1] - expected[1]));
    let statistic = diff * diff / variance;
    Ok(LogRankResult {
        statistic,
        p_value: chi2_1df_upper(statistic),
        observed,
        expected,
        variance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSurvival {
    pub n: usize,
    pub events: usize,
    pub km: KmCurve,
    pub survival_at_24_months: f64,
    /// Patients whose observed time exceeds 24 months.
    pub beyond_24_months: usize,
    /// Observed times in ascending order; used for at-risk tables.
    #[serde(skip_serializing, default)]
    pub sorted_times: Vec<f64>,
}

impl ArmSurvival {
    /// Patients still under observation at `t`.
    pub fn at_risk(&self, t: f64) -> usize {
        self.sorted_times.len() - self.sorted_times.partition_point(|&s| s < t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAudit {
    pub class: ResponderClass,
    pub treated: Option<ArmSurvival>,
    pub control: Option<ArmSurvival>,
    /// Treated vs control; absent for the descriptive Rare class or skipped cells.
    pub log_rank: Option<LogRankResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupAudit {
    pub classes: Vec<ClassAudit>,
    pub warnings: Vec<String>,
}

impl SubgroupAudit {
    pub fn class(&self, c: ResponderClass) -> &ClassAudit {
        self.classes
            .iter()
            .find(|a| a.class == c)
            .expect("every class is audited")
    }
}

fn arm_survival(times: &[f64], events: &[bool]) -> Result<Option<ArmSurvival>> {
    if times.is_empty() {
        return Ok(None);
    }
    let km = km_estimate(times, events)?;
    Ok(Some(ArmSurvival {
        n: times.len(),
        events: events.iter().filter(|&&e| e).count(),
        survival_at_24_months: km.survival_at(LONG_TERM_MONTHS),
        beyond_24_months: times.iter().filter(|&&t| t > LONG_TERM_MONTHS).count(),
        sorted_times: {
            let mut v = times.to_vec();
            v.sort_by(f64::total_cmp);
            v
        },
        km,
    }))
}

/// KM per arm within each responder class, and a treated-vs-control log-rank
/// test for the Good and Bad classes. Empty cells are skipped with a warning.
pub fn subgroup_audit(ds: &Dataset, curves: &[SuccessCurve]) -> Result<SubgroupAudit> {
    if curves.len() != ds.len() {
        return Err(Error::Validation(format!(
            "{} success curves for {} records",
            curves.len(),
            ds.len()
        )));
    }
    for (r, c) in ds.records().iter().zip(curves) {
        if r.id != c.patient_id {
            return Err(Error::Validation(format!(
                "curve for `{}` does not align with record `{}`",
                c.patient_id, r.id
            )));
        }
    }
    let mut warnings = Vec::new();
    let mut classes = Vec::new();
    for class in [ResponderClass::Good, ResponderClass::Bad, ResponderClass::Rare] {
        let mut cells: [(Vec<f64>, Vec<bool>); 2] = Default::default();
        for (r, c) in ds.records().iter().zip(curves) {
            if c.classification == class {
                let cell = &mut cells[(r.arm == Arm::Treated) as usize];
                cell.0.push(r.time);
                cell.1.push(r.event);
            }
        }
        let [(tc, ec), (tt, et)] = cells;
        let control = arm_survival(&tc, &ec)?;
        let treated = arm_survival(&tt, &et)?;
        let log_rank = if class == ResponderClass::Rare {
            None
        } else if tt.is_empty() || tc.is_empty() {
            warnings.push(format!(
                "{class} responders: {} treated and {} control patients; log-rank comparison skipped",
                tt.len(),
                tc.len()
            ));
            None
        } else {
            match log_rank(&tt, &et, &tc, &ec) {
                Ok(lr) => Some(lr),
                Err(Error::DegenerateTest(msg)) => {
                    warnings.push(format!("{class} responders: log-rank skipped ({msg})"));
                    None
                }
                Err(e) => return Err(e),
            }
        };
        classes.push(ClassAudit {
            class,
            treated,
            control,
            log_rank,
        });
    }
    Ok(SubgroupAudit { classes, warnings })
}

/// Whole-trial comparison of treated against control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmComparison {
    pub treated: ArmSurvival,
    pub control: ArmSurvival,
    pub log_rank: Option<LogRankResult>,
    pub warnings: Vec<String>,
}

pub fn compare_arms(ds: &Dataset) -> Result<ArmComparison> {
    let mut cells: [(Vec<f64>, Vec<bool>); 2] = Default::default();
    for r in ds.records() {
        let cell = &mut cells[(r.arm == Arm::Treated) as usize];
        cell.0.push(r.time);
        cell.1.push(r.event);
    }
    let [(tc, ec), (tt, et)] = cells;
    let (Some(control), Some(treated)) = (arm_survival(&tc, &ec)?, arm_survival(&tt, &et)?) else {
        return Err(Error::InsufficientData(
            "both arms need at least one patient for a survival comparison".into(),
        ));
    };
    let mut warnings = Vec::new();
    let log_rank = match log_rank(&tt, &et, &tc, &ec) {
        Ok(lr) => Some(lr),
        Err(Error::DegenerateTest(msg)) => {
            warnings.push(format!("log-rank skipped ({msg})"));
            None
        }
        Err(e) => return Err(e),
    };
    Ok(ArmComparison {
        treated,
        control,
        log_rank,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::EndpointTransform;
    use proptest::prelude::*;

    #[test]
    fn km_without_censoring() {
        let km = km_estimate(&[1.0, 2.0, 3.0], &[true; 3]).unwrap();
        assert_eq!(km.survival, vec![2.0 / 3.0, 1.0 / 3.0, 0.0]);
        assert_eq!(km.at_risk, vec![3, 2, 1]);
    }

    #[test]
    fn km_hand_example_with_censoring() {
        let km = km_estimate(&[2.0, 4.0, 6.0, 8.0, 10.0], &[true, false, true, false, true]).unwrap();
        assert_eq!(km.event_times, vec![2.0, 6.0, 10.0]);
        let expected = [4.0 / 5.0, 8.0 / 15.0, 0.0];
        for (s, e) in km.survival.iter().zip(expected) {
            assert!((s - e).abs() < 1e-12);
        }
        assert_eq!(km.survival_at(5.0), km.survival[0]);
        assert_eq!(km.survival_at(1.9), 1.0);
        assert_eq!(km.at_risk, vec![5, 3, 1]);
    }

    #[test]
    fn km_all_censored() {
        let km = km_estimate(&[1.0, 5.0], &[false, false]).unwrap();
        assert!(km.event_times.is_empty());
        assert_eq!(km.survival_at(100.0), 1.0);
    }

    #[test]
    fn km_ties_deaths_before_censoring() {
        let km = km_estimate(&[3.0, 3.0, 5.0], &[false, true, true]).unwrap();
        assert_eq!(km.at_risk, vec![3, 1]);
        assert!((km.survival[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn km_errors() {
        assert!(km_estimate(&[], &[]).is_err());
        assert!(km_estimate(&[1.0], &[]).is_err());
        assert!(km_estimate(&[0.0], &[true]).is_err());
    }

    #[test]
    fn log_rank_identical_groups() {
        let t = [1.0, 3.0, 3.0, 7.0, 9.0];
        let e = [true, false, true, true, false];
        let r = log_rank(&t, &e, &t, &e).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_rank_hand_computed() {
        // Event times 1..3 carry all the information (group 1 is empty after 3):
        // E1 = 3/6 + 2/5 + 1/4 = 1.15, V = 9/36 + 6/25 + 3/16 = 0.6775.
        let r = log_rank(&[1.0, 2.0, 3.0], &[true; 3], &[4.0, 5.0, 6.0], &[true; 3]).unwrap();
        let expected = (3.0f64 - 1.15).powi(2) / 0.6775;
        assert!((r.statistic - expected).abs() < 1e-9, "{} vs {expected}", r.statistic);
        assert!((r.expected[0] - 1.15).abs() < 1e-12);
        assert!((r.variance - 0.6775).abs() < 1e-12);
        assert!((r.p_value - chi2_1df_upper(expected)).abs() < 1e-15);
    }

    #[test]
    fn log_rank_no_events_is_degenerate() {
        let r = log_rank(&[1.0], &[false], &[2.0], &[false]);
        assert!(matches!(r, Err(Error::DegenerateTest(_))));
    }

    #[test]
    fn chi2_tail_matches_reference_values() {
        // erfc(sqrt(x / 2)) evaluated at 30 significant digits.
        let reference = [
            (1e-8, 0.999920211544052694223511661132),
            (0.01, 0.920344325445942036242867279973),
            (0.5, 0.479500122186953462317253346108),
            (1.0, 0.317310507862914102829534908736),
            (3.841458820694124, 0.0500000000000000574353696875729),
            (10.0, 0.00156540225800254967749980397839),
            (40.0, 2.53962858947086497065336207702e-10),
        ];
        for (x, q) in reference {
            assert!((chi2_1df_upper(x) - q).abs() < 1e-12, "{x}");
        }
        assert_eq!(chi2_1df_upper(0.0), 1.0);
        assert!((chi2_1df_upper(3.841458820694124) - 0.05).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn log_rank_label_swap_and_scaling(
            a in prop::collection::vec((1u32..50, any::<bool>()), 1..20),
            b in prop::collection::vec((1u32..50, any::<bool>()), 1..20),
            c in 0.1f64..10.0,
        ) {
            let (t1, e1): (Vec<f64>, Vec<bool>) = a.iter().map(|&(t, e)| (t as f64, e)).unzip();
            let (t2, e2): (Vec<f64>, Vec<bool>) = b.iter().map(|&(t, e)| (t as f64, e)).unzip();
            let Ok(r) = log_rank(&t1, &e1, &t2, &e2) else { return Ok(()); };
            let s = log_rank(&t2, &e2, &t1, &e1).unwrap();
            prop_assert_eq!(r.statistic, s.statistic);
            prop_assert_eq!(r.p_value, s.p_value);
            let scale = |t: &[f64]| t.iter().map(|x| x * c).collect::<Vec<_>>();
            let k = log_rank(&scale(&t1), &e1, &scale(&t2), &e2).unwrap();
            prop_assert!((k.statistic - r.statistic).abs() < 1e-12 * (1.0 + r.statistic));
        }

        #[test]
        fn km_no_censoring_is_empirical_survival(ts in prop::collection::vec(1u32..30, 1..40)) {
            let times: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
            let km = km_estimate(&times, &vec![true; times.len()]).unwrap();
            let n = times.len();
            for (&t, &s) in km.event_times.iter().zip(&km.survival) {
                let beyond = times.iter().filter(|&&x| x > t).count();
                prop_assert_eq!(s, beyond as f64 / n as f64);
            }
        }

        #[test]
        fn km_order_invariant(mut obs in prop::collection::vec((1u32..30, any::<bool>()), 1..40)) {
            let split = |o: &[(u32, bool)]| -> (Vec<f64>, Vec<bool>) { o.iter().map(|&(t, e)| (t as f64, e)).unzip() };
            let (t, e) = split(&obs);
            let a = km_estimate(&t, &e).unwrap();
            obs.reverse();
            let (t, e) = split(&obs);
            prop_assert_eq!(a, km_estimate(&t, &e).unwrap());
        }
    }

    fn curve(id: &str, class: ResponderClass) -> SuccessCurve {
        SuccessCurve {
            patient_id: id.into(),
            rhos: vec![0.0],
            prob_by_rho: vec![0.5],
            classification: class,
            mean_delta: 0.0,
            sd_delta_given_s: vec![1.0],
        }
    }

    #[test]
    fn single_arm_dataset_skips_comparisons() {
        let rows = (0..4).map(|i| (format!("p{i}"), Arm::Treated, 1.0 + i as f64, true, vec![i as f64]));
        let ds = Dataset::from_raw(vec!["a".into()], rows, EndpointTransform::Identity).unwrap();
        let curves: Vec<_> = (0..4)
            .map(|i| curve(&format!("p{i}"), if i < 2 { ResponderClass::Good } else { ResponderClass::Bad }))
            .collect();
        let audit = subgroup_audit(&ds, &curves).unwrap();
        assert!(audit.class(ResponderClass::Good).log_rank.is_none());
        assert!(audit.class(ResponderClass::Bad).log_rank.is_none());
        assert_eq!(audit.warnings.len(), 2);
    }

    #[test]
    fn all_rare_skips_good_and_bad() {
        let rows = (0..4).map(|i| {
            let arm = if i % 2 == 0 { Arm::Control } else { Arm::Treated };
            (format!("p{i}"), arm, 1.0 + i as f64, true, vec![i as f64])
        });
        let ds = Dataset::from_raw(vec!["a".into()], rows, EndpointTransform::Identity).unwrap();
        let curves: Vec<_> = (0..4).map(|i| curve(&format!("p{i}"), ResponderClass::Rare)).collect();
        let audit = subgroup_audit(&ds, &curves).unwrap();
        assert_eq!(audit.warnings.len(), 2);
        let rare = audit.class(ResponderClass::Rare);
        assert_eq!(rare.treated.as_ref().unwrap().n, 2);
        assert!(rare.log_rank.is_none());
    }

    #[test]
    fn misaligned_curves_rejected() {
        let rows = (0..2).map(|i| (format!("p{i}"), Arm::Control, 1.0, true, vec![i as f64]));
        let ds = Dataset::from_raw(vec!["a".into()], rows, EndpointTransform::Identity).unwrap();
        let curves = vec![curve("p1", ResponderClass::Rare), curve("p0", ResponderClass::Rare)];
        assert!(subgroup_audit(&ds, &curves).is_err());
    }
    #[test]
    fn arm_comparison_and_at_risk() {
        let rows = [(1.0, true, Arm::Control), (2.0, false, Arm::Control), (3.0, true, Arm::Treated), (4.0, true, Arm::Treated)];
        let ds = Dataset::from_raw(
            vec!["x".into()],
            rows.iter()
                .enumerate()
                .map(|(i, &(t, e, a))| (format!("p{i}"), a, t, e, vec![i as f64])),
            EndpointTransform::Identity,
        )
        .unwrap();
        let cmp = compare_arms(&ds).unwrap();
        assert_eq!(cmp.treated.n, 2);
        assert_eq!(cmp.control.events, 1);
        assert!(cmp.log_rank.is_some());
        assert_eq!(cmp.control.at_risk(0.5), 2);
        assert_eq!(cmp.control.at_risk(1.5), 1);
        assert_eq!(cmp.control.at_risk(2.0), 1);
        assert_eq!(cmp.control.at_risk(2.5), 0);
    }

}
