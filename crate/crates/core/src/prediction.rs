//! Individual risks, the population recency rate and annual incidence.

use serde::{Deserialize, Serialize};

use crate::error::{RecencyError, Result};
use crate::likelihood::{case_terms, predictors, CaseId};
use crate::model::{pi_recent, ModelSpec, RecencyLabel, Subject, Theta};
use crate::numeric::pairwise_sum;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskPair {
    /// `P(Y = 1 | x)`.
    pub type1: f64,
    /// `P(Y = 1 | s, z, x)`.
    pub type2: Option<f64>,
}

/// Biomarker-only risk.
pub fn type1_risk(subject: &Subject, theta_hat: &Theta) -> Result<f64> {
    pi_recent(&subject.covariates, &theta_hat.beta)
}

/// Risk given the self-reported testing history. Labeled cells are exact.
pub fn type2_risk(subject: &Subject, theta_hat: &Theta, spec: &ModelSpec) -> Result<f64> {
    match subject.label() {
        RecencyLabel::Recent => Ok(1.0),
        RecencyLabel::LongTerm => Ok(0.0),
        RecencyLabel::Unknown => {
            let p = predictors(subject, theta_hat, spec)?;
            let case = CaseId::of(subject.s, subject.z);
            Ok(case_terms(case, &p, spec.p0_identically_one).posterior)
        }
    }
}

pub fn risk_pair(subject: &Subject, theta_hat: &Theta, spec: &ModelSpec, with_type2: bool) -> Result<RiskPair> {
    Ok(RiskPair {
        type1: type1_risk(subject, theta_hat)?,
        type2: if with_type2 {
            Some(type2_risk(subject, theta_hat, spec)?)
        } else {
            None
        },
    })
}

/// Weighted mean Type-2 risk over all subjects.
pub fn recency_rate(data: &[Subject], theta_hat: &Theta, spec: &ModelSpec) -> Result<f64> {
    if data.is_empty() {
        return Err(RecencyError::EmptyData);
    }
    let weighted = data
        .iter()
        .map(|s| type2_risk(s, theta_hat, spec).map(|r| s.w * r))
        .collect::<Result<Vec<f64>>>()?;
    let weights: Vec<f64> = data.iter().map(|s| s.w).collect();
    Ok(pairwise_sum(&weighted) / pairwise_sum(&weights))
}

/// Annual incidence from prevalence, treatment coverage and recency rate.
pub fn incidence(p_hiv: f64, p_art: f64, e_y: f64) -> Result<f64> {
    for (name, v) in [("p_hiv", p_hiv), ("p_art", p_art), ("e_y", e_y)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(RecencyError::InvalidArgument(format!("{name} = {v} is not a probability")));
        }
    }
    let recent = p_hiv * (1.0 - p_art) * e_y;
    let denom = (1.0 - p_hiv) + recent;
    if denom == 0.0 {
        return Err(RecencyError::IncidenceUndefined { p_hiv, p_art, e_y });
    }
    Ok(recent / denom)
}

/// Rule-based recency call on raw ODn and viral load.
pub fn rita_classify(odn: f64, vl: f64) -> bool {
    odn <= 1.5 && vl >= 1000.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn truth(spec: &ModelSpec) -> Theta {
        Theta::from_parts(spec, vec![0.95, -0.53], [7.0, -0.62, -7.0, -5.71], vec![], None).unwrap()
    }

    #[test]
    fn type1_examples() {
        let spec = ModelSpec::new(["odn"]);
        let s = Subject::new(vec![0.0], 0.5, false, 1.0);
        assert!((type1_risk(&s, &truth(&spec)).unwrap() - 0.7211).abs() < 5e-5);
        let zero = Theta::from_parts(&spec, vec![0.0, 0.0], [7.0, 0.0, -7.0, 0.0], vec![], None).unwrap();
        assert_eq!(type1_risk(&s, &zero).unwrap(), 0.5);
        let hi = Subject::new(vec![1.0], 0.5, false, 1.0);
        assert!(type1_risk(&hi, &truth(&spec)).unwrap() < type1_risk(&s, &truth(&spec)).unwrap());
    }

    #[test]
    fn type2_examples() {
        let spec = ModelSpec::new(["odn"]);
        let t = truth(&spec);
        assert_eq!(type2_risk(&Subject::new(vec![0.3], 0.5, false, 1.0), &t, &spec).unwrap(), 1.0);
        assert_eq!(type2_risk(&Subject::new(vec![0.3], 3.0, true, 1.0), &t, &spec).unwrap(), 0.0);
        let r = type2_risk(&Subject::new(vec![0.0], 0.5, true, 1.0), &t, &spec).unwrap();
        let expected = 1.0 / ((-0.95f64).exp() * (1.0 + 4.145f64.exp()) + 1.0);
        assert!((r - expected).abs() < 1e-12, "{r} vs {expected}");
        // long-term branch vanishes when p0 is identically one
        let p0 = ModelSpec::new(["odn"]).with_p0_one(Some(-7.0));
        let t0 = Theta::from_parts(&p0, vec![0.95, -0.53], [0.0, 0.0, -7.0, -5.71], vec![], None).unwrap();
        assert_eq!(type2_risk(&Subject::new(vec![0.0], 2.0, false, 1.0), &t0, &p0).unwrap(), 1.0);
    }

    #[test]
    fn type2_matches_direct_posterior_for_long_cell() {
        let spec = ModelSpec::new(["odn"]);
        let t = truth(&spec);
        let s = 2.5;
        let pi = crate::model::logistic(0.95 - 0.53 * 0.4);
        let p0 = crate::model::logistic(7.0 - 0.62 * (s - 1.0));
        let expected = pi / (pi + (1.0 - pi) * (1.0 - p0));
        let r = type2_risk(&Subject::new(vec![0.4], s, false, 1.0), &t, &spec).unwrap();
        assert!((r - expected).abs() < 1e-12);
    }

    #[test]
    fn recency_rate_of_all_recent_is_one() {
        let spec = ModelSpec::new(["odn"]);
        let data: Vec<Subject> = (0..5).map(|i| Subject::new(vec![i as f64], 0.2, false, 1.0)).collect();
        assert_eq!(recency_rate(&data, &truth(&spec), &spec).unwrap(), 1.0);
        assert!(recency_rate(&[], &truth(&spec), &spec).is_err());
    }

    #[test]
    fn incidence_examples() {
        assert_eq!(incidence(0.0, 0.3, 0.7).unwrap(), 0.0);
        assert_eq!(incidence(0.2, 1.0, 0.7).unwrap(), 0.0);
        let v = incidence(0.1, 0.7, 0.71).unwrap();
        let num = 0.1 * 0.3 * 0.71;
        assert!((v - num / (0.9 + num)).abs() < 1e-15);
        assert!((v - 0.02312).abs() < 1e-5);
        assert!(incidence(1.0, 1.0, 0.5).is_err());
        assert!(incidence(1.2, 0.0, 0.5).is_err());
    }

    #[test]
    fn rita_examples() {
        assert!(rita_classify(1.0, 5000.0));
        assert!(!rita_classify(2.0, 5000.0));
        assert!(!rita_classify(1.0, 500.0));
    }

    proptest! {
        #[test]
        fn type2_monotone_in_s(x in -2.0f64..2.0, s1 in 0.01f64..1.0, s2 in 0.01f64..1.0, t1 in 1.01f64..10.0, t2 in 1.01f64..10.0) {
            let spec = ModelSpec::new(["odn"]);
            let t = truth(&spec);
            let r = |s: f64, z: bool| type2_risk(&Subject::new(vec![x], s, z, 1.0), &t, &spec).unwrap();
            let (a, b) = if s1 < s2 { (s1, s2) } else { (s2, s1) };
            prop_assert!(r(a, true) >= r(b, true) - 1e-15);
            let (a, b) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(r(a, false) >= r(b, false) - 1e-15);
        }

        #[test]
        fn incidence_monotone(p in 0.0f64..0.99, a in 0.0f64..1.0, e in 0.0f64..1.0, d in 0.0f64..0.01) {
            let base = incidence(p, a, e).unwrap();
            prop_assert!(incidence(p + d, a, e).unwrap() >= base);
            prop_assert!(incidence(p, (a - d).max(0.0), e).unwrap() >= base);
            prop_assert!(incidence(p, a, (e + d).min(1.0)).unwrap() >= base);
        }
    }
}
