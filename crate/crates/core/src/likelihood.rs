//! Weighted log pseudo-likelihood and its analytic score.
//!
//! Each subject contributes the log of one of four terms, chosen by its
//! `(s, z)` cell. Cells III and IV mix both values of `Y` and are evaluated
//! with log-sum-exp. All derivatives are taken with respect to three linear
//! predictors (`lp` for `pi`, `q0` for `p0`, `q1` for `p1`) plus the log tilt,
//! then chained onto the flat parameter vector.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{RecencyError, Result};
use crate::model::{linear_predictor, logistic, validate_subjects, ModelSpec, Subject, Theta};
use crate::numeric::{log_add_exp, log_logistic, pairwise_column_sums, pairwise_sum};

/// Subject counts at or above this use rayon. Output is identical either way.
const PARALLEL_MIN_SUBJECTS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaseId {
    /// `s <= 1, z = 0`: recent.
    I,
    /// `s > 1, z = 1`: long-term.
    II,
    /// `s <= 1, z = 1`: unknown.
    III,
    /// `s > 1, z = 0`: unknown.
    IV,
}

impl CaseId {
    pub fn of(s: f64, z: bool) -> CaseId {
        match (s <= 1.0, z) {
            (true, false) => CaseId::I,
            (false, true) => CaseId::II,
            (true, true) => CaseId::III,
            (false, false) => CaseId::IV,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseContribution {
    pub case_id: CaseId,
    /// Unweighted log term; `-inf` only at degenerate parameter values.
    pub log_value: f64,
}

impl CaseContribution {
    pub fn is_degenerate(&self) -> bool {
        !self.log_value.is_finite()
    }
}

/// Linear predictors of one subject under `theta`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Predictors {
    pub lp: f64,
    pub q0: f64,
    pub q1: f64,
    pub log_tilt: f64,
}

pub(crate) fn predictors(subject: &Subject, theta: &Theta, spec: &ModelSpec) -> Result<Predictors> {
    let lp = linear_predictor(&subject.covariates, &theta.beta)?;
    let shift: f64 = spec
        .eta_covariates
        .iter()
        .zip(&theta.gamma)
        .map(|(&j, g)| g * subject.covariates[j])
        .sum();
    let ds = subject.s - 1.0;
    let q0 = theta.eta[0] + theta.eta[1] * ds + shift;
    let q1 = theta.eta[2] + theta.eta[3] * ds + shift;
    let log_tilt = match theta.psi {
        Some([a, b]) if spec.extended => a + b * subject.s,
        _ => 0.0,
    };
    Ok(Predictors {
        lp,
        q0,
        q1,
        log_tilt,
    })
}

/// Log term and its partials with respect to `(lp, q0, q1, log_tilt)`.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CaseTerms {
    pub value: f64,
    pub d_lp: f64,
    pub d_q0: f64,
    pub d_q1: f64,
    pub d_tilt: f64,
    /// `P(Y = 1 | s, z, x)` under the model.
    pub posterior: f64,
}

pub(crate) fn case_terms(case: CaseId, p: &Predictors, p0_one: bool) -> CaseTerms {
    let Predictors {
        lp,
        q0,
        q1,
        log_tilt,
    } = *p;
    let sig = logistic;
    match case {
        CaseId::I => CaseTerms {
            value: log_logistic(lp) + log_tilt + log_logistic(-q1),
            d_lp: sig(-lp),
            d_q1: -sig(q1),
            d_tilt: 1.0,
            posterior: 1.0,
            ..CaseTerms::default()
        },
        CaseId::II => {
            let (log_p0, d_q0) = if p0_one {
                (0.0, 0.0)
            } else {
                (log_logistic(q0), sig(-q0))
            };
            CaseTerms {
                value: log_logistic(-lp) + log_p0,
                d_lp: -sig(lp),
                d_q0,
                posterior: 0.0,
                ..CaseTerms::default()
            }
        }
        CaseId::III => {
            let long = log_logistic(-lp);
            let recent = log_logistic(lp) + log_tilt + log_logistic(q1);
            let value = log_add_exp(long, recent);
            let r = (recent - value).exp();
            CaseTerms {
                value,
                d_lp: -(1.0 - r) * sig(lp) + r * sig(-lp),
                d_q1: r * sig(-q1),
                d_tilt: r,
                posterior: r,
                ..CaseTerms::default()
            }
        }
        CaseId::IV => {
            let long = if p0_one {
                f64::NEG_INFINITY
            } else {
                log_logistic(-lp) + log_logistic(-q0)
            };
            let recent = log_logistic(lp) + log_tilt;
            let value = log_add_exp(long, recent);
            let r = (recent - value).exp();
            let d_q0 = if p0_one { 0.0 } else { -(1.0 - r) * sig(q0) };
            CaseTerms {
                value,
                d_lp: -(1.0 - r) * sig(lp) + r * sig(-lp),
                d_q0,
                d_tilt: r,
                posterior: r,
                ..CaseTerms::default()
            }
        }
    }
}

/// Unweighted log contribution of one subject.
pub fn case_log_contribution(
    subject: &Subject,
    theta: &Theta,
    spec: &ModelSpec,
) -> Result<CaseContribution> {
    theta.check(spec)?;
    let case_id = CaseId::of(subject.s, subject.z);
    let p = predictors(subject, theta, spec)?;
    let terms = case_terms(case_id, &p, spec.p0_identically_one);
    if terms.value.is_nan() {
        return Ok(CaseContribution {
            case_id,
            log_value: f64::NEG_INFINITY,
        });
    }
    Ok(CaseContribution {
        case_id,
        log_value: terms.value,
    })
}

/// `sum_i w_i * log L1_i(theta)`; the density of `s` is not modelled.
pub fn log_pseudo_likelihood(data: &[Subject], theta: &Theta, spec: &ModelSpec) -> Result<f64> {
    validate_subjects(data)?;
    theta.check(spec)?;
    let eval = evaluate(data, theta, spec, None, false, false)?;
    Ok(eval.value)
}

/// Score over the free parameters together with its per-subject pieces.
#[derive(Debug, Clone)]
pub struct Score {
    /// `sum_i m_i`, free parameters in mask order.
    pub total: Vec<f64>,
    /// `m_i` for every subject (already weighted).
    pub per_subject: Vec<Vec<f64>>,
}

impl Score {
    pub fn sup_norm(&self) -> f64 {
        self.total.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

pub fn score(data: &[Subject], theta: &Theta, spec: &ModelSpec) -> Result<Score> {
    validate_subjects(data)?;
    theta.check(spec)?;
    let eval = evaluate(data, theta, spec, None, false, true)?;
    Ok(eval.into_score())
}

/// Result of one pass over the data.
#[derive(Debug, Clone)]
pub(crate) struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Row-major `n x k` per-subject scores (empty unless requested).
    pub per_subject: Vec<f64>,
    pub k: usize,
}

impl Evaluation {
    pub fn into_score(self) -> Score {
        let per_subject = if self.k == 0 {
            Vec::new()
        } else {
            self.per_subject
                .chunks(self.k)
                .map(|c| c.to_vec())
                .collect()
        };
        Score {
            total: self.gradient,
            per_subject,
        }
    }
}

/// Shared evaluation kernel.
///
/// With `mu = Some(..)` each subject also carries the profile term
/// `-log(1 + mu (e_i - 1))` with `mu` held fixed; `augment_mu` appends the
/// derivative of that term with respect to `mu` as an extra score column.
pub(crate) fn evaluate(
    data: &[Subject],
    theta: &Theta,
    spec: &ModelSpec,
    mu: Option<f64>,
    augment_mu: bool,
    want_grad: bool,
) -> Result<Evaluation> {
    let layout = spec.layout();
    let free = theta.free_indices();
    let k = free.len() + usize::from(augment_mu);
    let mut values = vec![0.0; data.len()];
    let mut grads = if want_grad {
        vec![0.0; data.len() * k]
    } else {
        Vec::new()
    };

    let kernel = |subject: &Subject, value: &mut f64, grad: &mut [f64]| -> Result<()> {
        let case = CaseId::of(subject.s, subject.z);
        let p = predictors(subject, theta, spec)?;
        let mut t = case_terms(case, &p, spec.p0_identically_one);
        let mut d_mu = 0.0;
        if let Some(mu) = mu {
            let e = p.log_tilt.exp();
            let denom = 1.0 + mu * (e - 1.0);
            if denom > 0.0 && e.is_finite() {
                t.value -= denom.ln();
                t.d_tilt -= mu * e / denom;
                d_mu = -(e - 1.0) / denom;
            } else {
                t.value = f64::NEG_INFINITY;
            }
        }
        *value = subject.w * if t.value.is_nan() { f64::NEG_INFINITY } else { t.value };
        if grad.is_empty() {
            return Ok(());
        }
        let w = subject.w;
        let ds = subject.s - 1.0;
        let full = |slot: usize| -> f64 {
            let e = layout.eta_offset();
            let g = layout.gamma_offset();
            let ps = layout.psi_offset();
            if slot == 0 {
                t.d_lp
            } else if slot < e {
                t.d_lp * subject.covariates[slot - 1]
            } else if slot == e {
                t.d_q0
            } else if slot == e + 1 {
                t.d_q0 * ds
            } else if slot == e + 2 {
                t.d_q1
            } else if slot == e + 3 {
                t.d_q1 * ds
            } else if slot < ps {
                (t.d_q0 + t.d_q1) * subject.covariates[spec.eta_covariates[slot - g]]
            } else if slot == ps {
                t.d_tilt
            } else {
                t.d_tilt * subject.s
            }
        };
        for (out, &slot) in grad.iter_mut().zip(&free) {
            *out = w * full(slot);
        }
        if augment_mu {
            grad[k - 1] = w * d_mu;
        }
        Ok(())
    };

    let run = |(i, ((subject, value), grad)): (usize, ((&Subject, &mut f64), &mut [f64]))| -> Result<()> {
        kernel(subject, value, grad)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(RecencyError::NonFiniteScore { index: i });
        }
        Ok(())
    };

    if want_grad {
        if data.len() >= PARALLEL_MIN_SUBJECTS {
            data.par_iter()
                .zip(values.par_iter_mut())
                .zip(grads.par_chunks_mut(k.max(1)))
                .enumerate()
                .try_for_each(run)?;
        } else {
            data.iter()
                .zip(values.iter_mut())
                .zip(grads.chunks_mut(k.max(1)))
                .enumerate()
                .try_for_each(run)?;
        }
    } else {
        let mut empty: [f64; 0] = [];
        for (subject, value) in data.iter().zip(values.iter_mut()) {
            kernel(subject, value, &mut empty)?;
        }
    }

    let value = if values.contains(&f64::NEG_INFINITY) {
        f64::NEG_INFINITY
    } else {
        pairwise_sum(&values)
    };
    let gradient = if want_grad {
        pairwise_column_sums(&grads, k)
    } else {
        Vec::new()
    };
    Ok(Evaluation {
        value,
        gradient,
        per_subject: grads,
        k: if want_grad { k } else { 0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{p0_p1, pi_recent};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table3_theta(spec: &ModelSpec) -> Theta {
        Theta::from_parts(spec, vec![0.95, -0.53], [7.0, -0.62, -7.0, -5.71], vec![], None)
            .unwrap()
    }

    /// Direct products of the four cell formulas, no log-space tricks.
    fn brute_force_log_term(subject: &Subject, theta: &Theta, spec: &ModelSpec) -> f64 {
        let pi = pi_recent(&subject.covariates, &theta.beta).unwrap();
        let (p0, p1) = p0_p1(subject.s, &theta.eta, spec.p0_identically_one);
        let e = theta
            .psi
            .map(|[a, b]| (a + b * subject.s).exp())
            .unwrap_or(1.0);
        let s_le_1 = subject.s <= 1.0;
        let term = match (s_le_1, subject.z) {
            (true, false) => pi * e * (1.0 - p1),
            (false, true) => (1.0 - pi) * p0,
            (true, true) => 1.0 - pi + pi * e * p1,
            (false, false) => (1.0 - pi) * (1.0 - p0) + pi * e,
        };
        term.ln()
    }

    fn random_data(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Subject> {
        (0..n)
            .map(|_| {
                Subject::new(
                    (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    rng.random_range(0.05..4.0),
                    rng.random_bool(0.5),
                    rng.random_range(0.2..2.0),
                )
            })
            .collect()
    }

    #[test]
    fn case_examples() {
        let spec = ModelSpec::new(["x"]).full();
        // pi = 0.5, p1 = 0: case III collapses to log(1 - pi).
        let theta = Theta::from_parts(&spec, vec![0.0, 0.0], [0.0, 0.0, -800.0, 0.0], vec![], None)
            .unwrap();
        let c = case_log_contribution(&Subject::new(vec![0.0], 0.5, true, 1.0), &theta, &spec)
            .unwrap();
        assert_eq!(c.case_id, CaseId::III);
        assert!((c.log_value - 0.5f64.ln()).abs() < 1e-15);

        // p0 = 1, pi = 0.3: case IV collapses to log(pi).
        let spec1 = ModelSpec::new(["x"]).with_p0_one(Some(-7.0));
        let b0 = (0.3f64 / 0.7).ln();
        let theta = Theta::from_parts(&spec1, vec![b0, 0.0], [0.0, 0.0, -7.0, -5.0], vec![], None)
            .unwrap();
        let c = case_log_contribution(&Subject::new(vec![0.0], 2.0, false, 1.0), &theta, &spec1)
            .unwrap();
        assert_eq!(c.case_id, CaseId::IV);
        assert!((c.log_value - 0.3f64.ln()).abs() < 1e-14);

        let spec = ModelSpec::new(["odn"]);
        let theta = table3_theta(&spec);
        let c = case_log_contribution(&Subject::new(vec![0.0], 0.5, false, 1.0), &theta, &spec)
            .unwrap();
        let expected = (logistic(0.95) * (1.0 - logistic(-4.145))).ln();
        assert_eq!(c.case_id, CaseId::I);
        assert!((c.log_value - expected).abs() < 1e-14);
    }

    #[test]
    fn single_case_three_subject_weighted() {
        let spec = ModelSpec::new(["x"]).full();
        let theta = Theta::from_parts(&spec, vec![0.0, 0.0], [0.0, 0.0, -800.0, 0.0], vec![], None)
            .unwrap();
        let data = vec![Subject::new(vec![0.0], 0.5, true, 2.0)];
        let ll = log_pseudo_likelihood(&data, &theta, &spec).unwrap();
        assert!((ll - 2.0 * 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn empty_data_is_an_error() {
        let spec = ModelSpec::new(["x"]);
        let theta = Theta::initial(&spec);
        assert!(matches!(
            log_pseudo_likelihood(&[], &theta, &spec),
            Err(RecencyError::EmptyData)
        ));
    }

    #[test]
    fn matches_brute_force_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for extended in [false, true] {
            let spec = ModelSpec::new(["a", "b"]).full().with_extended(extended);
            let data = random_data(&mut rng, 10, 2);
            let psi = extended.then_some([0.3, -0.2]);
            let theta = Theta::from_parts(
                &spec,
                vec![0.4, -0.7, 0.2],
                [3.0, -0.5, -2.0, -3.0],
                vec![],
                psi,
            )
            .unwrap();
            let expected: f64 = data
                .iter()
                .map(|s| s.w * brute_force_log_term(s, &theta, &spec))
                .sum();
            let got = log_pseudo_likelihood(&data, &theta, &spec).unwrap();
            assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        }
    }

    #[test]
    fn fully_labeled_splits_into_two_bernoulli_likelihoods() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<Subject> = (0..40)
            .map(|i| {
                let recent = i % 3 != 0;
                let s = if recent {
                    rng.random_range(0.05..1.0)
                } else {
                    rng.random_range(1.01..5.0)
                };
                Subject::new(vec![rng.random_range(-2.0..2.0)], s, !recent, rng.random_range(0.5..1.5))
            })
            .collect();
        let spec = ModelSpec::new(["x"]).full();
        let theta = Theta::from_parts(&spec, vec![0.3, -0.8], [4.0, -0.4, -3.0, -2.0], vec![], None)
            .unwrap();
        let ll = log_pseudo_likelihood(&data, &theta, &spec).unwrap();
        let mut logistic_part = 0.0;
        let mut z_part = 0.0;
        for s in &data {
            let pi = pi_recent(&s.covariates, &theta.beta).unwrap();
            let (p0, p1) = p0_p1(s.s, &theta.eta, false);
            if s.s <= 1.0 {
                logistic_part += s.w * pi.ln();
                z_part += s.w * (1.0 - p1).ln();
            } else {
                logistic_part += s.w * (1.0 - pi).ln();
                z_part += s.w * p0.ln();
            }
        }
        assert!((ll - (logistic_part + z_part)).abs() < 1e-10);
    }

    fn central_difference(data: &[Subject], theta: &Theta, spec: &ModelSpec) -> Vec<f64> {
        let free = theta.free_values();
        (0..free.len())
            .map(|j| {
                let h = 1e-6 * (1.0 + free[j].abs());
                let mut up = free.clone();
                let mut dn = free.clone();
                up[j] += h;
                dn[j] -= h;
                let fu = log_pseudo_likelihood(data, &theta.with_free(&up), spec).unwrap();
                let fd = log_pseudo_likelihood(data, &theta.with_free(&dn), spec).unwrap();
                (fu - fd) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let specs = [
            ModelSpec::new(["a", "b"]),
            ModelSpec::new(["a", "b"]).full(),
            ModelSpec::new(["a", "b"]).with_p0_one(None),
            ModelSpec::new(["a", "b"]).full().with_extended(true),
            ModelSpec::new(["a", "b"]).with_eta_covariates(vec![1]),
        ];
        for spec in &specs {
            let data = random_data(&mut rng, 50, 2);
            let mut theta = Theta::initial(spec);
            let free: Vec<f64> = (0..spec.n_free()).map(|_| rng.random_range(-1.0..1.0)).collect();
            theta = theta.with_free(&free);
            let analytic = score(&data, &theta, spec).unwrap();
            let fd = central_difference(&data, &theta, spec);
            let scale = analytic.sup_norm().max(1.0);
            for (a, f) in analytic.total.iter().zip(&fd) {
                assert!((a - f).abs() / scale < 1e-6, "{a} vs {f} ({spec:?})");
            }
            // sum of m_i equals the full gradient
            for j in 0..analytic.total.len() {
                let s: f64 = analytic.per_subject.iter().map(|m| m[j]).sum();
                assert!((s - analytic.total[j]).abs() <= 1e-12 * (1.0 + s.abs()));
            }
        }
    }

    #[test]
    fn mixture_cells_dominate_worse_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ModelSpec::new(["x"]).full();
        for _ in 0..200 {
            let theta = Theta::initial(&spec)
                .with_free(&(0..6).map(|_| rng.random_range(-4.0..4.0)).collect::<Vec<_>>());
            let x = rng.random_range(-2.0..2.0);
            let pi = pi_recent(&[x], &theta.beta).unwrap();
            let iii = Subject::new(vec![x], rng.random_range(0.01..1.0), true, 1.0);
            let iv = Subject::new(vec![x], rng.random_range(1.01..6.0), false, 1.0);
            let c3 = case_log_contribution(&iii, &theta, &spec).unwrap().log_value;
            let c4 = case_log_contribution(&iv, &theta, &spec).unwrap().log_value;
            assert!(c3 >= (1.0 - pi).ln() - 1e-12);
            assert!(c4 >= pi.ln() - 1e-12);
        }
    }

    #[test]
    fn parallel_path_matches_serial_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = ModelSpec::new(["a"]);
        let data = random_data(&mut rng, PARALLEL_MIN_SUBJECTS + 17, 1);
        let theta = Theta::initial(&spec).with_free(&[0.2, -0.4, -0.5, -4.0]);
        let par = evaluate(&data, &theta, &spec, None, false, true).unwrap();
        let serial = evaluate(&data, &theta, &spec, None, false, false).unwrap();
        assert_eq!(par.value.to_bits(), serial.value.to_bits());
    }

    proptest! {
        #[test]
        fn weight_scaling_scales_value_and_score(c in 0.1f64..10.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = ModelSpec::new(["a"]);
            let data = random_data(&mut rng, 20, 1);
            let scaled: Vec<Subject> = data.iter().map(|s| Subject { w: s.w * c, ..s.clone() }).collect();
            let theta = Theta::initial(&spec).with_free(&[0.5, -0.3, -0.6, -4.0]);
            let a = log_pseudo_likelihood(&data, &theta, &spec).unwrap();
            let b = log_pseudo_likelihood(&scaled, &theta, &spec).unwrap();
            prop_assert!((b - c * a).abs() <= 1e-10 * (1.0 + b.abs()));
            let ga = score(&data, &theta, &spec).unwrap().total;
            let gb = score(&scaled, &theta, &spec).unwrap().total;
            for (x, y) in ga.iter().zip(&gb) {
                prop_assert!((y - c * x).abs() <= 1e-10 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn permutation_invariance(seed in 0u64..1000, rot in 1usize..19) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = ModelSpec::new(["a"]);
            let data = random_data(&mut rng, 20, 1);
            let mut permuted = data.clone();
            permuted.rotate_left(rot);
            let theta = Theta::initial(&spec).with_free(&[0.5, -0.3, -0.6, -4.0]);
            let a = log_pseudo_likelihood(&data, &theta, &spec).unwrap();
            let b = log_pseudo_likelihood(&permuted, &theta, &spec).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
