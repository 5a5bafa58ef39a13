//! Maximum pseudo-likelihood estimation, sandwich covariance and model
//! selection (eta-structure variants and backward stepwise deletion).

use log::{debug, warn};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::density_ratio;
use crate::error::{RecencyError, Result};
use crate::likelihood::evaluate;
use crate::model::{validate_subjects, ModelSpec, Subject, Theta, DEFAULT_FIX_ETA00, DEFAULT_FIX_ETA10};
use crate::optim::{fd_jacobian, maximize, Maximum, MaximizeOptions};
use crate::prediction;

/// Relative finite-difference step for the information matrix.
const INFORMATION_STEP: f64 = 1e-5;
/// Score sup-norm above which the sandwich is computed with a warning.
const STATIONARITY_WARN: f64 = 1e-4;
const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub maximize: MaximizeOptions,
    /// Extra attempts from perturbed starting points when the first fails.
    pub restarts: usize,
    /// Refuse data whose weights do not sum to the subject count.
    pub require_rescaled_weights: bool,
    pub compute_covariance: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            maximize: MaximizeOptions::default(),
            restarts: 3,
            require_rescaled_weights: true,
            compute_covariance: true,
        }
    }
}

/// Density-ratio diagnostics carried by extended fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedDiagnostics {
    pub mu: f64,
    /// Largest `|sum p_i - 1|` over accepted evaluations.
    pub max_sum_residual: f64,
    /// Largest `|sum p_i (e_i - 1)|` over accepted evaluations.
    pub max_moment_residual: f64,
    pub accepted_evaluations: usize,
    pub infeasible_rejections: usize,
    /// `psi0 * psi1 < 0` at the estimate; reported, not enforced.
    pub psi_sign_ok: bool,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub theta_hat: Theta,
    /// Sandwich covariance over the free parameters.
    pub covariance: Option<DMatrix<f64>>,
    /// Why the covariance is missing, when it is.
    pub covariance_error: Option<String>,
    pub log_pl: f64,
    pub bic: f64,
    pub n_subjects: usize,
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: f64,
    pub recency_rate: Option<f64>,
    pub extended: Option<ExtendedDiagnostics>,
}

impl FitResult {
    pub fn n_free(&self) -> usize {
        self.theta_hat.free_indices().len()
    }

    pub fn free_param_names(&self) -> Vec<String> {
        self.spec.free_param_names()
    }

    pub fn estimates(&self) -> Vec<f64> {
        self.theta_hat.free_values()
    }

    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        self.covariance
            .as_ref()
            .map(|c| (0..c.nrows()).map(|i| c[(i, i)].max(0.0).sqrt()).collect())
    }

    /// Estimate and standard error of a named free parameter.
    pub fn param(&self, name: &str) -> Option<(f64, Option<f64>)> {
        let idx = self.free_param_names().iter().position(|n| n == name)?;
        let se = self.standard_errors().map(|s| s[idx]);
        Some((self.estimates()[idx], se))
    }

    /// Usable for inference: converged with a covariance.
    pub fn is_usable(&self) -> bool {
        self.converged && self.covariance.is_some()
    }

    pub fn with_recency_rate(mut self, data: &[Subject]) -> Result<Self> {
        self.recency_rate = Some(prediction::recency_rate(data, &self.theta_hat, &self.spec)?);
        Ok(self)
    }
}

pub fn bic(log_pl: f64, n_free: usize, n_subjects: usize) -> f64 {
    -2.0 * log_pl + n_free as f64 * (n_subjects as f64).ln()
}

pub(crate) fn check_weights(data: &[Subject]) -> Result<()> {
    let sum: f64 = data.iter().map(|s| s.w).sum();
    if (sum - data.len() as f64).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(RecencyError::WeightsNotRescaled {
            sum,
            n: data.len(),
        });
    }
    Ok(())
}

pub(crate) fn check_data_for_spec(data: &[Subject], spec: &ModelSpec) -> Result<()> {
    validate_subjects(data)?;
    spec.validate()?;
    let dim = data[0].covariates.len();
    if dim != spec.n_covariates() {
        return Err(RecencyError::DimensionMismatch {
            what: "covariates per subject vs model covariates",
            expected: spec.n_covariates(),
            got: dim,
        });
    }
    Ok(())
}

/// Maximize the pseudo-likelihood. Extended specs are routed to
/// [`density_ratio::fit_extended`].
pub fn fit(
    data: &[Subject],
    spec: &ModelSpec,
    init: Option<&Theta>,
    options: &FitOptions,
) -> Result<FitResult> {
    if spec.extended {
        return density_ratio::fit_extended(data, spec, init, options);
    }
    check_data_for_spec(data, spec)?;
    if options.require_rescaled_weights {
        check_weights(data)?;
    }
    let start = match init {
        Some(t) => t.clone(),
        None => Theta::initial(spec),
    };
    start.check(spec)?;

    let objective = |free: &[f64]| -> Option<(f64, Vec<f64>)> {
        let theta = start.with_free(free);
        let eval = evaluate(data, &theta, spec, None, false, true).ok()?;
        eval.value.is_finite().then_some((eval.value, eval.gradient))
    };
    let best = maximize_with_restarts(objective, &start.free_values(), options);
    let theta_hat = start.with_free(&best.x);
    if !best.converged {
        debug!(
            "fit did not converge after {} iterations (score sup-norm {:.3e})",
            best.iterations,
            best.gradient_norm()
        );
    }

    let (covariance, covariance_error) = if options.compute_covariance && best.value.is_finite() {
        match sandwich_covariance(data, &theta_hat, spec) {
            Ok(c) => (Some(c), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (None, None)
    };
    let n_free = theta_hat.free_indices().len();
    Ok(FitResult {
        spec: spec.clone(),
        theta_hat,
        covariance,
        covariance_error,
        log_pl: best.value,
        bic: bic(best.value, n_free, data.len()),
        n_subjects: data.len(),
        converged: best.converged,
        iterations: best.iterations,
        score_norm: best.gradient_norm(),
        recency_rate: None,
        extended: None,
    })
}

/// Run the maximizer, retrying from deterministic perturbations of `x0`
/// until one attempt converges.
pub(crate) fn maximize_with_restarts<F>(mut objective: F, x0: &[f64], options: &FitOptions) -> Maximum
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let mut best = maximize(&mut objective, x0, &options.maximize);
    let mut rng = ChaCha8Rng::seed_from_u64(0x005e_ed0f_7e57);
    let mut iterations = best.iterations;
    let mut rejections = best.rejections;
    for attempt in 0..options.restarts {
        if best.converged {
            break;
        }
        let start: Vec<f64> = x0
            .iter()
            .map(|v| v + rng.random_range(-0.5..0.5) * (1.0 + 0.1 * v.abs()))
            .collect();
        let trial = maximize(&mut objective, &start, &options.maximize);
        debug!(
            "restart {} -> converged={} value={}",
            attempt + 1,
            trial.converged,
            trial.value
        );
        iterations += trial.iterations;
        rejections += trial.rejections;
        let better = (trial.converged && !best.converged)
            || (trial.converged == best.converged && trial.value > best.value);
        if better {
            best = trial;
        }
    }
    best.iterations = iterations;
    best.rejections = rejections;
    best
}

/// Sandwich covariance `(1/n) I^-1 C I^-T` over the free parameters.
pub fn sandwich_covariance(data: &[Subject], theta_hat: &Theta, spec: &ModelSpec) -> Result<DMatrix<f64>> {
    check_data_for_spec(data, spec)?;
    theta_hat.check(spec)?;
    if spec.extended {
        return density_ratio::profile_sandwich(data, theta_hat, spec);
    }
    let names = spec.free_param_names();
    let scores = |free: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
        let eval = evaluate(data, &theta_hat.with_free(free), spec, None, false, true)?;
        Ok((eval.gradient, eval.per_subject))
    };
    sandwich_from_scores(data.len(), &theta_hat.free_values(), &names, scores)
}

/// Generic sandwich from a map `point -> (total score, row-major per-subject
/// scores)`.
pub(crate) fn sandwich_from_scores<F>(
    n: usize,
    point: &[f64],
    names: &[String],
    mut scores: F,
) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<(Vec<f64>, Vec<f64>)>,
{
    let k = point.len();
    let (total, per) = scores(point)?;
    let sup = total.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    if sup > STATIONARITY_WARN {
        warn!("sandwich evaluated away from a stationary point (score sup-norm {sup:.3e})");
    }
    let nf = n as f64;

    let mut failure = None;
    let mut grad_map = |x: &[f64]| match scores(x) {
        Ok((g, _)) => Some((0.0, g)),
        Err(e) => {
            failure = Some(e);
            None
        }
    };
    let jac = fd_jacobian(&mut grad_map, point, INFORMATION_STEP);
    if let Some(e) = failure {
        return Err(e);
    }
    let jac = jac.ok_or(RecencyError::NonFiniteScore { index: 0 })?;
    let info = (&jac + jac.transpose()) * (0.5 / nf);

    let mut meat = DMatrix::<f64>::zeros(k, k);
    for row in per.chunks(k) {
        for a in 0..k {
            for b in 0..=a {
                meat[(a, b)] += row[a] * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            meat[(b, a)] = meat[(a, b)];
        }
    }
    meat /= nf;

    let svd = info.clone().svd(false, true);
    let (imin, smin) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let smax = svd.singular_values.max();
    if !(smin > 1e-10 * smax) || !smin.is_finite() {
        let v_t = svd.v_t.as_ref().expect("requested V^T");
        let row = v_t.row(imin);
        let worst = (0..k)
            .max_by(|&a, &b| row[a].abs().total_cmp(&row[b].abs()))
            .unwrap_or(0);
        return Err(RecencyError::SingularInformation {
            parameter: names.get(worst).cloned().unwrap_or_else(|| worst.to_string()),
            singular_value: smin,
        });
    }
    let inv = info
        .clone()
        .try_inverse()
        .ok_or_else(|| RecencyError::SingularInformation {
            parameter: names.first().cloned().unwrap_or_default(),
            singular_value: smin,
        })?;
    let cov = &inv * meat * inv.transpose() / nf;
    Ok((&cov + cov.transpose()) * 0.5)
}

/// The four eta structures compared during model selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaVariant {
    Full,
    FixEta00,
    FixEta00Eta10,
    P0OneFixEta10,
}

impl EtaVariant {
    pub const ALL: [EtaVariant; 4] = [
        EtaVariant::Full,
        EtaVariant::FixEta00,
        EtaVariant::FixEta00Eta10,
        EtaVariant::P0OneFixEta10,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EtaVariant::Full => "full model",
            EtaVariant::FixEta00 => "fix eta00=7",
            EtaVariant::FixEta00Eta10 => "fix eta00=-eta10=7",
            EtaVariant::P0OneFixEta10 => "fix p0=1, eta10=-7",
        }
    }

    /// Apply this variant's eta structure to `base` (other fields kept).
    pub fn apply(self, base: &ModelSpec) -> ModelSpec {
        let base = base.clone();
        match self {
            EtaVariant::Full => base.full(),
            EtaVariant::FixEta00 => ModelSpec {
                p0_identically_one: false,
                ..base.with_fixed_eta(Some(DEFAULT_FIX_ETA00), None)
            },
            EtaVariant::FixEta00Eta10 => ModelSpec {
                p0_identically_one: false,
                ..base.with_fixed_eta(Some(DEFAULT_FIX_ETA00), Some(DEFAULT_FIX_ETA10))
            },
            EtaVariant::P0OneFixEta10 => base.with_p0_one(Some(DEFAULT_FIX_ETA10)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariantRow {
    pub variant: EtaVariant,
    pub spec: ModelSpec,
    pub n_free: usize,
    pub log_pl: f64,
    pub bic: f64,
    pub converged: bool,
    pub error: Option<String>,
    pub fit: Option<FitResult>,
}

/// Fit the four eta variants. Nested variants are fitted first and used as
/// additional starting points for the larger ones.
pub fn compare_eta_variants(
    data: &[Subject],
    covariates: &[String],
    options: &FitOptions,
) -> Vec<VariantRow> {
    let base = ModelSpec::new(covariates.iter().cloned());
    compare_eta_variants_with(data, &base, options)
}

pub fn compare_eta_variants_with(data: &[Subject], base: &ModelSpec, options: &FitOptions) -> Vec<VariantRow> {
    let fit_order = [
        EtaVariant::P0OneFixEta10,
        EtaVariant::FixEta00Eta10,
        EtaVariant::FixEta00,
        EtaVariant::Full,
    ];
    let mut fitted: Vec<(EtaVariant, Result<FitResult>)> = Vec::new();
    for variant in fit_order {
        let spec = variant.apply(base);
        let mut result = fit(data, &spec, None, options);
        // warm start from the previous nested eta structure
        let warm = fitted
            .iter()
            .rev()
            .find(|(v, r)| *v != EtaVariant::P0OneFixEta10 && r.is_ok())
            .and_then(|(_, r)| r.as_ref().ok());
        if let Some(prev) = warm {
            let t = &prev.theta_hat;
            if let Ok(start) = Theta::from_parts(&spec, t.beta.clone(), t.eta, t.gamma.clone(), t.psi) {
                let alt = fit(data, &spec, Some(&start), options);
                result = match (result, alt) {
                    (Ok(a), Ok(b)) => Ok(if (b.converged, b.log_pl) > (a.converged, a.log_pl) { b } else { a }),
                    (Err(_), Ok(b)) => Ok(b),
                    (a, _) => a,
                };
            }
        }
        fitted.push((variant, result));
    }
    EtaVariant::ALL
        .iter()
        .map(|&variant| {
            let spec = variant.apply(base);
            let (_, result) = fitted
                .iter()
                .find(|(v, _)| *v == variant)
                .expect("every variant fitted");
            match result {
                Ok(f) => VariantRow {
                    variant,
                    n_free: f.n_free(),
                    log_pl: f.log_pl,
                    bic: f.bic,
                    converged: f.converged,
                    error: None,
                    fit: Some(f.clone()),
                    spec,
                },
                Err(e) => VariantRow {
                    variant,
                    n_free: spec.n_free(),
                    log_pl: f64::NEG_INFINITY,
                    bic: f64::INFINITY,
                    converged: false,
                    error: Some(e.to_string()),
                    fit: None,
                    spec,
                },
            }
        })
        .collect()
}

/// Lowest BIC; ties go to the variant with fewer free parameters.
pub fn best_variant(rows: &[VariantRow]) -> Option<&VariantRow> {
    rows.iter()
        .filter(|r| r.bic.is_finite())
        .min_by(|a, b| a.bic.total_cmp(&b.bic).then(a.n_free.cmp(&b.n_free)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub covariates: Vec<String>,
    pub bic: f64,
    /// BIC after deleting each remaining covariate (`inf` when that fit failed).
    pub deletions: Vec<(String, f64)>,
    pub deleted: Option<String>,
}

#[derive(Debug, Clone)]
pub struct StepwiseResult {
    pub selected: Vec<String>,
    pub fit: FitResult,
    pub trace: Vec<StepRecord>,
}

/// Backward deletion: repeatedly drop the covariate whose removal lowers BIC
/// the most, until no deletion lowers it. The intercept always stays.
pub fn backward_stepwise(
    dataset: &Dataset,
    candidates: &[String],
    template: &ModelSpec,
    options: &FitOptions,
) -> Result<StepwiseResult> {
    if candidates.is_empty() {
        return Err(RecencyError::InvalidArgument("no candidate covariates".into()));
    }
    if !template.eta_covariates.is_empty() {
        return Err(RecencyError::InvalidSpec(
            "stepwise selection does not support covariates in the eta model".into(),
        ));
    }
    let fit_subset = |names: &[String]| -> Result<FitResult> {
        let data = dataset.select(names)?;
        let spec = ModelSpec {
            covariate_names: names.to_vec(),
            ..template.clone()
        };
        fit(&data, &spec, None, options)
    };

    let mut current = candidates.to_vec();
    let mut current_fit = fit_subset(&current)?;
    let mut trace = Vec::new();
    loop {
        let mut deletions = Vec::new();
        let mut best: Option<(usize, FitResult)> = None;
        for i in 0..current.len() {
            let mut reduced = current.clone();
            let name = reduced.remove(i);
            let bic = match fit_subset(&reduced) {
                Ok(f) if f.converged => {
                    let bic = f.bic;
                    if best.as_ref().is_none_or(|(_, b)| bic < b.bic) {
                        best = Some((i, f));
                    }
                    bic
                }
                Ok(_) => {
                    warn!("deleting `{name}`: fit did not converge; deletion unavailable");
                    f64::INFINITY
                }
                Err(e) => {
                    warn!("deleting `{name}`: {e}; deletion unavailable");
                    f64::INFINITY
                }
            };
            deletions.push((name, bic));
        }
        let mut record = StepRecord {
            covariates: current.clone(),
            bic: current_fit.bic,
            deletions,
            deleted: None,
        };
        match best {
            Some((i, f)) if f.bic < current_fit.bic => {
                record.deleted = Some(current.remove(i));
                trace.push(record);
                current_fit = f;
            }
            _ => {
                trace.push(record);
                break;
            }
        }
    }
    Ok(StepwiseResult {
        selected: current,
        fit: current_fit,
        trace,
    })
}
