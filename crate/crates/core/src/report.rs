//! Serializable outputs: fit reports, prediction tables and run manifests.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::CovariateMoments;
use crate::error::{RecencyError, Result};
use crate::estimation::{FitResult, VariantRow};
use crate::model::{ModelSpec, Subject, Theta};
use crate::prediction::{type1_risk, type2_risk};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecReport {
    pub covariates: Vec<String>,
    pub fix_eta00: Option<f64>,
    pub fix_eta10: Option<f64>,
    pub p0_one: bool,
    pub extended: bool,
    #[serde(default)]
    pub eta_covariates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub free_params: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedReport {
    pub mu: f64,
    /// `[sum, moment]` residuals, largest over accepted evaluations.
    pub constraint_residuals: [f64; 2],
    pub infeasible_rejections: usize,
    pub psi_sign_ok: bool,
}

/// JSON fit document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub spec: SpecReport,
    /// Intercept first, then one slope per covariate.
    pub beta: Vec<f64>,
    /// Keys `eta00`..`eta11`; the `p0` pair is absent when `p0` is identically one.
    pub eta: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gamma: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psi: Option<[f64; 2]>,
    /// Standard error per free parameter.
    pub se: Option<BTreeMap<String, f64>>,
    pub cov: Option<CovarianceReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariance_error: Option<String>,
    pub log_pl: f64,
    pub bic: f64,
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: f64,
    pub n_subjects: usize,
    pub recency_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extended: Option<ExtendedReport>,
    /// Moments used to standardize the covariates, for scoring new data.
    #[serde(default)]
    pub standardization: Vec<CovariateMoments>,
}

impl FitReport {
    pub fn from_fit(fit: &FitResult, standardization: &[CovariateMoments]) -> Self {
        let spec = &fit.spec;
        let t = &fit.theta_hat;
        let names = ["eta00", "eta01", "eta10", "eta11"];
        let eta = names
            .iter()
            .zip(t.eta)
            .enumerate()
            .filter(|(i, _)| !(spec.p0_identically_one && *i < 2))
            .map(|(_, (n, v))| (n.to_string(), v))
            .collect();
        let free = fit.free_param_names();
        let se = fit
            .standard_errors()
            .map(|s| free.iter().cloned().zip(s).collect::<BTreeMap<_, _>>());
        let cov = fit.covariance.as_ref().map(|c| CovarianceReport {
            free_params: free.clone(),
            matrix: (0..c.nrows()).map(|i| c.row(i).iter().copied().collect()).collect(),
        });
        Self {
            spec: SpecReport {
                covariates: spec.covariate_names.clone(),
                fix_eta00: spec.fix_eta00,
                fix_eta10: spec.fix_eta10,
                p0_one: spec.p0_identically_one,
                extended: spec.extended,
                eta_covariates: spec
                    .eta_covariates
                    .iter()
                    .map(|&j| spec.covariate_names[j].clone())
                    .collect(),
            },
            beta: t.beta.clone(),
            eta,
            gamma: t.gamma.clone(),
            psi: t.psi,
            se,
            cov,
            covariance_error: fit.covariance_error.clone(),
            log_pl: fit.log_pl,
            bic: fit.bic,
            converged: fit.converged,
            iterations: fit.iterations,
            score_norm: fit.score_norm,
            n_subjects: fit.n_subjects,
            recency_rate: fit.recency_rate,
            extended: fit.extended.as_ref().map(|d| ExtendedReport {
                mu: d.mu,
                constraint_residuals: [d.max_sum_residual, d.max_moment_residual],
                infeasible_rejections: d.infeasible_rejections,
                psi_sign_ok: d.psi_sign_ok,
            }),
            standardization: standardization.to_vec(),
        }
    }

    /// Rebuild the model specification and estimate.
    pub fn model(&self) -> Result<(ModelSpec, Theta)> {
        let names = &self.spec.covariates;
        let eta_covariates = self
            .spec
            .eta_covariates
            .iter()
            .map(|n| {
                names
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| RecencyError::UnknownCovariate(n.clone()))
            })
            .collect::<Result<Vec<usize>>>()?;
        let spec = ModelSpec {
            covariate_names: names.clone(),
            fix_eta00: self.spec.fix_eta00,
            fix_eta10: self.spec.fix_eta10,
            p0_identically_one: self.spec.p0_one,
            extended: self.spec.extended,
            eta_covariates,
        };
        spec.validate()?;
        let get = |k: &str| self.eta.get(k).copied().unwrap_or(0.0);
        let eta = [get("eta00"), get("eta01"), get("eta10"), get("eta11")];
        let theta = Theta::from_parts(&spec, self.beta.clone(), eta, self.gamma.clone(), self.psi)?;
        Ok((spec, theta))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Write `id,s,z,label,type1,type2`.
pub fn write_predictions<W: Write>(
    writer: W,
    ids: &[String],
    subjects: &[Subject],
    theta: &Theta,
    spec: &ModelSpec,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["id", "s", "z", "label", "type1", "type2"])?;
    for (id, s) in ids.iter().zip(subjects) {
        out.write_record([
            id.clone(),
            s.s.to_string(),
            u8::from(s.z).to_string(),
            s.label().as_str().to_string(),
            type1_risk(s, theta)?.to_string(),
            type2_risk(s, theta, spec)?.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: String,
    pub n_free: usize,
    pub log_pl: f64,
    pub bic: f64,
    pub converged: bool,
    pub error: Option<String>,
    pub selected: bool,
}

pub fn variant_table(rows: &[VariantRow]) -> Vec<VariantReport> {
    let best = crate::estimation::best_variant(rows).map(|r| r.variant);
    rows.iter()
        .map(|r| VariantReport {
            variant: r.variant.label().to_string(),
            n_free: r.n_free,
            log_pl: r.log_pl,
            bic: r.bic,
            converged: r.converged,
            error: r.error.clone(),
            selected: Some(r.variant) == best,
        })
        .collect()
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// SHA-256 of each input file, keyed by path.
    pub input_hashes: BTreeMap<String, String>,
    pub version: String,
    pub started: String,
    pub finished: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
