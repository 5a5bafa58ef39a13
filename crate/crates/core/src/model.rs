//! Domain types and the elementary probability functions of the recency model.
//!
//! A subject's recency status `Y` follows a logistic model in the covariates
//! (`pi_recent`). Given `Y` and the time `s` since the last HIV test, the
//! result `z` of that test follows one of two logistic curves in `s - 1`:
//! `p0` for long-term infections tested more than a year ago and `p1` for
//! recent infections tested within the year. Two of the four `(s, z)` cells
//! determine `Y` exactly.

use serde::{Deserialize, Serialize};

use crate::error::{RecencyError, Result};

/// Default value `eta00` is pinned to; `logistic(7) > 0.999`.
pub const DEFAULT_FIX_ETA00: f64 = 7.0;
/// Default value `eta10` is pinned to; `logistic(-7) < 0.001`.
pub const DEFAULT_FIX_ETA10: f64 = -7.0;

/// Numerically stable `1 / (1 + exp(-x))`.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One survey participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    /// Standardized covariates, without the intercept.
    pub covariates: Vec<f64>,
    /// Years between the last HIV test and the interview.
    pub s: f64,
    /// Result of the last test (`true` = positive).
    pub z: bool,
    /// Sampling weight.
    pub w: f64,
}

impl Subject {
    pub fn new(covariates: Vec<f64>, s: f64, z: bool, w: f64) -> Self {
        Self {
            covariates,
            s,
            z,
            w,
        }
    }

    pub fn label(&self) -> RecencyLabel {
        derive_label(self.s, self.z)
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        let bad = |reason: &str| {
            Err(RecencyError::InvalidSubject {
                index,
                reason: reason.to_string(),
            })
        };
        if !(self.s.is_finite() && self.s > 0.0) {
            return bad("s must be finite and positive");
        }
        if !(self.w.is_finite() && self.w > 0.0) {
            return bad("weight must be finite and positive");
        }
        if self.covariates.iter().any(|x| !x.is_finite()) {
            return bad("covariates must be finite");
        }
        Ok(())
    }
}

/// Check every subject and that covariate lengths agree.
pub fn validate_subjects(data: &[Subject]) -> Result<()> {
    let Some(first) = data.first() else {
        return Err(RecencyError::EmptyData);
    };
    let dim = first.covariates.len();
    for (i, subject) in data.iter().enumerate() {
        subject.validate(i)?;
        if subject.covariates.len() != dim {
            return Err(RecencyError::DimensionMismatch {
                what: "subject covariate length",
                expected: dim,
                got: subject.covariates.len(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecencyLabel {
    Recent,
    LongTerm,
    Unknown,
}

impl RecencyLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            RecencyLabel::Recent => "recent",
            RecencyLabel::LongTerm => "longterm",
            RecencyLabel::Unknown => "unknown",
        }
    }

    pub fn is_known(self) -> bool {
        self != RecencyLabel::Unknown
    }
}

/// Label implied by the testing history. `s == 1` counts as within one year.
pub fn derive_label(s: f64, z: bool) -> RecencyLabel {
    match (s <= 1.0, z) {
        (true, false) => RecencyLabel::Recent,
        (false, true) => RecencyLabel::LongTerm,
        _ => RecencyLabel::Unknown,
    }
}

/// `pi = P(Y = 1 | x) = logistic(beta[0] + x . beta[1..])`.
pub fn pi_recent(covariates: &[f64], beta: &[f64]) -> Result<f64> {
    Ok(logistic(linear_predictor(covariates, beta)?))
}

pub(crate) fn linear_predictor(covariates: &[f64], beta: &[f64]) -> Result<f64> {
    if beta.len() != covariates.len() + 1 {
        return Err(RecencyError::DimensionMismatch {
            what: "beta length (covariates + intercept)",
            expected: covariates.len() + 1,
            got: beta.len(),
        });
    }
    Ok(beta[0]
        + covariates
            .iter()
            .zip(&beta[1..])
            .map(|(x, b)| x * b)
            .sum::<f64>())
}

/// `(p0, p1)` at time `s`. `p0` is only meaningful for `s > 1` and `p1` for
/// `s <= 1`; both are returned and the caller picks.
pub fn p0_p1(s: f64, eta: &[f64; 4], p0_one: bool) -> (f64, f64) {
    let p0 = if p0_one {
        1.0
    } else {
        logistic(eta[0] + eta[1] * (s - 1.0))
    };
    let p1 = logistic(eta[2] + eta[3] * (s - 1.0));
    (p0, p1)
}

/// Which parameters are estimated and which pieces of the model are active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Covariates entering `pi`, in the order of `Subject::covariates`.
    pub covariate_names: Vec<String>,
    /// Pin `eta00` to this value; `None` estimates it.
    pub fix_eta00: Option<f64>,
    /// Pin `eta10` to this value; `None` estimates it.
    pub fix_eta10: Option<f64>,
    /// Replace `p0` by the constant 1 (drops `eta00`, `eta01`).
    pub p0_identically_one: bool,
    /// Enable the exponential-tilt density-ratio extension (`psi0`, `psi1`).
    pub extended: bool,
    /// Indices into the covariate vector that also enter both `p0` and `p1`
    /// with a shared coefficient. Empty in the standard model.
    #[serde(default)]
    pub eta_covariates: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            covariate_names: Vec::new(),
            fix_eta00: Some(DEFAULT_FIX_ETA00),
            fix_eta10: Some(DEFAULT_FIX_ETA10),
            p0_identically_one: false,
            extended: false,
            eta_covariates: Vec::new(),
        }
    }
}

impl ModelSpec {
    pub fn new<S: Into<String>>(covariates: impl IntoIterator<Item = S>) -> Self {
        Self {
            covariate_names: covariates.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }

    /// All four `eta` components free.
    pub fn full(mut self) -> Self {
        self.fix_eta00 = None;
        self.fix_eta10 = None;
        self.p0_identically_one = false;
        self
    }

    pub fn with_fixed_eta(mut self, eta00: Option<f64>, eta10: Option<f64>) -> Self {
        self.fix_eta00 = eta00;
        self.fix_eta10 = eta10;
        self
    }

    pub fn with_p0_one(mut self, eta10: Option<f64>) -> Self {
        self.p0_identically_one = true;
        self.fix_eta00 = None;
        self.fix_eta10 = eta10;
        self
    }

    pub fn with_extended(mut self, extended: bool) -> Self {
        self.extended = extended;
        self
    }

    pub fn with_eta_covariates(mut self, indices: Vec<usize>) -> Self {
        self.eta_covariates = indices;
        self
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub(crate) fn layout(&self) -> ParamLayout {
        ParamLayout {
            n_beta: self.covariate_names.len() + 1,
            n_gamma: self.eta_covariates.len(),
            extended: self.extended,
        }
    }

    pub fn n_params(&self) -> usize {
        self.layout().total()
    }

    /// `true` marks a parameter held constant during estimation.
    pub fn fixed_mask(&self) -> Vec<bool> {
        let layout = self.layout();
        let mut mask = vec![false; layout.total()];
        let e = layout.eta_offset();
        mask[e] = self.p0_identically_one || self.fix_eta00.is_some();
        mask[e + 1] = self.p0_identically_one;
        mask[e + 2] = self.fix_eta10.is_some();
        mask
    }

    pub fn n_free(&self) -> usize {
        self.fixed_mask().iter().filter(|f| !**f).count()
    }

    /// Names of every parameter in storage order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["beta0".to_string()];
        names.extend(self.covariate_names.iter().map(|c| format!("beta_{c}")));
        names.extend(["eta00", "eta01", "eta10", "eta11"].map(String::from));
        for &j in &self.eta_covariates {
            let name = self
                .covariate_names
                .get(j)
                .cloned()
                .unwrap_or_else(|| j.to_string());
            names.push(format!("gamma_{name}"));
        }
        if self.extended {
            names.push("psi0".into());
            names.push("psi1".into());
        }
        names
    }

    pub fn free_param_names(&self) -> Vec<String> {
        self.param_names()
            .into_iter()
            .zip(self.fixed_mask())
            .filter(|(_, fixed)| !fixed)
            .map(|(n, _)| n)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p0_identically_one && self.fix_eta00.is_some() {
            return Err(RecencyError::InvalidSpec(
                "p0 identically one excludes fixing eta00".into(),
            ));
        }
        for v in [self.fix_eta00, self.fix_eta10].into_iter().flatten() {
            if !v.is_finite() {
                return Err(RecencyError::InvalidSpec(format!(
                    "fixed eta value {v} is not finite"
                )));
            }
        }
        let n = self.covariate_names.len();
        if let Some(&bad) = self.eta_covariates.iter().find(|&&j| j >= n) {
            return Err(RecencyError::InvalidSpec(format!(
                "eta covariate index {bad} out of range for {n} covariates"
            )));
        }
        Ok(())
    }
}

/// Flat storage order: `beta | eta(4) | gamma | psi(2)?`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ParamLayout {
    pub n_beta: usize,
    pub n_gamma: usize,
    pub extended: bool,
}

impl ParamLayout {
    pub fn eta_offset(&self) -> usize {
        self.n_beta
    }
    pub fn gamma_offset(&self) -> usize {
        self.n_beta + 4
    }
    pub fn psi_offset(&self) -> usize {
        self.n_beta + 4 + self.n_gamma
    }
    pub fn total(&self) -> usize {
        self.psi_offset() + if self.extended { 2 } else { 0 }
    }
}

/// Parameter bundle with a mask of the components held fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    /// Slot 0 is the intercept.
    pub beta: Vec<f64>,
    /// `(eta00, eta01, eta10, eta11)`.
    pub eta: [f64; 4],
    /// Coefficients of covariates entering `p0`/`p1` (usually empty).
    #[serde(default)]
    pub gamma: Vec<f64>,
    /// `(psi0, psi1)` of the exponential tilt.
    pub psi: Option<[f64; 2]>,
    pub fixed_mask: Vec<bool>,
}

impl Theta {
    /// Starting point: everything zero except `eta11 = -5`, with fixed
    /// components set to their pinned values.
    pub fn initial(spec: &ModelSpec) -> Self {
        let layout = spec.layout();
        let eta = [
            spec.fix_eta00.unwrap_or(0.0),
            0.0,
            spec.fix_eta10.unwrap_or(0.0),
            -5.0,
        ];
        Self {
            beta: vec![0.0; layout.n_beta],
            eta,
            gamma: vec![0.0; layout.n_gamma],
            psi: spec.extended.then_some([0.0, 0.0]),
            fixed_mask: spec.fixed_mask(),
        }
    }

    /// Build from explicit values, taking the mask from `spec`. Pinned `eta`
    /// components are overwritten with the values pinned in `spec`.
    pub fn from_parts(
        spec: &ModelSpec,
        beta: Vec<f64>,
        eta: [f64; 4],
        gamma: Vec<f64>,
        psi: Option<[f64; 2]>,
    ) -> Result<Self> {
        let mut eta = eta;
        if let Some(v) = spec.fix_eta00 {
            eta[0] = v;
        }
        if let Some(v) = spec.fix_eta10 {
            eta[2] = v;
        }
        let psi = if spec.extended {
            Some(psi.unwrap_or([0.0, 0.0]))
        } else {
            None
        };
        let theta = Self {
            beta,
            eta,
            gamma,
            psi,
            fixed_mask: spec.fixed_mask(),
        };
        theta.check(spec)?;
        Ok(theta)
    }

    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let layout = spec.layout();
        if self.beta.len() != layout.n_beta {
            return Err(RecencyError::DimensionMismatch {
                what: "beta length",
                expected: layout.n_beta,
                got: self.beta.len(),
            });
        }
        if self.gamma.len() != layout.n_gamma {
            return Err(RecencyError::DimensionMismatch {
                what: "gamma length",
                expected: layout.n_gamma,
                got: self.gamma.len(),
            });
        }
        if self.psi.is_some() != spec.extended {
            return Err(RecencyError::InvalidTheta(
                "psi must be present exactly when the extension is enabled".into(),
            ));
        }
        if self.fixed_mask.len() != layout.total() {
            return Err(RecencyError::DimensionMismatch {
                what: "fixed mask length",
                expected: layout.total(),
                got: self.fixed_mask.len(),
            });
        }
        if self.fixed_mask.iter().all(|f| *f) {
            return Err(RecencyError::InvalidTheta("no free parameters".into()));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.fixed_mask.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.beta.clone();
        v.extend_from_slice(&self.eta);
        v.extend_from_slice(&self.gamma);
        if let Some(psi) = self.psi {
            v.extend_from_slice(&psi);
        }
        v
    }

    fn assign(&mut self, values: &[f64]) {
        let nb = self.beta.len();
        let ng = self.gamma.len();
        self.beta.copy_from_slice(&values[..nb]);
        self.eta.copy_from_slice(&values[nb..nb + 4]);
        self.gamma.copy_from_slice(&values[nb + 4..nb + 4 + ng]);
        if let Some(psi) = self.psi.as_mut() {
            psi.copy_from_slice(&values[nb + 4 + ng..nb + 6 + ng]);
        }
    }

    pub fn free_indices(&self) -> Vec<usize> {
        self.fixed_mask
            .iter()
            .enumerate()
            .filter(|(_, f)| !**f)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn free_values(&self) -> Vec<f64> {
        let all = self.to_vec();
        self.free_indices().into_iter().map(|i| all[i]).collect()
    }

    /// Copy with the free components replaced by `free` (in mask order).
    pub fn with_free(&self, free: &[f64]) -> Theta {
        let mut all = self.to_vec();
        for (slot, value) in self.free_indices().into_iter().zip(free) {
            all[slot] = *value;
        }
        let mut out = self.clone();
        out.assign(&all);
        out
    }

    pub fn psi_or_zero(&self) -> [f64; 2] {
        self.psi.unwrap_or([0.0, 0.0])
    }
}
