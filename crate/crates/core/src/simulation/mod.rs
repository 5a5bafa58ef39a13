//! Synthetic data generators for the simulation scenarios and the replicate
//! harness that summarizes repeated fits.
//!
//! Every scenario draws covariates, the true recency status `Y`, the time since
//! the last test `S` and the reported result `Z`, then splits subjects into a
//! training half and a test half. The test half is further split by whether the
//! label is observed.

mod auc;
mod replicate;

pub use auc::auc;
pub use replicate::{replicate_seed, run_replicates, ParamSummary, ReplicateRecord, ReplicateRun, ReplicateSummary};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{RecencyError, Result};
use crate::model::{logistic, p0_p1, Subject};

/// Shape and rate of the Gamma law of `S` that reproduces a labeled fraction
/// of about 0.42 and a recency rate of about 0.71 under the reference truths.
pub const DEFAULT_S_SHAPE: f64 = 0.63;
pub const DEFAULT_S_RATE: f64 = 0.21;
/// Rate of `S` among long-term infections in the tilted scenario.
pub const DEFAULT_S_RATE_LONG: f64 = 0.105;
const PERTURB_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// Reference truths, one standard-normal covariate.
    S1,
    /// Two correlated covariates, recency rate near one half; data only.
    S2,
    /// S1 with jittered `S` and flipped `Z` in the training half.
    S5,
    /// `S` depends on `Y` through an exponential tilt.
    S6,
    /// The covariate also shifts the reporting probabilities.
    S7,
}

impl Scenario {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(Scenario::S1),
            2 => Ok(Scenario::S2),
            5 => Ok(Scenario::S5),
            6 => Ok(Scenario::S6),
            7 => Ok(Scenario::S7),
            other => Err(RecencyError::InvalidScenario(format!(
                "scenario {other} (expected 1, 2, 5, 6 or 7)"
            ))),
        }
    }

    pub fn number(self) -> u32 {
        match self {
            Scenario::S1 => 1,
            Scenario::S2 => 2,
            Scenario::S5 => 5,
            Scenario::S6 => 6,
            Scenario::S7 => 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateModel {
    StandardNormal { dim: usize },
    BivariateNormal { mean: [f64; 2], sd: [f64; 2], corr: f64 },
}

impl CovariateModel {
    fn dim(&self) -> usize {
        match self {
            CovariateModel::StandardNormal { dim } => *dim,
            CovariateModel::BivariateNormal { .. } => 2,
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            CovariateModel::StandardNormal { dim } => (0..*dim).map(|_| StandardNormal.sample(rng)).collect(),
            CovariateModel::BivariateNormal { mean, sd, corr } => {
                let a: f64 = StandardNormal.sample(rng);
                let b: f64 = StandardNormal.sample(rng);
                let second = corr * a + (1.0 - corr * corr).sqrt() * b;
                vec![mean[0] + sd[0] * a, mean[1] + sd[1] * second]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n_total: usize,
    pub covariate_names: Vec<String>,
    /// Intercept first. In S2 the intercept is re-solved per dataset.
    pub beta_true: Vec<f64>,
    pub eta_true: [f64; 4],
    pub covariates: CovariateModel,
    pub s_shape: f64,
    /// Rate of `S` (among recent infections when `s_rate_long` is set).
    pub s_rate: f64,
    /// Rate of `S` among long-term infections; S6 only.
    pub s_rate_long: Option<f64>,
    /// Half-width of the uniform jitter added to `S` in the training half.
    pub s_jitter: f64,
    /// Fraction of training subjects whose `Z` is flipped.
    pub z_flip_rate: f64,
    /// Coefficient of the first covariate inside both reporting logits.
    pub odn_in_z: f64,
    /// Target mean of `pi` when the intercept is solved (S2).
    pub target_recency: Option<f64>,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn preset(scenario: Scenario) -> Self {
        let s1 = ScenarioConfig {
            scenario,
            n_total: 2000,
            covariate_names: vec!["odn".into()],
            beta_true: vec![0.95, -0.53],
            eta_true: [7.0, -0.62, -7.0, -5.71],
            covariates: CovariateModel::StandardNormal { dim: 1 },
            s_shape: DEFAULT_S_SHAPE,
            s_rate: DEFAULT_S_RATE,
            s_rate_long: None,
            s_jitter: 0.0,
            z_flip_rate: 0.0,
            odn_in_z: 0.0,
            target_recency: None,
            seed: 20240101,
        };
        match scenario {
            Scenario::S1 => s1,
            Scenario::S2 => {
                let sd = [2.2, 1.6];
                ScenarioConfig {
                    n_total: 3000,
                    covariate_names: vec!["logvl".into(), "odn".into()],
                    beta_true: vec![0.0, -0.19 / sd[0], -0.49 / sd[1]],
                    covariates: CovariateModel::BivariateNormal {
                        mean: [9.5, 2.6],
                        sd,
                        corr: -0.3,
                    },
                    target_recency: Some(0.5),
                    ..s1
                }
            }
            Scenario::S5 => ScenarioConfig {
                s_jitter: 1.0 / 6.0,
                z_flip_rate: 0.02,
                ..s1
            },
            Scenario::S6 => ScenarioConfig {
                n_total: 4000,
                s_rate_long: Some(DEFAULT_S_RATE_LONG),
                ..s1
            },
            Scenario::S7 => ScenarioConfig { odn_in_z: 0.5, ..s1 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RecencyError::InvalidScenario(m));
        let parts = if self.scenario == Scenario::S2 { 3 } else { 2 };
        if self.n_total < 2 * parts || !self.n_total.is_multiple_of(parts) {
            return bad(format!("n_total {} must be a positive multiple of {parts}", self.n_total));
        }
        if !(self.s_shape > 0.0 && self.s_rate > 0.0) || self.s_rate_long.is_some_and(|r| !(r > 0.0)) {
            return bad("gamma parameters must be positive".into());
        }
        if !(0.0..1.0).contains(&self.z_flip_rate) {
            return bad(format!("flip rate {} outside [0, 1)", self.z_flip_rate));
        }
        if !(self.s_jitter >= 0.0) {
            return bad("jitter half-width must be nonnegative".into());
        }
        let dim = self.covariates.dim();
        if self.beta_true.len() != dim + 1 || self.covariate_names.len() != dim {
            return bad(format!("truth needs {} slopes and names", dim));
        }
        if self.target_recency.is_some_and(|t| !(t > 0.0 && t < 1.0)) {
            return bad("target recency must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// Tilt `(psi0, psi1)` linking the two Gamma laws of `S`, if any.
    pub fn true_psi(&self) -> Option<[f64; 2]> {
        self.s_rate_long
            .map(|r0| [self.s_shape * (self.s_rate / r0).ln(), r0 - self.s_rate])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub train: Vec<Subject>,
    pub y_train: Vec<bool>,
    pub test: Vec<Subject>,
    pub y_test: Vec<bool>,
    /// Test subjects with an observed label.
    pub test_a: Vec<Subject>,
    pub y_test_a: Vec<bool>,
    /// Test subjects whose label is unknown.
    pub test_b: Vec<Subject>,
    pub y_test_b: Vec<bool>,
    /// Extra third held out in S2; empty otherwise.
    pub holdout: Vec<Subject>,
    pub y_holdout: Vec<bool>,
    /// Intercept used to draw `Y`.
    pub beta0: f64,
}

fn linear(beta: &[f64], x: &[f64]) -> f64 {
    beta[0] + x.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>()
}

/// Intercept making the average `pi` over `xs` equal `target`.
fn solve_intercept(beta: &[f64], xs: &[Vec<f64>], target: f64) -> f64 {
    let slopes: Vec<f64> = xs.iter().map(|x| linear(beta, x) - beta[0]).collect();
    let avg = |b0: f64| slopes.iter().map(|v| logistic(b0 + v)).sum::<f64>() / slopes.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if avg(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Draw one dataset.
pub fn generate(config: &ScenarioConfig) -> Result<GeneratedData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gamma_recent = Gamma::new(config.s_shape, 1.0 / config.s_rate)
        .map_err(|e| RecencyError::InvalidScenario(e.to_string()))?;
    let gamma_long = match config.s_rate_long {
        Some(r0) => Some(Gamma::new(config.s_shape, 1.0 / r0).map_err(|e| RecencyError::InvalidScenario(e.to_string()))?),
        None => None,
    };

    let n = config.n_total;
    let xs: Vec<Vec<f64>> = (0..n).map(|_| config.covariates.draw(&mut rng)).collect();
    let mut beta = config.beta_true.clone();
    if let Some(target) = config.target_recency {
        beta[0] = solve_intercept(&beta, &xs, target);
    }

    let mut subjects = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for x in xs {
        let y = rng.random_bool(logistic(linear(&beta, &x)));
        let law = match (&gamma_long, y) {
            (Some(g), false) => g,
            _ => &gamma_recent,
        };
        let s = law.sample(&mut rng).max(f64::MIN_POSITIVE);
        let shift = config.odn_in_z * x[0];
        let mut eta = config.eta_true;
        eta[0] += shift;
        eta[2] += shift;
        let (p0, p1) = p0_p1(s, &eta, false);
        let z = match (y, s <= 1.0) {
            (true, true) => rng.random_bool(p1),
            (true, false) => false,
            (false, true) => true,
            (false, false) => rng.random_bool(p0),
        };
        subjects.push(Subject::new(x, s, z, 1.0));
        ys.push(y);
    }

    let (holdout, y_holdout, rest, y_rest) = if config.scenario == Scenario::S2 {
        let third = n / 3;
        let rest = subjects.split_off(third);
        let y_rest = ys.split_off(third);
        (subjects, ys, rest, y_rest)
    } else {
        (Vec::new(), Vec::new(), subjects, ys)
    };
    let half = rest.len() / 2;
    let mut train = rest;
    let test = train.split_off(half);
    let mut y_train = y_rest;
    let y_test = y_train.split_off(half);

    perturb_training(&mut train, config);

    let mut test_a = Vec::new();
    let mut y_test_a = Vec::new();
    let mut test_b = Vec::new();
    let mut y_test_b = Vec::new();
    for (s, &y) in test.iter().zip(&y_test) {
        if s.label().is_known() {
            test_a.push(s.clone());
            y_test_a.push(y);
        } else {
            test_b.push(s.clone());
            y_test_b.push(y);
        }
    }
    Ok(GeneratedData {
        train,
        y_train,
        test,
        y_test,
        test_a,
        y_test_a,
        test_b,
        y_test_b,
        holdout,
        y_holdout,
        beta0: beta[0],
    })
}

/// Jitter `S` (reflected at zero) and flip `Z` for an exact share of the
/// training subjects. Uses its own stream so a null perturbation changes nothing.
fn perturb_training(train: &mut [Subject], config: &ScenarioConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ PERTURB_STREAM);
    if config.s_jitter > 0.0 {
        let h = config.s_jitter;
        for s in train.iter_mut() {
            let moved = (s.s + rng.random_range(-h..=h)).abs();
            s.s = moved.max(f64::MIN_POSITIVE);
        }
    }
    let flips = (config.z_flip_rate * train.len() as f64).round() as usize;
    if flips > 0 {
        for i in sample(&mut rng, train.len(), flips) {
            train[i].z = !train[i].z;
        }
    }
}
