use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{auc, generate, Scenario, ScenarioConfig};
use crate::error::{RecencyError, Result};
use crate::estimation::{fit, FitOptions};
use crate::logistic::fit_logistic;
use crate::model::{ModelSpec, RecencyLabel};
use crate::numeric::{mean, sample_sd};
use crate::prediction::{recency_rate, type1_risk, type2_risk};

const Z95: f64 = 1.959_963_984_540_054;

/// Outcome of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub rep: usize,
    pub seed: u64,
    pub converged: bool,
    pub estimates: Vec<f64>,
    pub ses: Vec<Option<f64>>,
    pub covered: Vec<Option<bool>>,
    pub logistic_estimates: Vec<f64>,
    pub logistic_ses: Vec<f64>,
    pub logistic_covered: Vec<bool>,
    pub auc_type1: f64,
    pub auc_type2: f64,
    pub auc_logistic: f64,
    pub e_y: f64,
    pub logistic_e_y: f64,
    pub true_e_y: f64,
    pub n_labeled_train: usize,
    pub truth: Vec<f64>,
    /// Largest `(sum, moment)` constraint residuals of an extended fit.
    pub constraint_residuals: Option<[f64; 2]>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub mean_se: f64,
    /// Standard deviation of the estimates (0 with a single replicate).
    pub sd: f64,
    pub coverage: f64,
    /// Monte Carlo standard error of `mean_estimate`.
    pub mc_se: f64,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub scenario: Scenario,
    pub n_reps: usize,
    pub n_converged: usize,
    pub params: Vec<ParamSummary>,
    pub logistic: Vec<ParamSummary>,
    pub auc_type1: f64,
    pub auc_type2: f64,
    pub auc_logistic: f64,
    pub e_y_mean: f64,
    pub e_y_sd: f64,
    pub logistic_e_y_mean: f64,
    pub true_e_y_mean: f64,
    pub labeled_train_mean: f64,
}

impl ReplicateSummary {
    pub fn param(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone)]
pub struct ReplicateRun {
    pub summary: ReplicateSummary,
    pub records: Vec<ReplicateRecord>,
    pub param_names: Vec<String>,
}

impl ReplicateRun {
    /// Long-format table: one row per replicate and parameter.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["rep", "param", "estimate", "se", "covered", "auc1", "auc2", "e_y", "converged"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into());
        for r in &self.records {
            for (j, name) in self.param_names.iter().enumerate() {
                out.write_record([
                    r.rep.to_string(),
                    name.clone(),
                    opt(r.estimates.get(j).copied()),
                    opt(r.ses.get(j).copied().flatten()),
                    r.covered
                        .get(j)
                        .copied()
                        .flatten()
                        .map(|c| u8::from(c).to_string())
                        .unwrap_or_else(|| "NA".into()),
                    r.auc_type1.to_string(),
                    r.auc_type2.to_string(),
                    r.e_y.to_string(),
                    u8::from(r.converged).to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn replicate_seed(base: u64, rep: usize) -> u64 {
    splitmix64(base ^ splitmix64(rep as u64))
}

/// Generating value of each free parameter of `spec`.
fn truth_for(spec: &ModelSpec, config: &ScenarioConfig, beta0: f64) -> Result<Vec<f64>> {
    let psi = config.true_psi().unwrap_or([0.0, 0.0]);
    spec.free_param_names()
        .iter()
        .map(|name| {
            let value = match name.as_str() {
                "beta0" => beta0,
                "eta00" => config.eta_true[0],
                "eta01" => config.eta_true[1],
                "eta10" => config.eta_true[2],
                "eta11" => config.eta_true[3],
                "psi0" => psi[0],
                "psi1" => psi[1],
                other => {
                    if let Some(c) = other.strip_prefix("beta_") {
                        let j = config
                            .covariate_names
                            .iter()
                            .position(|n| n == c)
                            .ok_or_else(|| RecencyError::UnknownCovariate(c.into()))?;
                        config.beta_true[j + 1]
                    } else if let Some(c) = other.strip_prefix("gamma_") {
                        let j = config.covariate_names.iter().position(|n| n == c);
                        if j == Some(0) {
                            config.odn_in_z
                        } else {
                            0.0
                        }
                    } else {
                        return Err(RecencyError::InvalidSpec(format!("no truth for `{other}`")));
                    }
                }
            };
            Ok(value)
        })
        .collect()
}

fn one_replicate(config: &ScenarioConfig, spec: &ModelSpec, options: &FitOptions, rep: usize) -> Result<ReplicateRecord> {
    let seed = replicate_seed(config.seed, rep);
    let cfg = ScenarioConfig {
        seed,
        ..config.clone()
    };
    let data = generate(&cfg)?;
    let truth = truth_for(spec, config, data.beta0)?;
    let k = truth.len();
    let mut beta_truth = config.beta_true.clone();
    beta_truth[0] = data.beta0;

    let labeled: Vec<usize> = (0..data.train.len()).filter(|&i| data.train[i].label().is_known()).collect();
    let lr = fit_logistic(
        &labeled.iter().map(|&i| data.train[i].covariates.clone()).collect::<Vec<_>>(),
        &labeled
            .iter()
            .map(|&i| data.train[i].label() == RecencyLabel::Recent)
            .collect::<Vec<_>>(),
        &labeled.iter().map(|&i| data.train[i].w).collect::<Vec<_>>(),
    )?;
    let lr_ses = lr.standard_errors();
    let logistic_covered = lr
        .beta
        .iter()
        .zip(&lr_ses)
        .zip(&beta_truth)
        .map(|((b, se), t)| (b - t).abs() <= Z95 * se)
        .collect();
    let lr_test: Vec<f64> = data.test.iter().map(|s| lr.predict(&s.covariates)).collect();
    let lr_train: Vec<f64> = data.train.iter().map(|s| lr.predict(&s.covariates)).collect();

    let mut record = ReplicateRecord {
        rep,
        seed,
        converged: false,
        estimates: vec![f64::NAN; k],
        ses: vec![None; k],
        covered: vec![None; k],
        logistic_estimates: lr.beta.clone(),
        logistic_ses: lr_ses,
        logistic_covered,
        auc_type1: f64::NAN,
        auc_type2: f64::NAN,
        auc_logistic: auc(&lr_test, &data.y_test).unwrap_or(f64::NAN),
        e_y: f64::NAN,
        logistic_e_y: mean(&lr_train),
        true_e_y: data.y_train.iter().filter(|y| **y).count() as f64 / data.y_train.len() as f64,
        n_labeled_train: labeled.len(),
        truth: truth.clone(),
        constraint_residuals: None,
        error: None,
    };

    let fitted = match fit(&data.train, spec, None, options) {
        Ok(f) => f,
        Err(e) => {
            record.error = Some(e.to_string());
            return Ok(record);
        }
    };
    record.converged = fitted.converged;
    record.constraint_residuals = fitted
        .extended
        .as_ref()
        .map(|d| [d.max_sum_residual, d.max_moment_residual]);
    record.estimates = fitted.estimates();
    if let Some(se) = fitted.standard_errors() {
        record.ses = se.iter().map(|v| Some(*v)).collect();
        record.covered = record
            .estimates
            .iter()
            .zip(&se)
            .zip(&truth)
            .map(|((e, s), t)| Some((e - t).abs() <= Z95 * s))
            .collect();
    } else {
        record.error = fitted.covariance_error.clone();
    }
    let theta = &fitted.theta_hat;
    let t1 = data
        .test
        .iter()
        .map(|s| type1_risk(s, theta))
        .collect::<Result<Vec<f64>>>()?;
    record.auc_type1 = auc(&t1, &data.y_test).unwrap_or(f64::NAN);
    let t2 = data
        .test_b
        .iter()
        .map(|s| type2_risk(s, theta, spec))
        .collect::<Result<Vec<f64>>>()?;
    record.auc_type2 = auc(&t2, &data.y_test_b).unwrap_or(f64::NAN);
    record.e_y = recency_rate(&data.train, theta, spec)?;
    Ok(record)
}

fn summarize_param(name: &str, truth: f64, est: &[f64], ses: &[f64], covered: &[bool]) -> ParamSummary {
    let m = mean(est);
    let sd = if est.len() > 1 { sample_sd(est) } else { 0.0 };
    ParamSummary {
        name: name.to_string(),
        truth,
        mean_estimate: m,
        mean_se: mean(ses),
        sd,
        coverage: covered.iter().filter(|c| **c).count() as f64 / covered.len().max(1) as f64,
        mc_se: sd / (est.len().max(1) as f64).sqrt(),
        bias: m - truth,
    }
}

fn finite_mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        mean(&v)
    }
}

/// Generate, fit and summarize `n_reps` independent datasets. Replicates run
/// in parallel; results do not depend on the thread count.
pub fn run_replicates(
    config: &ScenarioConfig,
    n_reps: usize,
    spec: &ModelSpec,
    options: &FitOptions,
) -> Result<ReplicateRun> {
    if n_reps == 0 {
        return Err(RecencyError::InvalidArgument("at least one replicate is required".into()));
    }
    config.validate()?;
    spec.validate()?;
    if spec.n_covariates() != config.covariate_names.len() {
        return Err(RecencyError::DimensionMismatch {
            what: "model covariates vs scenario covariates",
            expected: config.covariate_names.len(),
            got: spec.n_covariates(),
        });
    }
    let records = (0..n_reps)
        .into_par_iter()
        .map(|rep| one_replicate(config, spec, options, rep))
        .collect::<Result<Vec<_>>>()?;

    let names = spec.free_param_names();
    let ok: Vec<&ReplicateRecord> = records.iter().filter(|r| r.converged).collect();
    let params = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let est: Vec<f64> = ok.iter().map(|r| r.estimates[j]).collect();
            let ses: Vec<f64> = ok.iter().filter_map(|r| r.ses[j]).collect();
            let cov: Vec<bool> = ok.iter().filter_map(|r| r.covered[j]).collect();
            let truth = records.first().map(|r| r.truth[j]).unwrap_or(f64::NAN);
            summarize_param(name, truth, &est, &ses, &cov)
        })
        .collect();
    let mut beta_names = vec!["beta0".to_string()];
    beta_names.extend(config.covariate_names.iter().map(|c| format!("beta_{c}")));
    let logistic = beta_names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let est: Vec<f64> = records.iter().map(|r| r.logistic_estimates[j]).collect();
            let ses: Vec<f64> = records.iter().map(|r| r.logistic_ses[j]).collect();
            let cov: Vec<bool> = records.iter().map(|r| r.logistic_covered[j]).collect();
            // a re-solved intercept has no single truth
            let truth = if j == 0 && config.target_recency.is_some() {
                f64::NAN
            } else {
                config.beta_true[j]
            };
            summarize_param(name, truth, &est, &ses, &cov)
        })
        .collect();
    let e_y: Vec<f64> = ok.iter().map(|r| r.e_y).filter(|v| v.is_finite()).collect();
    let summary = ReplicateSummary {
        scenario: config.scenario,
        n_reps,
        n_converged: ok.len(),
        params,
        logistic,
        auc_type1: finite_mean(ok.iter().map(|r| r.auc_type1)),
        auc_type2: finite_mean(ok.iter().map(|r| r.auc_type2)),
        auc_logistic: finite_mean(records.iter().map(|r| r.auc_logistic)),
        e_y_mean: finite_mean(e_y.iter().copied()),
        e_y_sd: if e_y.len() > 1 { sample_sd(&e_y) } else { 0.0 },
        logistic_e_y_mean: finite_mean(records.iter().map(|r| r.logistic_e_y)),
        true_e_y_mean: finite_mean(records.iter().map(|r| r.true_e_y)),
        labeled_train_mean: finite_mean(records.iter().map(|r| r.n_labeled_train as f64)),
    };
    Ok(ReplicateRun {
        summary,
        records,
        param_names: names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(scenario: Scenario) -> ScenarioConfig {
        ScenarioConfig {
            n_total: 600,
            ..ScenarioConfig::preset(scenario)
        }
    }

    #[test]
    fn single_replicate_has_zero_sd() {
        let run = run_replicates(&small(Scenario::S1), 1, &ModelSpec::new(["odn"]), &FitOptions::default()).unwrap();
        assert_eq!(run.records.len(), 1);
        for p in &run.summary.params {
            assert_eq!(p.sd, 0.0);
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let cfg = small(Scenario::S1);
        let spec = ModelSpec::new(["odn"]);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_replicates(&cfg, 6, &spec, &FitOptions::default()).unwrap())
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.records, b.records);
        assert_eq!(a.summary, b.summary);
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        a.write_csv(&mut ca).unwrap();
        b.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        let header = String::from_utf8(ca).unwrap();
        assert!(header.starts_with("rep,param,estimate,se,covered,auc1,auc2,e_y,converged\n"));
    }

    #[test]
    fn truth_lookup() {
        let cfg = ScenarioConfig::preset(Scenario::S7);
        let spec = ModelSpec::new(["odn"]).with_eta_covariates(vec![0]);
        let t = truth_for(&spec, &cfg, 0.95).unwrap();
        assert_eq!(t, vec![0.95, -0.53, -0.62, -5.71, 0.5]);
        let ext = ModelSpec::new(["odn"]).with_extended(true);
        let t = truth_for(&ext, &ScenarioConfig::preset(Scenario::S6), 0.95).unwrap();
        assert_eq!(t.len(), 6);
        assert!((t[5] + 0.105).abs() < 1e-12);
    }

    #[test]
    fn seeds_differ_per_replicate() {
        assert_ne!(replicate_seed(1, 0), replicate_seed(1, 1));
        assert_ne!(replicate_seed(1, 0), replicate_seed(2, 0));
    }
}
