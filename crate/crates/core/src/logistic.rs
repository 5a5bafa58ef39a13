//! Weighted logistic regression by iteratively reweighted least squares.
//!
//! Used as the naive comparator in simulations (recency as the response for
//! labeled subjects only) and as an independent oracle in tests.

use nalgebra::{DMatrix, DVector};

use crate::error::{RecencyError, Result};
use crate::model::logistic;
use crate::numeric::log_logistic;

#[derive(Debug, Clone)]
pub struct LogisticFit {
    /// Intercept first.
    pub beta: Vec<f64>,
    /// Model-based covariance `(X' W X)^-1`.
    pub covariance: DMatrix<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LogisticFit {
    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.beta.len())
            .map(|i| self.covariance[(i, i)].max(0.0).sqrt())
            .collect()
    }

    pub fn predict(&self, covariates: &[f64]) -> f64 {
        let eta = self.beta[0]
            + covariates
                .iter()
                .zip(&self.beta[1..])
                .map(|(x, b)| x * b)
                .sum::<f64>();
        logistic(eta)
    }
}

/// Fit `P(y = 1 | x) = logistic(b0 + x b)` with case weights `w`.
pub fn fit_logistic(x: &[Vec<f64>], y: &[bool], w: &[f64]) -> Result<LogisticFit> {
    let n = x.len();
    if n == 0 {
        return Err(RecencyError::EmptyData);
    }
    if y.len() != n || w.len() != n {
        return Err(RecencyError::DimensionMismatch {
            what: "logistic response/weights length",
            expected: n,
            got: y.len().min(w.len()),
        });
    }
    let positives = y.iter().filter(|v| **v).count();
    if positives == 0 || positives == n {
        return Err(RecencyError::SingleClass {
            positives,
            negatives: n - positives,
        });
    }
    let p = x[0].len() + 1;
    let design = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
    let mut beta = DVector::<f64>::zeros(p);
    let mut converged = false;
    let mut iterations = 0;
    let mut info = DMatrix::<f64>::identity(p, p);
    for _ in 0..100 {
        iterations += 1;
        let eta = &design * &beta;
        let mut grad = DVector::<f64>::zeros(p);
        info.fill(0.0);
        for i in 0..n {
            let mu = logistic(eta[i]);
            let r = w[i] * (f64::from(u8::from(y[i])) - mu);
            let v = w[i] * mu * (1.0 - mu);
            let row = design.row(i);
            grad += row.transpose() * r;
            info += row.transpose() * row * v;
        }
        let step = info
            .clone()
            .cholesky()
            .ok_or(RecencyError::SingularInformation {
                parameter: "logistic design".into(),
                singular_value: 0.0,
            })?
            .solve(&grad);
        beta += &step;
        if step.amax() < 1e-12 * (1.0 + beta.amax()) || grad.amax() < 1e-12 {
            converged = true;
            break;
        }
    }
    // information at the final estimate
    let eta = &design * &beta;
    info.fill(0.0);
    let mut log_likelihood = 0.0;
    for i in 0..n {
        let mu = logistic(eta[i]);
        let row = design.row(i);
        info += row.transpose() * row * (w[i] * mu * (1.0 - mu));
        log_likelihood += w[i] * if y[i] { log_logistic(eta[i]) } else { log_logistic(-eta[i]) };
    }
    let covariance = info.try_inverse().ok_or(RecencyError::SingularInformation {
        parameter: "logistic design".into(),
        singular_value: 0.0,
    })?;
    Ok(LogisticFit {
        beta: beta.iter().copied().collect(),
        covariance,
        log_likelihood,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intercept_only_is_the_log_odds() {
        let x = vec![vec![]; 10];
        let y: Vec<bool> = (0..10).map(|i| i < 7).collect();
        let f = fit_logistic(&x, &y, &[1.0; 10]).unwrap();
        assert!((f.beta[0] - (0.7f64 / 0.3).ln()).abs() < 1e-10);
        // var = 1 / (n p (1 - p))
        assert!((f.covariance[(0, 0)] - 1.0 / (10.0 * 0.21)).abs() < 1e-10);
    }

    #[test]
    fn integer_weights_equal_replication() {
        let x = vec![vec![0.1], vec![-1.0], vec![2.0], vec![0.5], vec![-0.3]];
        let y = vec![true, false, true, false, true];
        let w = vec![1.0, 2.0, 1.0, 3.0, 1.0];
        let a = fit_logistic(&x, &y, &w).unwrap();
        let mut xr = Vec::new();
        let mut yr = Vec::new();
        for i in 0..5 {
            for _ in 0..w[i] as usize {
                xr.push(x[i].clone());
                yr.push(y[i]);
            }
        }
        let b = fit_logistic(&xr, &yr, &vec![1.0; xr.len()]).unwrap();
        for (u, v) in a.beta.iter().zip(&b.beta) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let err = fit_logistic(&[vec![1.0], vec![2.0]], &[true, true], &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, RecencyError::SingleClass { .. }));
    }
}
