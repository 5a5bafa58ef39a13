//! Exponential-tilt extension: the density of time since infection among
//! recent infections is allowed to differ from the long-term population by a
//! factor `exp(psi0 + psi1 s)`. The empirical-likelihood weights are profiled
//! out through a scalar Lagrange multiplier `mu`.

use log::debug;

use crate::error::{RecencyError, Result};
use crate::estimation::{
    bic, check_data_for_spec, check_weights, fit, maximize_with_restarts, sandwich_from_scores,
    ExtendedDiagnostics, FitOptions, FitResult,
};
use crate::likelihood::evaluate;
use crate::model::{ModelSpec, Subject, Theta};
use crate::numeric::pairwise_sum;

/// Largest exponent accepted before the tilt is treated as overflowing.
const MAX_EXPONENT: f64 = 700.0;
/// Below this spread of `e - 1` the tilt is the identity and `mu = 0`.
const FLAT_TILT: f64 = 1e-10;
const BRACKET_SHRINK: f64 = 1e-12;
pub const SUM_TOLERANCE: f64 = 1e-10;
pub const MOMENT_TOLERANCE: f64 = 1e-8;

/// `exp(psi0 + psi1 s)`, refusing exponents that would overflow.
pub fn tilt(s: f64, psi: [f64; 2]) -> Result<f64> {
    let exponent = psi[0] + psi[1] * s;
    if !exponent.is_finite() || exponent.abs() > MAX_EXPONENT {
        return Err(RecencyError::TiltOverflow { s, exponent });
    }
    Ok(exponent.exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiltSolution {
    pub mu: f64,
    /// Jump sizes `p_i` of the long-term distribution at each observed `s`.
    pub jumps: Vec<f64>,
    /// Root found, jumps in `[0, 1]`, constraints met within tolerance.
    pub feasible: bool,
    pub sum_residual: f64,
    pub moment_residual: f64,
    /// `mu` lies inside the interval that keeps every `p_i <= 1`.
    pub in_bracket: bool,
}

/// Solve the constraint for `mu` given the tilt parameters.
pub fn solve_mu(psi: [f64; 2], data: &[Subject]) -> Result<TiltSolution> {
    if data.is_empty() {
        return Err(RecencyError::EmptyData);
    }
    let e = data
        .iter()
        .map(|s| tilt(s.s, psi))
        .collect::<Result<Vec<f64>>>()?;
    let w: Vec<f64> = data.iter().map(|s| s.w).collect();
    Ok(solve_mu_from(&e, &w))
}

/// Core solver on tilt values `e` and weights `w`.
pub(crate) fn solve_mu_from(e: &[f64], w: &[f64]) -> TiltSolution {
    let total = pairwise_sum(w);
    let d: Vec<f64> = e.iter().map(|v| v - 1.0).collect();
    let spread = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let g = |mu: f64| -> f64 {
        d.iter()
            .zip(w)
            .map(|(di, wi)| wi * di / (1.0 + mu * di))
            .sum()
    };

    let root = if spread < FLAT_TILT {
        Some(0.0)
    } else {
        // 1 + mu d_i > 0 for all i
        let lo = d
            .iter()
            .filter(|v| **v > 0.0)
            .map(|v| -1.0 / v)
            .fold(f64::NEG_INFINITY, f64::max);
        let hi = d
            .iter()
            .filter(|v| **v < 0.0)
            .map(|v| -1.0 / v)
            .fold(f64::INFINITY, f64::min);
        if lo.is_finite() && hi.is_finite() && lo < hi {
            let width = hi - lo;
            let (mut a, mut b) = (lo + BRACKET_SHRINK * width, hi - BRACKET_SHRINK * width);
            let (ga, gb) = (g(a), g(b));
            if ga > 0.0 && gb < 0.0 {
                for _ in 0..400 {
                    let mid = 0.5 * (a + b);
                    if mid <= a || mid >= b {
                        break;
                    }
                    let gm = g(mid);
                    if gm == 0.0 {
                        a = mid;
                        b = mid;
                        break;
                    }
                    if gm > 0.0 {
                        a = mid;
                    } else {
                        b = mid;
                    }
                }
                Some(if g(a).abs() <= g(b).abs() { a } else { b })
            } else {
                None
            }
        } else {
            None
        }
    };

    let Some(mu) = root else {
        return TiltSolution {
            mu: f64::NAN,
            jumps: Vec::new(),
            feasible: false,
            sum_residual: f64::INFINITY,
            moment_residual: f64::INFINITY,
            in_bracket: false,
        };
    };
    let jumps: Vec<f64> = d
        .iter()
        .zip(w)
        .map(|(di, wi)| wi / (total * (1.0 + mu * di)))
        .collect();
    let sum_residual = (pairwise_sum(&jumps) - 1.0).abs();
    let moments: Vec<f64> = jumps.iter().zip(&d).map(|(p, di)| p * di).collect();
    let moment_residual = pairwise_sum(&moments).abs();

    // p_i <= 1  <=>  mu on the correct side of (w_i - W) / (W d_i)
    let mut in_bracket = true;
    for (di, wi) in d.iter().zip(w) {
        if *di == 0.0 {
            continue;
        }
        let u = (wi - total) / (total * di);
        if (*di > 0.0 && mu < u) || (*di < 0.0 && mu > u) {
            in_bracket = false;
        }
    }
    let feasible = in_bracket
        && jumps.iter().all(|p| (0.0..=1.0).contains(p))
        && sum_residual <= SUM_TOLERANCE
        && moment_residual <= MOMENT_TOLERANCE;
    TiltSolution {
        mu,
        jumps,
        feasible,
        sum_residual,
        moment_residual,
        in_bracket,
    }
}

/// Profile log pseudo-likelihood; `-inf` when no admissible `mu` exists.
pub fn profile_log_likelihood(data: &[Subject], theta: &Theta, spec: &ModelSpec) -> Result<f64> {
    check_data_for_spec(data, spec)?;
    theta.check(spec)?;
    if !spec.extended {
        return Err(RecencyError::InvalidSpec("profile likelihood needs the extended model".into()));
    }
    let sol = match solve_mu(theta.psi_or_zero(), data) {
        Ok(s) => s,
        Err(RecencyError::TiltOverflow { .. }) => return Ok(f64::NEG_INFINITY),
        Err(e) => return Err(e),
    };
    if !sol.feasible {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(evaluate(data, theta, spec, Some(sol.mu), false, false)?.value)
}

/// Fit the extended model. Without `init` the basic model is fitted first and
/// its estimate, with `psi = 0`, is the starting point.
pub fn fit_extended(
    data: &[Subject],
    spec: &ModelSpec,
    init: Option<&Theta>,
    options: &FitOptions,
) -> Result<FitResult> {
    if !spec.extended {
        return fit(data, spec, init, options);
    }
    check_data_for_spec(data, spec)?;
    if options.require_rescaled_weights {
        check_weights(data)?;
    }
    let start = match init {
        Some(t) => t.clone(),
        None => {
            let basic_spec = spec.clone().with_extended(false);
            let basic_opts = FitOptions {
                compute_covariance: false,
                ..*options
            };
            match fit(data, &basic_spec, None, &basic_opts) {
                Ok(b) if b.log_pl.is_finite() => Theta::from_parts(
                    spec,
                    b.theta_hat.beta,
                    b.theta_hat.eta,
                    b.theta_hat.gamma,
                    Some([0.0, 0.0]),
                )?,
                _ => Theta::initial(spec),
            }
        }
    };
    start.check(spec)?;

    let mut accepted = 0usize;
    let mut rejected = 0usize;
    let mut max_sum = 0.0f64;
    let mut max_moment = 0.0f64;
    let w: Vec<f64> = data.iter().map(|s| s.w).collect();
    let objective = |free: &[f64]| -> Option<(f64, Vec<f64>)> {
        let theta = start.with_free(free);
        let psi = theta.psi_or_zero();
        let e: Option<Vec<f64>> = data.iter().map(|s| tilt(s.s, psi).ok()).collect();
        let Some(e) = e else {
            rejected += 1;
            return None;
        };
        let sol = solve_mu_from(&e, &w);
        if !sol.feasible {
            rejected += 1;
            return None;
        }
        let eval = evaluate(data, &theta, spec, Some(sol.mu), false, true).ok()?;
        if !eval.value.is_finite() {
            rejected += 1;
            return None;
        }
        accepted += 1;
        max_sum = max_sum.max(sol.sum_residual);
        max_moment = max_moment.max(sol.moment_residual);
        Some((eval.value, eval.gradient))
    };
    let best = maximize_with_restarts(objective, &start.free_values(), options);
    let theta_hat = start.with_free(&best.x);
    let psi = theta_hat.psi_or_zero();
    let mu = solve_mu(psi, data).map(|s| s.mu).unwrap_or(f64::NAN);
    debug!(
        "extended fit: converged={} psi={psi:?} mu={mu} rejected={rejected}",
        best.converged
    );

    let (covariance, covariance_error) = if options.compute_covariance && best.value.is_finite() {
        match profile_sandwich(data, &theta_hat, spec) {
            Ok(c) => (Some(c), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (None, None)
    };
    let n_free = theta_hat.free_indices().len();
    Ok(FitResult {
        spec: spec.clone(),
        covariance,
        covariance_error,
        log_pl: best.value,
        bic: bic(best.value, n_free, data.len()),
        n_subjects: data.len(),
        converged: best.converged,
        iterations: best.iterations,
        score_norm: best.gradient_norm(),
        recency_rate: None,
        extended: Some(ExtendedDiagnostics {
            mu,
            max_sum_residual: max_sum,
            max_moment_residual: max_moment,
            accepted_evaluations: accepted,
            infeasible_rejections: rejected,
            psi_sign_ok: psi[0] * psi[1] < 0.0,
        }),
        theta_hat,
    })
}

/// Sandwich for the extended model: `mu` joins the free parameters with its
/// own estimating equation, and the block for the model parameters is kept.
pub(crate) fn profile_sandwich(
    data: &[Subject],
    theta_hat: &Theta,
    spec: &ModelSpec,
) -> Result<nalgebra::DMatrix<f64>> {
    let sol = solve_mu(theta_hat.psi_or_zero(), data)?;
    if !sol.mu.is_finite() {
        return Err(RecencyError::InvalidTheta("no admissible mu at the estimate".into()));
    }
    let mut point = theta_hat.free_values();
    let k = point.len();
    point.push(sol.mu);
    let mut names = spec.free_param_names();
    names.push("mu".into());
    let scores = |x: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
        let theta = theta_hat.with_free(&x[..k]);
        let eval = evaluate(data, &theta, spec, Some(x[k]), true, true)?;
        if !eval.value.is_finite() {
            return Err(RecencyError::InvalidTheta("profile term undefined near the estimate".into()));
        }
        Ok((eval.gradient, eval.per_subject))
    };
    let full = sandwich_from_scores(data.len(), &point, &names, scores)?;
    Ok(full.view((0, 0), (k, k)).into_owned())
}
