//! Quasi-Newton maximizer used by every fit.
//!
//! BFGS on the negated objective with an Armijo backtracking line search.
//! Points where the objective is `-inf` (or cannot be evaluated) are treated
//! as rejected steps. Once the gradient is small, a few Newton steps built from
//! finite differences of the analytic gradient finish the job; this matters
//! because the stopping rule is on the unscaled score, whose size grows with n.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct MaximizeOptions {
    pub max_iterations: usize,
    /// Stop when the sup-norm of the gradient falls below this.
    pub gradient_tolerance: f64,
    /// Largest sup-norm of a single trial step.
    pub max_step: f64,
}

impl Default for MaximizeOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            gradient_tolerance: 1e-6,
            max_step: 5.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Maximum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Trial points rejected because the objective was not finite.
    pub rejections: usize,
}

impl Maximum {
    pub fn gradient_norm(&self) -> f64 {
        sup_norm(&self.gradient)
    }
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, g| m.max(g.abs()))
}

/// Maximize `f`, which returns the value and gradient, or `None` where the
/// objective is undefined.
pub fn maximize<F>(mut f: F, x0: &[f64], options: &MaximizeOptions) -> Maximum
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut rejections = 0usize;
    let mut eval = |x: &[f64], rejections: &mut usize| -> Option<(f64, DVector<f64>)> {
        match f(x) {
            Some((v, g)) if v.is_finite() && g.iter().all(|c| c.is_finite()) => {
                Some((-v, DVector::from_vec(g.into_iter().map(|c| -c).collect())))
            }
            _ => {
                *rejections += 1;
                None
            }
        }
    };

    let mut x = DVector::from_column_slice(x0);
    let Some((mut fx, mut g)) = eval(x.as_slice(), &mut rejections) else {
        return Maximum {
            x: x0.to_vec(),
            value: f64::NEG_INFINITY,
            gradient: vec![f64::NAN; n],
            iterations: 0,
            converged: false,
            rejections,
        };
    };
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut h_is_identity = true;
    let mut iterations = 0;

    while iterations < options.max_iterations {
        let gnorm = g.amax();
        if gnorm < options.gradient_tolerance {
            break;
        }
        iterations += 1;

        let mut d = -(&h * &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            h = DMatrix::identity(n, n);
            h_is_identity = true;
            d = -g.clone();
            slope = g.dot(&d);
        }
        let dmax = d.amax();
        if dmax > options.max_step {
            d *= options.max_step / dmax;
            slope = g.dot(&d);
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &x + alpha * &d;
            if let Some((ft, gt)) = eval(trial.as_slice(), &mut rejections) {
                let armijo = ft <= fx + 1e-4 * alpha * slope;
                // Near the optimum the change in f drowns in rounding; accept
                // steps that do not raise f beyond that noise and shrink the gradient.
                let noise = 1e-12 * (1.0 + fx.abs());
                let flat = ft <= fx + noise && gt.amax() < gnorm;
                if armijo || flat {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            alpha *= 0.5;
        }

        match accepted {
            Some((x_new, f_new, g_new)) => {
                let s = &x_new - &x;
                let y = &g_new - &g;
                let sy = s.dot(&y);
                if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
                    if h_is_identity {
                        h *= sy / y.dot(&y);
                        h_is_identity = false;
                    }
                    let rho = 1.0 / sy;
                    let hy = &h * &y;
                    let yhy = y.dot(&hy);
                    // H+ = H - rho (s hy' + hy s') + (rho^2 yHy + rho) s s'
                    h -= rho * (&s * hy.transpose() + &hy * s.transpose());
                    h += (rho * rho * yhy + rho) * (&s * s.transpose());
                }
                x = x_new;
                fx = f_new;
                g = g_new;
            }
            None if !h_is_identity => {
                h = DMatrix::identity(n, n);
                h_is_identity = true;
            }
            None => break,
        }
    }

    let mut result = Maximum {
        x: x.as_slice().to_vec(),
        value: -fx,
        gradient: g.iter().map(|c| -c).collect(),
        iterations,
        converged: g.amax() < options.gradient_tolerance,
        rejections,
    };
    if !result.converged && result.gradient_norm().is_finite() {
        newton_polish(&mut f, &mut result, options);
    }
    result
}

/// Newton steps with a finite-difference Hessian of the gradient. A step is
/// kept only when it shrinks the gradient without lowering the objective
/// beyond rounding noise.
fn newton_polish<F>(f: &mut F, best: &mut Maximum, options: &MaximizeOptions)
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = best.x.len();
    for _ in 0..options.max_iterations.min(20) {
        if best.gradient_norm() < options.gradient_tolerance {
            best.converged = true;
            return;
        }
        let Some(hess) = fd_jacobian(f, &best.x, 1e-5) else {
            return;
        };
        let hess = (&hess + hess.transpose()) * 0.5;
        let grad = DVector::from_column_slice(&best.gradient);
        let Some(step) = hess.clone().lu().solve(&(-&grad)) else {
            return;
        };
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let trial: Vec<f64> = (0..n).map(|i| best.x[i] + alpha * step[i]).collect();
            if let Some((v, g)) = f(&trial) {
                let noise = 1e-12 * (1.0 + best.value.abs());
                if v.is_finite() && v >= best.value - noise && sup_norm(&g) < best.gradient_norm() {
                    best.x = trial;
                    best.value = v;
                    best.gradient = g;
                    best.iterations += 1;
                    improved = true;
                    break;
                }
            } else {
                best.rejections += 1;
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    best.converged = best.gradient_norm() < options.gradient_tolerance;
}

/// Central-difference Jacobian of the gradient map with steps
/// `rel_step * (1 + |x_j|)`.
pub(crate) fn fd_jacobian<F>(f: &mut F, x: &[f64], rel_step: f64) -> Option<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let h = rel_step * (1.0 + x[j].abs());
        let mut up = x.to_vec();
        let mut dn = x.to_vec();
        up[j] += h;
        dn[j] -= h;
        let (_, gu) = f(&up)?;
        let (_, gd) = f(&dn)?;
        for i in 0..n {
            jac[(i, j)] = (gu[i] - gd[i]) / (2.0 * h);
        }
    }
    Some(jac)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maximizes_concave_quadratic() {
        let target = [1.5, -2.0, 0.25];
        let f = |x: &[f64]| {
            let v = -x
                .iter()
                .zip(&target)
                .enumerate()
                .map(|(i, (a, b))| (i as f64 + 1.0) * (a - b).powi(2))
                .sum::<f64>();
            let g = x
                .iter()
                .zip(&target)
                .enumerate()
                .map(|(i, (a, b))| -2.0 * (i as f64 + 1.0) * (a - b))
                .collect();
            Some((v, g))
        };
        let m = maximize(f, &[0.0, 0.0, 0.0], &MaximizeOptions::default());
        assert!(m.converged);
        for (a, b) in m.x.iter().zip(&target) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = -((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2));
            let g = vec![
                2.0 * (1.0 - a) + 400.0 * a * (b - a * a),
                -200.0 * (b - a * a),
            ];
            Some((v, g))
        };
        let m = maximize(f, &[-1.2, 1.0], &MaximizeOptions::default());
        assert!(m.converged, "{m:?}");
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn undefined_region_is_rejected() {
        // log(x) - x has its max at 1; x <= 0 is undefined.
        let f = |x: &[f64]| (x[0] > 0.0).then(|| (x[0].ln() - x[0], vec![1.0 / x[0] - 1.0]));
        let m = maximize(f, &[0.01], &MaximizeOptions::default());
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-6);
        assert!(m.rejections > 0);
    }

    #[test]
    fn unbounded_objective_is_flagged() {
        let f = |x: &[f64]| Some((x[0], vec![1.0]));
        let opts = MaximizeOptions {
            max_iterations: 20,
            ..MaximizeOptions::default()
        };
        let m = maximize(f, &[0.0], &opts);
        assert!(!m.converged);
        assert_eq!(m.iterations, 20);
    }
}
