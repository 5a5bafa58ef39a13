//! Small numerical helpers shared by the likelihood code.

const PAIRWISE_BLOCK: usize = 32;

/// Pairwise summation. The split points depend only on the slice length, so
/// the result is reproducible regardless of how the inputs were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Column sums of a row-major `rows x cols` buffer, each column pairwise.
pub fn pairwise_column_sums(buf: &[f64], cols: usize) -> Vec<f64> {
    if cols == 0 {
        return Vec::new();
    }
    let rows = buf.len() / cols;
    let mut column = vec![0.0; rows];
    (0..cols)
        .map(|j| {
            for (i, c) in column.iter_mut().enumerate() {
                *c = buf[i * cols + j];
            }
            pairwise_sum(&column)
        })
        .collect()
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log(logistic(x))`.
#[inline]
pub fn log_logistic(x: f64) -> f64 {
    -log1p_exp(-x)
}

/// `log(exp(a) + exp(b))`, tolerating `-inf` in either argument.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + (lo - hi).exp().ln_1p()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
pub fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    (pairwise_sum(&sq) / (values.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small_and_large() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64 * 0.5).collect();
        assert_eq!(pairwise_sum(&v), 249_750.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn log_add_exp_handles_neg_infinity() {
        assert_eq!(log_add_exp(f64::NEG_INFINITY, 0.0), 0.0);
        assert_eq!(log_add_exp(f64::NEG_INFINITY, f64::NEG_INFINITY), f64::NEG_INFINITY);
        assert!((log_add_exp(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn log1p_exp_is_stable_at_extremes() {
        assert_eq!(log1p_exp(800.0), 800.0);
        assert!(log1p_exp(-800.0) >= 0.0);
        assert!((log_logistic(0.0) + 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn column_sums() {
        let buf = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(pairwise_column_sums(&buf, 2), vec![9.0, 12.0]);
    }
}
