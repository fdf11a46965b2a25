//! Log-domain special functions.

use statrs::function::gamma::ln_gamma;

pub(crate) use statrs::function::beta::ln_beta;
pub(crate) use statrs::function::gamma::ln_gamma as lgamma;

/// `log(1 + e^x)` without overflow for large `x` or loss of precision for very negative `x`.
pub(crate) fn log1p_exp(x: f64) -> f64 {
    if x > 36.0 {
        x + (-x).exp()
    } else if x > -36.0 {
        x.exp().ln_1p()
    } else {
        x.exp()
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log Γ(a + d) − log Γ(a)`.
///
/// Small non-negative integer increments are summed term by term, which avoids
/// the cancellation between two large `lgamma` values when `a` is large.
pub(crate) fn ln_gamma_ratio(a: f64, d: f64) -> f64 {
    if d == 0.0 {
        return 0.0;
    }
    if d > 0.0 && d.fract() == 0.0 && d <= 4096.0 {
        let k = d as u32;
        return (0..k).map(|i| (a + f64::from(i)).ln()).sum();
    }
    ln_gamma(a + d) - ln_gamma(a)
}

pub(crate) fn ln_factorial(k: f64) -> f64 {
    ln_gamma(k + 1.0)
}

pub(crate) fn ln_binomial(n: f64, k: f64) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log1p_exp_branches_agree_with_direct_form() {
        // softplus(x) − softplus(−x) = x across all three branches
        for &x in &[0.0, 0.5, 3.0, 10.0, 30.0, 35.9, 36.1, 50.0] {
            assert!((log1p_exp(x) - log1p_exp(-x) - x).abs() <= 1e-14 * x.abs().max(1.0));
        }
        assert!((log1p_exp(0.0) - 2f64.ln()).abs() < 1e-16);
        // 1 + e^x rounds to 1 here; the leading term of the series is exact
        assert_eq!(log1p_exp(-40.0), f64::exp(-40.0));
        assert_eq!(log1p_exp(800.0), 800.0);
    }

    #[test]
    fn gamma_ratio_matches_lgamma_difference() {
        for &(a, d) in &[(0.3, 5.0), (2.5, 17.0), (4.0, 0.7), (10.0, 3.25)] {
            let expected = ln_gamma(a + d) - ln_gamma(a);
            assert!((ln_gamma_ratio(a, d) - expected).abs() < 1e-12);
        }
        // large shape: the summed form stays accurate where the difference loses digits
        let r = ln_gamma_ratio(1e6, 2.0);
        assert!((r - (1e6f64.ln() + (1e6f64 + 1.0).ln())).abs() < 1e-13);
    }

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn logistic_is_symmetric() {
        assert_eq!(logistic(0.0), 0.5);
        assert!((logistic(3.0) + logistic(-3.0) - 1.0).abs() < 1e-15);
    }
}
