//! Fixed-effects GLMs by iteratively reweighted least squares, ignoring grouping.
//!
//! Used to initialize the mixed-model fit and, independently of the
//! closed-form likelihood, as the vanishing-heterogeneity reference.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::families::Family;

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub coefficients: Vec<f64>,
    /// Fitted means, per unit (success probabilities for the binomial family).
    pub fitted: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

struct Link {
    inverse: fn(f64) -> f64,
    /// dμ/dη
    slope: fn(f64) -> f64,
    forward: fn(f64) -> f64,
    variance: fn(f64) -> f64,
}

fn link(family: Family) -> Link {
    match family {
        Family::Gaussian => Link { inverse: |e| e, slope: |_| 1.0, forward: |m| m, variance: |_| 1.0 },
        Family::Poisson => Link { inverse: f64::exp, slope: f64::exp, forward: f64::ln, variance: |m| m },
        Family::Binomial => Link {
            inverse: |e| 1.0 / (1.0 + (-e).exp()),
            slope: |e| {
                let p = 1.0 / (1.0 + (-e).exp());
                p * (1.0 - p)
            },
            forward: |m| (m / (1.0 - m)).ln(),
            variance: |m| m * (1.0 - m),
        },
        Family::Gamma => Link { inverse: f64::exp, slope: f64::exp, forward: f64::ln, variance: |m| m * m },
    }
}

/// Canonical-link IRLS (log link for the Gamma family). `design` is row-major
/// with `ncols` columns; binomial responses are success counts out of `trials`.
pub fn glm_fit(family: Family, design: &[f64], ncols: usize, y: &[f64], trials: Option<&[u32]>) -> Result<GlmFit> {
    let n = y.len();
    if design.len() != n * ncols {
        return Err(Error::Model(format!("design has {} entries, expected {}", design.len(), n * ncols)));
    }
    if n == 0 {
        return Err(Error::Data("no observations".into()));
    }
    let l = link(family);
    let x = DMatrix::from_row_slice(n, ncols, design);
    let prior_w: Vec<f64> = (0..n).map(|i| trials.map_or(1.0, |t| f64::from(t[i]))).collect();
    let response: Vec<f64> = match family {
        Family::Binomial => y.iter().zip(&prior_w).map(|(y, n)| y / n).collect(),
        _ => y.to_vec(),
    };
    let mut eta: Vec<f64> = response
        .iter()
        .zip(&prior_w)
        .map(|(&r, &w)| {
            let start = match family {
                Family::Gaussian => r,
                Family::Poisson => r + 0.5,
                Family::Binomial => (r * w + 0.5) / (w + 1.0),
                Family::Gamma => r.max(1e-8),
            };
            (l.forward)(start)
        })
        .collect();
    let mut beta = DVector::zeros(ncols);
    let mut last = f64::INFINITY;
    for iteration in 1..=100 {
        let mut w = DVector::zeros(n);
        let mut z = DVector::zeros(n);
        for i in 0..n {
            let mu = (l.inverse)(eta[i]);
            let d = (l.slope)(eta[i]).max(1e-300);
            let var = (l.variance)(mu).max(1e-300);
            w[i] = prior_w[i] * d * d / var;
            z[i] = eta[i] + (response[i] - mu) / d;
        }
        let xtw = x.transpose() * DMatrix::from_diagonal(&w);
        let lhs = &xtw * &x;
        let rhs = &xtw * &z;
        beta = lhs
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::Model(format!("GLM normal equations: {e}")))?;
        let eta_new = &x * &beta;
        eta = eta_new.iter().copied().collect();
        let dev: f64 = (0..n)
            .map(|i| {
                let mu = (l.inverse)(eta[i]);
                prior_w[i] * (response[i] - mu).powi(2) / (l.variance)(mu).max(1e-300)
            })
            .sum();
        if !dev.is_finite() {
            return Err(Error::Model("GLM iterations diverged".into()));
        }
        if (last - dev).abs() <= 1e-13 * dev.abs().max(1.0) {
            return Ok(GlmFit {
                coefficients: beta.iter().copied().collect(),
                fitted: eta.iter().map(|&e| (l.inverse)(e)).collect(),
                iterations: iteration,
                converged: true,
            });
        }
        last = dev;
    }
    Ok(GlmFit {
        coefficients: beta.iter().copied().collect(),
        fitted: eta.iter().map(|&e| (l.inverse)(e)).collect(),
        iterations: 100,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_is_least_squares() {
        let design = [1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0];
        let y = [1.0, 3.1, 4.9, 7.0];
        let fit = glm_fit(Family::Gaussian, &design, 2, &y, None).unwrap();
        assert!((fit.coefficients[0] - 1.03).abs() < 1e-10);
        assert!((fit.coefficients[1] - 1.98).abs() < 1e-10);
    }

    #[test]
    fn poisson_two_groups_matches_log_means() {
        let design = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let y = [1.0, 3.0, 4.0, 8.0];
        let fit = glm_fit(Family::Poisson, &design, 2, &y, None).unwrap();
        assert!(fit.converged);
        assert!((fit.coefficients[0] - 2f64.ln()).abs() < 1e-10);
        assert!((fit.coefficients[1] - 3f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn binomial_saturated_intercept() {
        let design = [1.0, 1.0];
        let fit = glm_fit(Family::Binomial, &design, 1, &[3.0, 5.0], Some(&[10, 10])).unwrap();
        assert!((fit.coefficients[0] - (0.4f64 / 0.6).ln()).abs() < 1e-10);
    }
}
