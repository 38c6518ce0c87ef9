//! Regularized incomplete gamma and the χ² quantile used to size zero-shot
//! centroid noise.

use thiserror::Error;

const MAX_ITER: usize = 10_000;
const TINY: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum StatsError {
    #[error("degrees of freedom {0} outside 1..=4096")]
    DegreesOfFreedom(usize),
    #[error("probability {0} outside (0, 1)")]
    Probability(f64),
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let log_prefactor = -x + a * libm::log(x) - libm::lgamma(a);
    if x < a + 1.0 {
        // Series: P = e^{-x} x^a / Γ(a+1) Σ x^n / ((a+1)…(a+n))
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..MAX_ITER {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        (sum * libm::exp(log_prefactor)).clamp(0.0, 1.0)
    } else {
        // Lentz continued fraction for Q.
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (1.0 - libm::exp(log_prefactor) * h).clamp(0.0, 1.0)
    }
}

/// χ² CDF with `m` degrees of freedom.
pub fn chi2_cdf(m: usize, q: f64) -> f64 {
    gamma_p(m as f64 / 2.0, q / 2.0)
}

/// Lower-tail quantile `q` with `P(χ²_m ≤ q) = p`, by bracketing and
/// bisection on the regularized incomplete gamma.
pub fn chi2_quantile(m: usize, p: f64) -> Result<f64, StatsError> {
    if !(1..=4096).contains(&m) {
        return Err(StatsError::DegreesOfFreedom(m));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(StatsError::Probability(p));
    }
    let mut lo = 0.0;
    let mut hi = (m as f64).max(1.0);
    while chi2_cdf(m, hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(m, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi.max(1e-300) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_special_case() {
        // m = 2 is exponential with mean 2.
        for &q in &[0.1, 1.0, 5.0, 30.0] {
            assert!((chi2_cdf(2, q) - (1.0 - libm::exp(-q / 2.0))).abs() < 1e-14);
        }
        let q = chi2_quantile(2, 0.5).unwrap();
        assert!((q - 2.0 * core::f64::consts::LN_2).abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert_eq!(chi2_quantile(0, 0.5), Err(StatsError::DegreesOfFreedom(0)));
        assert_eq!(chi2_quantile(4097, 0.5), Err(StatsError::DegreesOfFreedom(4097)));
        assert_eq!(chi2_quantile(3, 1.0), Err(StatsError::Probability(1.0)));
        assert!(chi2_quantile(3, f64::NAN).is_err());
    }

    #[test]
    fn large_degrees_of_freedom() {
        let q = chi2_quantile(4096, 0.5).unwrap();
        // Median of χ²_m ≈ m (1 − 2/(9m))³
        let approx = 4096.0 * (1.0 - 2.0 / (9.0 * 4096.0_f64)).powi(3);
        assert!((q - approx).abs() < 0.05);
    }
}
