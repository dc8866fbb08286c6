//! Special functions needed by the Dirichlet losses.
//!
//! Digamma and trigamma use upward recurrence to `x >= 10` followed by the
//! asymptotic (Bernoulli) series; log-gamma uses the Lanczos approximation
//! with g = 7, n = 9 and the reflection formula below 1/2.
//!
//! The checked entry points return an error for `x <= 0`. The `*_unchecked`
//! variants skip validation and are used in loss inner loops where the
//! argument is already known to be `>= 1`.

use std::f64::consts::PI;

use crate::error::{EdlError, Result};

const ASYMPTOTIC_START: f64 = 10.0;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEFFS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// 0.5 * ln(2π)
const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_8;

fn check_positive(name: &str, x: f64) -> Result<()> {
    if x.is_nan() || x <= 0.0 {
        return Err(EdlError::Domain(format!("{name} requires x > 0, got {x}")));
    }
    if x.is_infinite() {
        return Err(EdlError::NonFinite(format!("{name} argument is infinite")));
    }
    Ok(())
}

/// Digamma function ψ(x) = d/dx ln Γ(x) for x > 0.
pub fn digamma(x: f64) -> Result<f64> {
    check_positive("digamma", x)?;
    Ok(digamma_unchecked(x))
}

pub fn digamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < ASYMPTOTIC_START {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // -1/(12x^2) + 1/(120x^4) - 1/(252x^6) + 1/(240x^8) - 1/(132x^10) + 691/(32760x^12) - 1/(12x^14)
    let series = inv2
        * (-1.0 / 12.0
            + inv2
                * (1.0 / 120.0
                    + inv2
                        * (-1.0 / 252.0
                            + inv2
                                * (1.0 / 240.0
                                    + inv2
                                        * (-1.0 / 132.0
                                            + inv2 * (691.0 / 32_760.0 + inv2 * (-1.0 / 12.0)))))));
    acc + x.ln() - 0.5 * inv + series
}

/// Trigamma function ψ'(x) for x > 0. Needed for gradients of the CE and KL terms.
pub fn trigamma(x: f64) -> Result<f64> {
    check_positive("trigamma", x)?;
    Ok(trigamma_unchecked(x))
}

pub fn trigamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < ASYMPTOTIC_START {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // 1/x + 1/(2x^2) + 1/(6x^3) - 1/(30x^5) + 1/(42x^7) - 1/(30x^9) + 5/(66x^11) - 691/(2730x^13) + 7/(6x^15)
    let tail = inv
        * inv2
        * (1.0 / 6.0
            + inv2
                * (-1.0 / 30.0
                    + inv2
                        * (1.0 / 42.0
                            + inv2
                                * (-1.0 / 30.0
                                    + inv2
                                        * (5.0 / 66.0
                                            + inv2 * (-691.0 / 2730.0 + inv2 * (7.0 / 6.0)))))));
    acc + inv + 0.5 * inv2 + tail
}

/// Natural logarithm of the gamma function for x > 0.
pub fn log_gamma(x: f64) -> Result<f64> {
    check_positive("log_gamma", x)?;
    Ok(log_gamma_unchecked(x))
}

pub fn log_gamma_unchecked(x: f64) -> f64 {
    if x < 0.5 {
        // Γ(x)Γ(1-x) = π / sin(πx); sin(πx) > 0 on (0, 1/2).
        return (PI / (PI * x).sin()).ln() - log_gamma_unchecked(1.0 - x);
    }
    let z = x - 1.0;
    let mut series = LANCZOS_COEFFS[0];
    for (i, &c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        series += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    HALF_LN_TWO_PI + (z + 0.5) * t.ln() - t + series.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn digamma_reference_points() {
        assert!((digamma(1.0).unwrap() + EULER_GAMMA).abs() < 1e-12);
        let half = -EULER_GAMMA - 2.0 * std::f64::consts::LN_2;
        assert!((digamma(0.5).unwrap() - half).abs() < 1e-12);
        assert!((half + 1.963_510_026_0).abs() < 1e-10);
        assert!((digamma(2.0).unwrap() - digamma(1.0).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn digamma_recurrence_over_range() {
        let mut x = 1e-2;
        while x <= 1e3 {
            let r = digamma(x + 1.0).unwrap() - digamma(x).unwrap() - 1.0 / x;
            assert!(r.abs() < 1e-10, "x = {x}, residual = {r}");
            x *= 1.07;
        }
    }

    #[test]
    fn digamma_small_argument() {
        // ψ(x) ≈ -1/x - γ + (π²/6) x for small x
        let x = 1e-3;
        let approx = -1.0 / x - EULER_GAMMA + PI * PI / 6.0 * x;
        assert!((digamma(x).unwrap() - approx).abs() < 1e-5);
    }

    #[test]
    fn trigamma_reference_points() {
        assert!((trigamma(1.0).unwrap() - PI * PI / 6.0).abs() < 1e-12);
        assert!((trigamma(0.5).unwrap() - PI * PI / 2.0).abs() < 1e-11);
        let mut x = 0.05;
        while x < 500.0 {
            let r = trigamma(x).unwrap() - trigamma(x + 1.0).unwrap() - 1.0 / (x * x);
            assert!(r.abs() < 1e-9 * (1.0 / (x * x)).max(1.0), "x = {x}");
            x *= 1.3;
        }
    }

    #[test]
    fn trigamma_matches_digamma_slope() {
        for &x in &[0.3, 1.0, 2.5, 9.99, 10.0, 37.0] {
            let h = 1e-5;
            let fd = (digamma_unchecked(x + h) - digamma_unchecked(x - h)) / (2.0 * h);
            assert!((fd - trigamma_unchecked(x)).abs() < 1e-6 * trigamma_unchecked(x));
        }
    }

    #[test]
    fn log_gamma_reference_points() {
        assert!(log_gamma(1.0).unwrap().abs() < 1e-14);
        assert!(log_gamma(2.0).unwrap().abs() < 1e-14);
        assert!((log_gamma(3.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-14);
        let ln_sqrt_pi = 0.5 * PI.ln();
        assert!((log_gamma(0.5).unwrap() - ln_sqrt_pi).abs() < 1e-13);
        assert!((ln_sqrt_pi - 0.572_364_9).abs() < 1e-7);
    }

    #[test]
    fn exp_log_gamma_is_factorial() {
        let mut fact = 1.0f64;
        for n in 0..=15u32 {
            if n > 0 {
                fact *= n as f64;
            }
            let got = log_gamma(n as f64 + 1.0).unwrap().exp();
            assert!(
                (got - fact).abs() <= 1e-10 * fact,
                "n = {n}: {got} vs {fact}"
            );
        }
    }

    #[test]
    fn log_gamma_relative_accuracy_against_recurrence() {
        // ln Γ(x+1) = ln Γ(x) + ln x away from the roots at 1 and 2.
        let mut x = 2.5;
        while x < 170.0 {
            let lhs = log_gamma(x + 1.0).unwrap();
            let rhs = log_gamma(x).unwrap() + x.ln();
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs(), "x = {x}");
            x *= 1.11;
        }
    }

    #[test]
    fn rejects_poles() {
        assert!(digamma(0.0).is_err());
        assert!(digamma(-1.5).is_err());
        assert!(log_gamma(0.0).is_err());
        assert!(log_gamma(-3.0).is_err());
        assert!(trigamma(f64::NAN).is_err());
    }
}
