//! Scalar densities and special functions.

use std::f64::consts::PI;

use statrs::function::{beta, gamma};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Scale a nonnegative vector to sum to one.
pub fn normalize_l1(v: &[f64]) -> Result<Vec<f64>> {
    if let Some(x) = v.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return Err(Error::Domain(format!("normalize_l1: entry {x} is not a finite nonnegative value")));
    }
    let total: f64 = v.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroMass);
    }
    Ok(v.iter().map(|x| x / total).collect())
}

/// `ln Γ(x)` for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("log_gamma requires x > 0, got {x}")));
    }
    Ok(gamma::ln_gamma(x))
}

pub fn digamma(x: f64) -> f64 {
    gamma::digamma(x)
}

#[inline]
pub fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * LN_2PI - sd.ln() - 0.5 * z * z
}

/// Log density of the location-zero Student-t with `dof` degrees of freedom
/// and scale `scale`.
pub fn student_t_logpdf(x: f64, dof: f64, scale: f64) -> Result<f64> {
    if !(dof > 0.0) || !(scale > 0.0) {
        return Err(Error::Domain(format!(
            "student_t_logpdf requires dof > 0 and scale > 0, got dof={dof}, scale={scale}"
        )));
    }
    let half = 0.5 * (dof + 1.0);
    let z = x / scale;
    Ok(gamma::ln_gamma(half) - gamma::ln_gamma(0.5 * dof)
        - 0.5 * (dof * PI).ln()
        - scale.ln()
        - half * (z * z / dof).ln_1p())
}

/// Log density of the half-Cauchy with the given scale, for `x > 0`.
pub fn half_cauchy_logpdf(x: f64, scale: f64) -> Result<f64> {
    if !(x > 0.0) || !(scale > 0.0) {
        return Err(Error::Domain(format!(
            "half_cauchy_logpdf requires x > 0 and scale > 0, got x={x}, scale={scale}"
        )));
    }
    let z = x / scale;
    Ok((2.0 / (PI * scale)).ln() - (z * z).ln_1p())
}

/// Upper tail `P(T > t)` of the Student-t distribution.
pub fn t_sf(t: f64, dof: f64) -> f64 {
    if t.is_nan() || !(dof > 0.0) {
        return f64::NAN;
    }
    if t == 0.0 {
        return 0.5;
    }
    if t.is_infinite() {
        return if t > 0.0 { 0.0 } else { 1.0 };
    }
    let x = dof / (dof + t * t);
    let tail = 0.5 * beta::beta_reg(0.5 * dof, 0.5, x);
    if t > 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// Two-sided p-value for a t statistic.
pub fn t_two_sided_p(t: f64, dof: f64) -> f64 {
    (2.0 * t_sf(t.abs(), dof)).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_l1(&[2.0, 2.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(normalize_l1(&[1.0, 0.0, 3.0]).unwrap(), vec![0.25, 0.0, 0.75]);
        assert!(matches!(normalize_l1(&[0.0, 0.0]), Err(Error::ZeroMass)));
        assert!(normalize_l1(&[-1.0, 2.0]).is_err());
    }

    #[test]
    fn log_gamma_examples() {
        assert_abs_diff_eq!(log_gamma(1.0).unwrap(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(log_gamma(5.0).unwrap(), 24f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(log_gamma(0.5).unwrap(), 0.572_364_942_924_700_1, epsilon = 1e-12);
        assert!(log_gamma(0.0).is_err());
        assert!(log_gamma(-1.5).is_err());
    }

    #[test]
    fn log_gamma_matches_factorials_and_recurrence() {
        let mut fact = 1.0f64;
        for n in 1..30u32 {
            // Γ(n+1) = n!
            fact *= n as f64;
            let got = log_gamma(n as f64 + 1.0).unwrap();
            assert!((got - fact.ln()).abs() <= 1e-10 * fact.ln().max(1.0), "n={n}");
        }
        // ln Γ(x+1) = ln Γ(x) + ln x across the stated range
        for &x in &[1e-3, 0.37, 3.3, 47.0, 1234.5, 9.9e5] {
            let lhs = log_gamma(x + 1.0).unwrap();
            let rhs = log_gamma(x).unwrap() + f64::ln(x);
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "x={x}");
        }
    }

    #[test]
    fn student_t_fixed_points() {
        assert_abs_diff_eq!(student_t_logpdf(0.0, 1.0, 1.0).unwrap(), -1.144_729_885_849_400_2, epsilon = 1e-12);
        for &x in &[0.1, 1.7, 25.0] {
            assert_abs_diff_eq!(
                student_t_logpdf(x, 3.3, 0.7).unwrap(),
                student_t_logpdf(-x, 3.3, 0.7).unwrap(),
                epsilon = 1e-15
            );
        }
        assert!(student_t_logpdf(0.0, 0.0, 1.0).is_err());
        assert!(student_t_logpdf(0.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn half_cauchy_fixed_points() {
        assert_abs_diff_eq!(half_cauchy_logpdf(1e-300, 1.0).unwrap(), -0.451_582_705_289_454_9, epsilon = 1e-12);
        assert_abs_diff_eq!(half_cauchy_logpdf(1.0, 1.0).unwrap(), -1.144_729_885_849_400_2, epsilon = 1e-12);
        assert!(half_cauchy_logpdf(0.0, 1.0).is_err());
    }

    #[test]
    fn t_sf_fixed_points() {
        assert_eq!(t_sf(0.0, 3.0), 0.5);
        assert_abs_diff_eq!(t_sf(1.0, 1.0), 0.25, epsilon = 1e-12);
        // Cauchy tail in closed form: 1/2 - atan(t)/π
        for &t in &[-3.0, -0.2, 0.4, 2.5, 40.0] {
            let exact = 0.5 - f64::atan(t) / PI;
            assert_abs_diff_eq!(t_sf(t, 1.0), exact, epsilon = 1e-10);
        }
        // dof = 2 closed form: 1/2 - t / (2 sqrt(2 + t²))
        for &t in &[0.3f64, 1.0, 4.0] {
            let exact = 0.5 - t / (2.0 * (2.0 + t * t).sqrt());
            assert_abs_diff_eq!(t_sf(t, 2.0), exact, epsilon = 1e-10);
        }
    }
}
