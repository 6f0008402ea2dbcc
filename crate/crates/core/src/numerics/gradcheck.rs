/// Central-difference gradient with per-coordinate step `h·max(1, |xᵢ|)`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let step = h * x[i].abs().max(1.0);
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], DEFAULT_STEP);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, -7.0, 1e3], DEFAULT_STEP);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mixed_terms() {
        let f = |x: &[f64]| x[0] * x[1] + x[1].sin();
        let g = finite_diff_grad(f, &[2.0, 0.5], DEFAULT_STEP);
        assert!((g[0] - 0.5).abs() < 1e-8);
        assert!((g[1] - (2.0 + 0.5f64.cos())).abs() < 1e-8);
    }
}
