use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Relative pivot magnitude below which a column counts as dependent.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct LeastSquares {
    pub coef: Vec<f64>,
    pub residuals: Vec<f64>,
    pub rss: f64,
    /// `RSS / (n - p)`; NaN for a square system (no residual degrees of freedom).
    pub residual_variance: f64,
    /// `(XᵀX)⁻¹`, assembled from the triangular factor.
    pub xtx_inverse: Matrix,
}

/// Ordinary least squares through Householder QR with column pivoting.
pub fn least_squares(x: &Matrix, y: &[f64]) -> Result<LeastSquares> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "least_squares: {n} rows but {} responses",
            y.len()
        )));
    }
    if p == 0 || n < p {
        return Err(Error::ShapeMismatch(format!(
            "least_squares needs at least as many rows as columns, got {n}x{p}"
        )));
    }

    // Column-major working copy so Householder updates walk contiguous memory.
    let mut cols: Vec<Vec<f64>> = (0..p).map(|j| x.column(j)).collect();
    let mut qty = y.to_vec();
    let mut perm: Vec<usize> = (0..p).collect();
    let mut largest_pivot = 0.0f64;

    for j in 0..p {
        let (best, best_norm) = (j..p)
            .map(|c| (c, cols[c][j..].iter().map(|v| v * v).sum::<f64>()))
            .fold((j, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        cols.swap(j, best);
        perm.swap(j, best);

        let norm = best_norm.sqrt();
        if j == 0 {
            largest_pivot = norm;
        }
        if !(norm > RANK_TOLERANCE * largest_pivot) || norm == 0.0 {
            return Err(Error::RankDeficient { rank: j, cols: p });
        }

        // Householder vector v with v[0] = x0 - alpha, reflecting x onto alpha·e0.
        let x0 = cols[j][j];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = cols[j][j..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|a| a * a).sum();
        cols[j][j] = alpha;
        for r in cols[j][j + 1..].iter_mut() {
            *r = 0.0;
        }
        if vnorm2 == 0.0 {
            continue;
        }
        let apply = |target: &mut [f64]| {
            let s: f64 = v.iter().zip(target.iter()).map(|(a, b)| a * b).sum();
            let f = 2.0 * s / vnorm2;
            for (t, a) in target.iter_mut().zip(&v) {
                *t -= f * a;
            }
        };
        for c in cols.iter_mut().skip(j + 1) {
            apply(&mut c[j..]);
        }
        apply(&mut qty[j..]);
    }

    // Back substitution R·b = (Qᵀy)[..p] in pivoted order.
    let r = |i: usize, k: usize| cols[k][i];
    let mut b = vec![0.0; p];
    for i in (0..p).rev() {
        let mut s = qty[i];
        for k in i + 1..p {
            s -= r(i, k) * b[k];
        }
        b[i] = s / r(i, i);
    }
    let mut coef = vec![0.0; p];
    for (j, &orig) in perm.iter().enumerate() {
        coef[orig] = b[j];
    }

    // R⁻¹ (upper triangular), then (XᵀX)⁻¹ = P R⁻¹ R⁻ᵀ Pᵀ.
    let mut rinv = Matrix::zeros(p, p);
    for col in 0..p {
        for i in (0..=col).rev() {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in i + 1..=col {
                s -= r(i, k) * rinv.get(k, col);
            }
            rinv.set(i, col, s / r(i, i));
        }
    }
    let mut xtx_inverse = Matrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            let s: f64 = (i.max(j)..p).map(|k| rinv.get(i, k) * rinv.get(j, k)).sum();
            xtx_inverse.set(perm[i], perm[j], s);
        }
    }

    let residuals: Vec<f64> = (0..n)
        .map(|i| y[i] - super::matrix::dot(x.row(i), &coef))
        .collect();
    let rss: f64 = residuals.iter().map(|e| e * e).sum();
    Ok(LeastSquares {
        coef,
        residual_variance: if n > p { rss / (n - p) as f64 } else { f64::NAN },
        rss,
        residuals,
        xtx_inverse,
    })
}
