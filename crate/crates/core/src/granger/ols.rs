//! Least squares by Householder QR.

/// Relative threshold on `|R_jj|` below which a column counts as dependent.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    pub rss: f64,
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum OlsError {
    #[error("design has {rows} rows and {cols} columns; need more rows than columns")]
    Underdetermined { rows: usize, cols: usize },
    #[error("design matrix is rank deficient at column {0}")]
    RankDeficient(usize),
}

/// Minimizes `‖y − Xβ‖²` for a row-major `rows × cols` design `x`.
///
/// The caller includes the intercept column if one is wanted.
pub fn ols_rss(y: &[f64], x: &[f64], cols: usize) -> Result<OlsFit, OlsError> {
    let rows = y.len();
    if rows <= cols || x.len() != rows * cols {
        return Err(OlsError::Underdetermined { rows, cols });
    }
    // column-major working copy
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| x[i * cols + j]).collect()).collect();
    let mut qty = y.to_vec();
    let scale = a
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let mut diag = vec![0.0; cols];

    for j in 0..cols {
        let norm = a[j][j..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= RANK_TOLERANCE * scale.max(f64::MIN_POSITIVE) {
            return Err(OlsError::RankDeficient(j));
        }
        let alpha = if a[j][j] > 0.0 { -norm } else { norm };
        // v = a_j[j..] - alpha e_1, stored in place
        a[j][j] -= alpha;
        let vnorm2: f64 = a[j][j..].iter().map(|v| v * v).sum();
        let (head, tail) = a.split_at_mut(j + 1);
        let v = &head[j][j..];
        for col in tail.iter_mut() {
            let dot: f64 = v.iter().zip(&col[j..]).map(|(p, q)| p * q).sum();
            let f = 2.0 * dot / vnorm2;
            for (c, vi) in col[j..].iter_mut().zip(v) {
                *c -= f * vi;
            }
        }
        let dot: f64 = v.iter().zip(&qty[j..]).map(|(p, q)| p * q).sum();
        let f = 2.0 * dot / vnorm2;
        for (c, vi) in qty[j..].iter_mut().zip(v) {
            *c -= f * vi;
        }
        diag[j] = alpha;
    }

    let mut beta = vec![0.0; cols];
    for j in (0..cols).rev() {
        let mut s = qty[j];
        for k in j + 1..cols {
            s -= a[k][j] * beta[k];
        }
        beta[j] = s / diag[j];
    }
    let rss = qty[cols..].iter().map(|v| v * v).sum();
    Ok(OlsFit {
        coefficients: beta,
        rss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.5 - 3.0).collect();
        let y: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let design: Vec<f64> = xs.iter().flat_map(|&x| [1.0, x]).collect();
        let fit = ols_rss(&y, &design, 2).unwrap();
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-12);
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-12);
        assert!(fit.rss < 1e-18);
    }

    #[test]
    fn orthogonal_regressor_projects_to_mean() {
        // x = ±1 alternating, y symmetric in x, so slope is 0
        let y = [3.0, 3.0, 5.0, 5.0, 1.0, 1.0, 7.0, 7.0];
        let design: Vec<f64> = (0..8).flat_map(|i| [1.0, if i % 2 == 0 { 1.0 } else { -1.0 }]).collect();
        let fit = ols_rss(&y, &design, 2).unwrap();
        assert!(fit.coefficients[1].abs() < 1e-14);
        let mean = y.iter().sum::<f64>() / 8.0;
        let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        assert!((fit.rss - tss).abs() < 1e-12);
    }

    #[test]
    fn rank_deficiency_flagged() {
        let design: Vec<f64> = (0..10).flat_map(|i| [1.0, i as f64, 0.0]).collect();
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(ols_rss(&y, &design, 3), Err(OlsError::RankDeficient(2)));
        assert!(matches!(ols_rss(&y[..2], &design[..6], 3), Err(OlsError::Underdetermined { .. })));
    }
}
