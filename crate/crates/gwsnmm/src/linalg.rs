//! Small dense linear-algebra helpers shared by the fitting routines.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solve `a x = b` by LU with partial pivoting.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    let lu = a.clone().lu();
    match lu.solve(b) {
        Some(x) if x.iter().all(|v| v.is_finite()) => Ok(x),
        _ => Err(Error::Singular(context.to_string())),
    }
}

/// Weighted least squares via the normal equations.
///
/// Rows are triples (features, response, weight); weights must be
/// nonnegative. Returns the coefficient vector. Rank deficiency is
/// detected from the normal-equation matrix and reported with the
/// indices of columns that do not add rank.
pub fn weighted_least_squares(
    rows: &[(Vec<f64>, f64, f64)],
    dim: usize,
    context: &str,
) -> Result<DVector<f64>> {
    if rows.is_empty() {
        return Err(Error::Validation(format!("{context}: no rows to fit")));
    }
    let mut xtx = DMatrix::<f64>::zeros(dim, dim);
    let mut xty = DVector::<f64>::zeros(dim);
    for (x, y, w) in rows {
        debug_assert_eq!(x.len(), dim);
        for i in 0..dim {
            let wxi = w * x[i];
            xty[i] += wxi * y;
            for j in i..dim {
                xtx[(i, j)] += wxi * x[j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            xtx[(i, j)] = xtx[(j, i)];
        }
    }
    match rank_deficient_columns(&xtx) {
        Some(cols) => Err(Error::Singular(format!(
            "{context}: rank-deficient design, offending columns {cols:?}"
        ))),
        None => solve(&xtx, &xty, context),
    }
}

/// Columns whose pivot collapses during a rank-revealing factorization,
/// or `None` when the matrix has full rank.
fn rank_deficient_columns(xtx: &DMatrix<f64>) -> Option<Vec<usize>> {
    let n = xtx.nrows();
    let qr = xtx.clone().col_piv_qr();
    let r = qr.r();
    let perm = qr.p();
    let scale = (0..n).map(|i| r[(i, i)].abs()).fold(0.0f64, f64::max);
    if scale == 0.0 {
        return Some((0..n).collect());
    }
    // apply the pivot permutation to an index row so each pivot position
    // can be traced back to its original column
    let mut index_row = DMatrix::<f64>::zeros(1, n);
    for i in 0..n {
        index_row[(0, i)] = i as f64;
    }
    perm.permute_columns(&mut index_row);
    let mut offending = Vec::new();
    for i in 0..n {
        if r[(i, i)].abs() <= 1e-10 * scale {
            offending.push(index_row[(0, i)] as usize);
        }
    }
    if offending.is_empty() {
        None
    } else {
        offending.sort_unstable();
        Some(offending)
    }
}

/// Least squares by SVD with relative singular-value truncation.
///
/// Used for the bias-polynomial fit where the monomial design can be
/// severely ill conditioned; truncation keeps the prediction stable.
/// Returns the minimum-norm solution and the condition number of the
/// design (largest over smallest nonzero singular value).
pub fn truncated_svd_least_squares(
    design: &DMatrix<f64>,
    rhs: &DVector<f64>,
    rcond: f64,
) -> Result<(DVector<f64>, f64)> {
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    if smax == 0.0 {
        return Err(Error::Singular("all singular values are zero".into()));
    }
    let smin_kept = svd
        .singular_values
        .iter()
        .cloned()
        .filter(|s| *s > rcond * smax)
        .fold(f64::INFINITY, f64::min);
    let cond = smax / smin_kept;
    let sol = svd
        .solve(rhs, rcond * smax)
        .map_err(|e| Error::Singular(e.to_string()))?;
    Ok((sol, cond))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn solves_small_system() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_column_slice(&[5.0, 10.0]);
        let x = solve(&a, &b, "test").unwrap();
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn singular_system_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = DVector::from_column_slice(&[1.0, 2.0]);
        assert!(matches!(solve(&a, &b, "ctx"), Err(Error::Singular(_))));
    }

    #[test]
    fn wls_recovers_exact_line() {
        let rows: Vec<(Vec<f64>, f64, f64)> = (0..10)
            .map(|i| {
                let x = i as f64;
                (vec![1.0, x], 2.0 + 0.5 * x, 1.0)
            })
            .collect();
        let beta = weighted_least_squares(&rows, 2, "line").unwrap();
        assert_relative_eq!(beta[0], 2.0, epsilon = 1e-10);
        assert_relative_eq!(beta[1], 0.5, epsilon = 1e-10);
    }

    #[test]
    fn wls_duplicate_column_reports_rank_deficiency() {
        let rows: Vec<(Vec<f64>, f64, f64)> = (0..10)
            .map(|i| {
                let x = i as f64;
                (vec![1.0, x, x], x, 1.0)
            })
            .collect();
        let err = weighted_least_squares(&rows, 3, "dup").unwrap_err();
        assert!(matches!(err, Error::Singular(_)), "{err}");
    }

    #[test]
    fn wls_weight_rescaling_is_exact() {
        let rows: Vec<(Vec<f64>, f64, f64)> = (0..8)
            .map(|i| {
                let x = i as f64;
                (vec![1.0, x], 1.0 + 3.0 * x + if i % 2 == 0 { 0.1 } else { -0.1 }, 1.0)
            })
            .collect();
        let doubled: Vec<_> = rows.iter().map(|(x, y, _)| (x.clone(), *y, 2.0)).collect();
        let b1 = weighted_least_squares(&rows, 2, "w1").unwrap();
        let b2 = weighted_least_squares(&doubled, 2, "w2").unwrap();
        assert_relative_eq!(b1[0], b2[0], epsilon = 1e-12);
        assert_relative_eq!(b1[1], b2[1], epsilon = 1e-12);
    }

    #[test]
    fn truncated_svd_handles_collinear_design() {
        // second column is 2x the first; min-norm solution still predicts y
        let design = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let rhs = DVector::from_column_slice(&[5.0, 10.0, 15.0]);
        let (sol, cond) = truncated_svd_least_squares(&design, &rhs, 1e-10).unwrap();
        assert!(cond.is_finite());
        for i in 0..3 {
            let pred = design[(i, 0)] * sol[0] + design[(i, 1)] * sol[1];
            assert_relative_eq!(pred, rhs[i], epsilon = 1e-9);
        }
    }
}
