use nalgebra::{DMatrix, DVector};

/// Relative residual norm below which a column counts as a linear
/// combination of earlier ones.
const COLLINEAR_TOL: f64 = 1e-8;

/// Finds the first column that is (numerically) a linear combination of
/// the columns before it, and returns its name together with the earlier
/// columns that participate in the combination.
pub fn collinear_columns(x: &DMatrix<f64>, names: &[String]) -> Option<Vec<String>> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut accepted: Vec<usize> = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        let mut r = col.clone();
        for q in &basis {
            let proj = q.dot(&r);
            r -= q * proj;
        }
        if norm == 0.0 || r.norm() <= COLLINEAR_TOL * norm {
            let mut out = Vec::new();
            if norm > 0.0 && !accepted.is_empty() {
                let sub = x.select_columns(&accepted);
                let coef = sub
                    .clone()
                    .svd(true, true)
                    .solve(&col, 1e-12)
                    .unwrap_or_else(|_| DVector::zeros(accepted.len()));
                for (k, &a) in accepted.iter().enumerate() {
                    let scale = sub.column(k).norm();
                    if (coef[k] * scale).abs() > 1e-6 * norm {
                        out.push(names[a].clone());
                    }
                }
            }
            out.push(names[j].clone());
            return Some(out);
        }
        basis.push(&r / r.norm());
        accepted.push(j);
    }
    None
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.inverse())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: &[&str]) -> Vec<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn duplicate_column_reported_with_original() {
        let x = DMatrix::from_row_slice(4, 3, &[
            1.0, 0.5, 0.5, //
            1.0, 1.5, 1.5, //
            1.0, -2.0, -2.0, //
            1.0, 0.0, 0.0,
        ]);
        let found = collinear_columns(&x, &names(&["const", "x", "x_dup"])).unwrap();
        assert_eq!(found, names(&["x", "x_dup"]));
    }

    #[test]
    fn full_rank_passes() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        assert!(collinear_columns(&x, &names(&["c", "x"])).is_none());
    }

    #[test]
    fn constant_moderator_collides_with_intercept() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 3.0, 1.0, 3.0, 1.0, 3.0]);
        let found = collinear_columns(&x, &names(&["const", "k"])).unwrap();
        assert_eq!(found, names(&["const", "k"]));
    }
}
