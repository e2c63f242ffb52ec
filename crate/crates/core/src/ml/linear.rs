use serde::{Deserialize, Serialize};

use super::Regressor;

/// Ridge strength applied when the normal equations are singular, relative
/// to the mean diagonal of the scaled Gram matrix.
pub const RIDGE_FALLBACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// True when the ridge fallback was needed.
    pub regularized: bool,
}

impl Regressor for LinearModel {
    fn input_dim(&self) -> usize {
        self.weights.len()
    }

    fn predict_row(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }
}

/// Solves `a · x = b` in place by Gaussian elimination with partial
/// pivoting. Returns `None` when a pivot falls below `tol`.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>, tol: f64) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() <= tol {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Ordinary least squares with intercept via centred normal equations.
/// Singular systems (collinear or constant columns, fewer rows than
/// unknowns) fall back to a tiny ridge penalty.
pub fn fit_linear(x: &[Vec<f64>], y: &[f64]) -> LinearModel {
    let n = y.len();
    let d = x.first().map_or(0, Vec::len);
    if n == 0 {
        return LinearModel {
            weights: vec![0.0; d],
            intercept: 0.0,
            regularized: false,
        };
    }
    let nf = n as f64;
    let y_mean = y.iter().sum::<f64>() / nf;
    let mut x_mean = vec![0.0; d];
    for row in x {
        for (m, v) in x_mean.iter_mut().zip(row) {
            *m += v / nf;
        }
    }
    let mut gram = vec![vec![0.0; d]; d];
    let mut rhs = vec![0.0; d];
    for (row, &target) in x.iter().zip(y) {
        let c: Vec<f64> = row.iter().zip(&x_mean).map(|(v, m)| v - m).collect();
        let yc = target - y_mean;
        for i in 0..d {
            rhs[i] += c[i] * yc / nf;
            for j in i..d {
                gram[i][j] += c[i] * c[j] / nf;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            gram[i][j] = gram[j][i];
        }
    }
    let scale = if d == 0 {
        1.0
    } else {
        ((0..d).map(|i| gram[i][i]).sum::<f64>() / d as f64).max(f64::MIN_POSITIVE)
    };
    let (weights, regularized) = match solve(gram.clone(), rhs.clone(), 1e-12 * scale) {
        Some(w) => (w, false),
        None => {
            let lambda = RIDGE_FALLBACK * scale;
            for (i, row) in gram.iter_mut().enumerate() {
                row[i] += lambda;
            }
            (solve(gram, rhs, 0.0).unwrap_or_else(|| vec![0.0; d]), true)
        }
    };
    let intercept = y_mean - weights.iter().zip(&x_mean).map(|(w, m)| w * m).sum::<f64>();
    LinearModel {
        weights,
        intercept,
        regularized,
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn exact_line() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = x.iter().map(|r| 2.0 * r[0] + 1.0).collect();
        let m = fit_linear(&x, &y);
        assert!((m.weights[0] - 2.0).abs() < 1e-6);
        assert!((m.intercept - 1.0).abs() < 1e-6);
        assert!(!m.regularized);
    }

    #[test]
    fn no_features_gives_mean() {
        let x = vec![Vec::new(); 4];
        let m = fit_linear(&x, &[3.0, 3.0, 3.0, 3.0]);
        assert_eq!(m.intercept, 3.0);
        assert!(m.weights.is_empty());
    }

    #[test]
    fn collinear_columns_fall_back_to_ridge() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let y: Vec<f64> = (0..20).map(|i| 5.0 * i as f64 + 1.0).collect();
        let m = fit_linear(&x, &y);
        assert!(m.regularized);
        for (r, t) in x.iter().zip(&y) {
            assert!((m.predict_row(r) - t).abs() < 1e-5);
        }
        // Minimum-norm split of the slope across the two columns.
        assert!((m.weights[0] - 1.0).abs() < 1e-4 && (m.weights[1] - 2.0).abs() < 1e-4);
    }

    #[test]
    fn residuals_orthogonal_to_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<Vec<f64>> = (0..80).map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0] - 2.0 * r[2] + rng.random_range(-1.0..1.0)).collect();
        let m = fit_linear(&x, &y);
        let resid: Vec<f64> = x.iter().zip(&y).map(|(r, t)| t - m.predict_row(r)).collect();
        for j in 0..4 {
            let dot: f64 = x.iter().zip(&resid).map(|(r, e)| r[j] * e).sum();
            assert!(dot.abs() < 1e-6 * 80.0, "column {j}: {dot}");
        }
        assert!(resid.iter().sum::<f64>().abs() < 1e-6 * 80.0);
    }
}
