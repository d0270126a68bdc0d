//! Small dense linear algebra for the reconstruction analyses: singular
//! values by one-sided Jacobi rotations, condition numbers, and an LU solve
//! with partial pivoting. Sized for matrices of a few dozen entries.

use crate::error::{Error, Result};
use crate::net::WeightMatrix;

const JACOBI_SWEEPS: usize = 60;

/// Masked matrices above this condition number are treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Singular values in descending order.
pub fn singular_values(m: &WeightMatrix) -> Vec<f64> {
    let (rows, cols) = (m.rows(), m.cols());
    // Work on columns of A (or A^T when wide) so there are at most `rows` columns.
    let mut cols_data: Vec<Vec<f64>> = if rows >= cols {
        (0..cols)
            .map(|c| (0..rows).map(|r| m.get(r, c)).collect())
            .collect()
    } else {
        (0..rows)
            .map(|r| (0..cols).map(|c| m.get(r, c)).collect())
            .collect()
    };
    let n_cols = cols_data.len();

    for _ in 0..JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n_cols {
            for q in (p + 1)..n_cols {
                let (alpha, beta, gamma) = {
                    let (a, b) = (&cols_data[p], &cols_data[q]);
                    let alpha: f64 = a.iter().map(|v| v * v).sum();
                    let beta: f64 = b.iter().map(|v| v * v).sum();
                    let gamma: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    (alpha, beta, gamma)
                };
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols_data.split_at_mut(q);
                let (a, b) = (&mut left[p], &mut right[0]);
                for (x, y) in a.iter_mut().zip(b.iter_mut()) {
                    let (xv, yv) = (*x, *y);
                    *x = c * xv - s * yv;
                    *y = s * xv + c * yv;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols_data
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

pub fn sigma_max(m: &WeightMatrix) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// Smallest of the `min(rows, cols)` singular values.
pub fn sigma_min(m: &WeightMatrix) -> f64 {
    singular_values(m).last().copied().unwrap_or(0.0)
}

/// `sigma_max / sigma_min`; infinite for singular matrices.
pub fn condition_number(m: &WeightMatrix) -> f64 {
    let sv = singular_values(m);
    let (max, min) = (sv[0], *sv.last().unwrap());
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn is_singular(m: &WeightMatrix) -> bool {
    condition_number(m) > SINGULAR_CONDITION
}

/// Solve `A x = b` for square `A` by Gaussian elimination with partial pivoting.
pub fn solve(a: &WeightMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::InvalidShape(format!("{}x{} is not square", n, a.cols())));
    }
    if b.len() != n {
        return Err(Error::InvalidShape(format!("rhs of length {} for order {n}", b.len())));
    }
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let mut row: Vec<f64> = (0..n).map(|c| a.get(r, c)).collect();
            row.push(b[r]);
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        if m[pivot][col] == 0.0 {
            return Err(Error::InvalidInput("singular system".into()));
        }
        m.swap(col, pivot);
        for r in (col + 1)..n {
            let f = m[r][col] / m[col][col];
            if f != 0.0 {
                for c in col..=n {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = ((r + 1)..n).map(|c| m[r][c] * x[c]).sum();
        x[r] = (m[r][n] - s) / m[r][r];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn reference(m: &WeightMatrix) -> Vec<f64> {
        let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.values());
        let mut sv: Vec<f64> = dm.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv
    }

    #[test]
    fn matches_reference_svd() {
        let mut rng = seeded(3);
        for _ in 0..200 {
            let r = rng.random_range(1..6);
            let c = rng.random_range(1..6);
            let vals = (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect();
            let m = WeightMatrix::new(r, c, vals).unwrap();
            let ours = singular_values(&m);
            let theirs = reference(&m);
            assert_eq!(ours.len(), theirs.len());
            for (a, b) in ours.iter().zip(&theirs) {
                assert!((a - b).abs() < 1e-10 * (1.0 + b), "{ours:?} vs {theirs:?}");
            }
        }
    }

    #[test]
    fn diagonal_and_singular() {
        let d = WeightMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, -4.0]]).unwrap();
        assert_eq!(singular_values(&d), vec![4.0, 2.0]);
        assert_eq!(condition_number(&d), 2.0);
        let s = WeightMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap();
        assert!(sigma_min(&s) < 1e-15);
        assert!(condition_number(&s) > 1e12);
    }

    #[test]
    fn solve_recovers_solution() {
        let a = WeightMatrix::from_rows(&[
            vec![0.0, 2.0, 1.0],
            vec![1.0, 1.0, 0.0],
            vec![3.0, 0.0, 1.0],
        ])
        .unwrap();
        let x = [1.0, -2.0, 0.5];
        let b = a.matvec(&x).unwrap();
        let got = solve(&a, &b).unwrap();
        for (g, e) in got.iter().zip(x) {
            assert!((g - e).abs() < 1e-12);
        }
        let sing = WeightMatrix::zeros(2, 2).unwrap();
        assert!(solve(&sing, &[1.0, 1.0]).is_err());
    }
}
