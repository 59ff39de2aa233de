//! Nonnegative least squares, Lawson–Hanson active set on the normal
//! equations. Problems here have at most a dozen columns, so the Gram
//! matrix is formed explicitly.

use ndarray::{ArrayView1, ArrayView2};

use crate::rff::C64;

/// `argmin_{x ≥ 0} ‖A x - b‖₂`.
pub fn nnls(a: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Vec<f64> {
    let k = a.ncols();
    let gram: Vec<Vec<f64>> =
        (0..k).map(|i| (0..k).map(|j| a.column(i).dot(&a.column(j))).collect()).collect();
    let rhs: Vec<f64> = (0..k).map(|i| a.column(i).dot(&b)).collect();
    nnls_gram(&gram, &rhs)
}

/// Weights `β ≥ 0` minimizing `‖z - Σ β_k a_k‖₂` over complex vectors,
/// i.e. the stacked real/imaginary least squares problem.
pub fn nnls_weights(atoms: &[Vec<C64>], z: &[C64]) -> Vec<f64> {
    let k = atoms.len();
    let re_inner = |a: &[C64], b: &[C64]| a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im).sum::<f64>();
    let mut gram = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i..k {
            let v = re_inner(&atoms[i], &atoms[j]);
            gram[i][j] = v;
            gram[j][i] = v;
        }
    }
    let rhs: Vec<f64> = atoms.iter().map(|a| re_inner(a, z)).collect();
    nnls_gram(&gram, &rhs)
}

/// NNLS given `G = AᵀA` and `h = Aᵀb`: minimizes `½ xᵀGx - hᵀx` over `x ≥ 0`.
pub fn nnls_gram(gram: &[Vec<f64>], rhs: &[f64]) -> Vec<f64> {
    let k = rhs.len();
    let mut x = vec![0.0; k];
    if k == 0 {
        return x;
    }
    let scale = 1.0 + rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-13 * scale;
    let mut passive = vec![false; k];
    let mut banned = vec![false; k];

    for _ in 0..(3 * k + 10) {
        let w: Vec<f64> = (0..k).map(|i| rhs[i] - dot_row(&gram[i], &x)).collect();
        let entering = (0..k)
            .filter(|&i| !passive[i] && !banned[i] && w[i] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = entering else { break };
        passive[j] = true;

        loop {
            let idx: Vec<usize> = (0..k).filter(|&i| passive[i]).collect();
            let Some(zp) = solve_subset(gram, rhs, &idx) else {
                // Dependent column: drop it and try another.
                passive[j] = false;
                banned[j] = true;
                break;
            };
            if zp.iter().all(|v| *v > 0.0) {
                for (&i, v) in idx.iter().zip(&zp) {
                    x[i] = *v;
                }
                banned.iter_mut().for_each(|b| *b = false);
                break;
            }
            let mut alpha = f64::INFINITY;
            for (&i, v) in idx.iter().zip(&zp) {
                if *v <= 0.0 {
                    alpha = alpha.min(x[i] / (x[i] - v));
                }
            }
            for (&i, v) in idx.iter().zip(&zp) {
                x[i] += alpha * (v - x[i]);
                if x[i] <= 1e-15 * scale {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
    }
    x
}

fn dot_row(row: &[f64], x: &[f64]) -> f64 {
    row.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// Solves `G[idx, idx] z = h[idx]` by Gaussian elimination with partial
/// pivoting; `None` when numerically singular.
fn solve_subset(gram: &[Vec<f64>], rhs: &[f64], idx: &[usize]) -> Option<Vec<f64>> {
    let n = idx.len();
    let mut a: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| {
            let mut row: Vec<f64> = idx.iter().map(|&j| gram[i][j]).collect();
            row.push(rhs[i]);
            row
        })
        .collect();
    let diag_max = idx.iter().map(|&i| gram[i][i].abs()).fold(0.0f64, f64::max);
    for col in 0..n {
        let piv = (col..n).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * diag_max.max(f64::MIN_POSITIVE) {
            return None;
        }
        a.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..=n {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let mut z = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * z[c]).sum();
        z[r] = (a[r][n] - s) / a[r][r];
    }
    Some(z)
}
