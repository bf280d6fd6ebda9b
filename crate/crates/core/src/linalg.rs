//! Small dense and banded kernels shared by the preconditioners and the
//! Wasserstein workspace.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest entry-wise asymmetry relative to the largest entry.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let mut worst: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in 0..i {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst / scale
}

/// Solve `(A + ridge I) x = b` for symmetric positive definite `A`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>, ridge: f64, context: &str) -> Result<DVector<f64>> {
    let mut m = a.clone();
    if ridge != 0.0 {
        for i in 0..m.nrows() {
            m[(i, i)] += ridge;
        }
    }
    let chol = m.cholesky().ok_or_else(|| Error::NotSpd { context: context.to_string() })?;
    Ok(chol.solve(b))
}

/// Cholesky factorization that also rejects pivots below `rel_tol` times the
/// largest diagonal entry, which the plain factorization lets through.
pub fn strict_cholesky(a: &DMatrix<f64>, rel_tol: f64) -> Option<nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>> {
    let scale = a.diagonal().amax();
    let chol = a.clone().cholesky()?;
    let l = chol.l_dirty();
    let ok = (0..a.nrows()).all(|i| {
        let d = l[(i, i)];
        d.is_finite() && d * d > rel_tol * scale
    });
    ok.then_some(chol)
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn sym_eigen_bounds(a: &DMatrix<f64>) -> (f64, f64) {
    if a.nrows() == 0 {
        return (f64::NAN, f64::NAN);
    }
    let eig = a.clone().symmetric_eigen();
    let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Numerical rank with threshold `rel_tol * sigma_max`.
pub fn numerical_rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Greedy column pivoting (modified Gram-Schmidt): returns the indices of
/// `rank` columns spanning the column space, in pivot order.
pub fn pivot_columns(a: &DMatrix<f64>, rel_tol: f64) -> Result<Vec<usize>> {
    let (rows, cols) = a.shape();
    let mut work = a.clone();
    let scale = a.norm().max(f64::MIN_POSITIVE);
    let mut chosen = Vec::with_capacity(rows);
    let mut used = vec![false; cols];
    for _ in 0..rows {
        let mut best = None;
        let mut best_norm = 0.0;
        for j in 0..cols {
            if used[j] {
                continue;
            }
            let nrm = work.column(j).norm();
            if nrm > best_norm {
                best_norm = nrm;
                best = Some(j);
            }
        }
        let Some(p) = best.filter(|_| best_norm > rel_tol * scale) else {
            return Err(Error::RankDeficient { rank: chosen.len(), rows, cols });
        };
        used[p] = true;
        chosen.push(p);
        let q = work.column(p) / best_norm;
        for j in 0..cols {
            if !used[j] {
                let proj = q.dot(&work.column(j));
                let mut col = work.column_mut(j);
                col.axpy(-proj, &q, 1.0);
            }
        }
    }
    Ok(chosen)
}

/// Rows of `b` that are (numerically) linear combinations of earlier rows in
/// the inner product induced by `metric_inv` (an SPD matrix).
pub fn dependent_rows(b: &DMatrix<f64>, metric_inv: &DMatrix<f64>, rel_tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut out = Vec::new();
    let ip = |x: &DVector<f64>, y: &DVector<f64>| x.dot(&(metric_inv * y));
    for i in 0..b.nrows() {
        let row: DVector<f64> = b.row(i).transpose();
        let orig = ip(&row, &row).max(0.0).sqrt();
        let mut res = row.clone();
        for q in &basis {
            let c = ip(q, &res);
            res.axpy(-c, q, 1.0);
        }
        let nrm = ip(&res, &res).max(0.0).sqrt();
        if nrm <= rel_tol * orig.max(f64::MIN_POSITIVE) {
            out.push(i);
        } else {
            basis.push(res / nrm);
        }
    }
    out
}

/// Cholesky factor of a symmetric positive definite band matrix with
/// half-bandwidth `bw`, stored row-wise: `band[i * (bw + 1) + d] = L[i, i - d]`.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandedCholesky {
    /// Factor from the lower band of `A` in the same layout.
    pub fn factor(n: usize, bw: usize, mut band: Vec<f64>) -> Result<Self> {
        assert_eq!(band.len(), n * (bw + 1));
        let w = bw + 1;
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(bw));
                let mut sum = band[i * w + (i - j)];
                for k in k0..j {
                    sum -= band[i * w + (i - k)] * band[j * w + (j - k)];
                }
                if i == j {
                    if !(sum > 0.0) || !sum.is_finite() {
                        return Err(Error::NotSpd { context: format!("banded Cholesky pivot {i} = {sum:e}") });
                    }
                    band[i * w] = sum.sqrt();
                } else {
                    band[i * w + (i - j)] = sum / band[j * w];
                }
            }
        }
        Ok(Self { n, bw, band })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        for i in 0..n {
            let mut s = x[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.band[i * w + (i - k)] * x[k];
            }
            x[i] = s / self.band[i * w];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n.min(i + bw + 1) {
                s -= self.band[k * w + (k - i)] * x[k];
            }
            x[i] = s / self.band[i * w];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn banded_matches_dense() {
        let n = 12;
        let bw = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(bw)..i {
                let v: f64 = rng.random_range(-1.0..1.0);
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
            a[(i, i)] = 8.0;
        }
        let mut band = vec![0.0; n * (bw + 1)];
        for i in 0..n {
            for d in 0..=bw.min(i) {
                band[i * (bw + 1) + d] = a[(i, i - d)];
            }
        }
        let f = BandedCholesky::factor(n, bw, band).unwrap();
        let b = DVector::from_fn(n, |i, _| (i as f64).sin());
        let mut x = b.as_slice().to_vec();
        f.solve_in_place(&mut x);
        let res = &a * DVector::from_vec(x) - &b;
        assert!(res.norm() < 1e-12);
    }

    #[test]
    fn pivoting_flags_rank_deficiency() {
        let b = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert!(matches!(pivot_columns(&b, 1e-10), Err(Error::RankDeficient { rank: 1, .. })));
        let g = DMatrix::identity(3, 3);
        assert_eq!(dependent_rows(&b, &g, 1e-10), vec![1]);
    }
}
