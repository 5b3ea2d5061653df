//! Jacobi-family decompositions: one-sided SVD and symmetric eigensolver.
//!
//! Both normalize signs so that the largest-magnitude entry of each left
//! singular vector (or eigenvector) is non-negative; ties in magnitude go to
//! the lowest index.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone)]
pub struct Svd {
    /// `m×k` left singular vectors as columns, `k = min(m, n)`.
    pub u: Tensor,
    /// Singular values, descending.
    pub s: Vec<f64>,
    /// `n×k` right singular vectors as columns.
    pub v: Tensor,
}

/// Index of the largest-magnitude entry, first one on ties.
fn pivot_index(col: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, x) in col.enumerate() {
        if best.is_none_or(|(_, b)| x.abs() > b.abs()) {
            best = Some((i, x));
        }
    }
    best
}

/// Thin SVD `a = u·diag(s)·vᵀ` by Hestenes one-sided Jacobi rotations.
pub fn svd(a: &Tensor) -> Result<Svd> {
    if !a.is_matrix() {
        return Err(Error::Shape("svd needs a matrix".into()));
    }
    a.ensure_finite("svd")?;
    let (m, n) = (a.rows(), a.cols());
    if m < n {
        let t = svd_tall(&a.transpose()?)?;
        // aᵀ = U S Vᵀ  =>  a = V S Uᵀ; re-normalize signs on the new left side
        return Ok(normalize_svd_signs(Svd { u: t.v, s: t.s, v: t.u }));
    }
    svd_tall(a).map(normalize_svd_signs)
}

fn svd_tall(a: &Tensor) -> Result<Svd> {
    let (m, n) = (a.rows(), a.cols());
    // column-major working copies
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let eps = f64::EPSILON;
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = w[p].iter().map(|x| x * x).sum();
                let beta: f64 = w[q].iter().map(|x| x * x).sum();
                let gamma: f64 = w[p].iter().zip(&w[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut w, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric("one-sided Jacobi SVD did not converge".into()));
    }
    let mut order: Vec<(f64, usize)> =
        w.iter().enumerate().map(|(j, col)| (col.iter().map(|x| x * x).sum::<f64>().sqrt(), j)).collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    let mut u = Tensor::zeros(&[m, n]);
    let mut vt = Tensor::zeros(&[n, n]);
    let mut s = Vec::with_capacity(n);
    for (k, &(sigma, j)) in order.iter().enumerate() {
        s.push(sigma);
        for i in 0..m {
            u.set(i, k, if sigma > 0.0 { w[j][i] / sigma } else { 0.0 });
        }
        for i in 0..n {
            vt.set(i, k, v[j][i]);
        }
    }
    Ok(Svd { u, s, v: vt })
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

fn normalize_svd_signs(mut d: Svd) -> Svd {
    let (m, k) = (d.u.rows(), d.u.cols());
    let n = d.v.rows();
    for j in 0..k {
        let pivot = pivot_index((0..m).map(|i| d.u.get(i, j)));
        let flip = match pivot {
            Some((_, x)) if x != 0.0 => x < 0.0,
            // zero left vector: fall back to the right vector
            _ => pivot_index((0..n).map(|i| d.v.get(i, j))).is_some_and(|(_, x)| x < 0.0),
        };
        if flip {
            for i in 0..m {
                d.u.set(i, j, -d.u.get(i, j));
            }
            for i in 0..n {
                d.v.set(i, j, -d.v.get(i, j));
            }
        }
    }
    d
}

#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Eigenvalues, descending.
    pub values: Vec<f64>,
    /// `n×n` eigenvectors as columns, matching `values`.
    pub vectors: Tensor,
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
pub fn sym_eigen(a: &Tensor) -> Result<SymEigen> {
    if !a.is_matrix() || a.rows() != a.cols() {
        return Err(Error::Shape(format!("sym_eigen needs a square matrix, got {:?}", a.shape())));
    }
    a.ensure_finite("sym_eigen")?;
    let n = a.rows();
    let mut m: Vec<f64> = a.data().to_vec();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = avg;
            m[j * n + i] = avg;
        }
    }
    let mut v = Tensor::eye(n).into_data();
    let total: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total || off == 0.0 {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = if theta == 0.0 { 1.0 } else { theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt()) };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (kp, kq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * kp - s * kq;
                    m[k * n + q] = s * kp + c * kq;
                }
                for k in 0..n {
                    let (pk, qk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * pk - s * qk;
                    m[q * n + k] = s * pk + c * qk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let (kp, kq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * kp - s * kq;
                    v[k * n + q] = s * kp + c * kq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numeric("Jacobi eigensolver did not converge".into()));
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|j| {
            let mut col: Vec<f64> = (0..n).map(|i| v[i * n + j]).collect();
            if pivot_index(col.iter().copied()).is_some_and(|(_, x)| x < 0.0) {
                col.iter_mut().for_each(|x| *x = -*x);
            }
            (m[j * n + j], col)
        })
        .collect();
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| {
            b.1.iter()
                .zip(&a.1)
                .map(|(x, y)| x.partial_cmp(y).unwrap_or(Ordering::Equal))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        })
    });
    let mut vectors = Tensor::zeros(&[n, n]);
    for (j, (_, col)) in pairs.iter().enumerate() {
        for (i, x) in col.iter().enumerate() {
            vectors.set(i, j, *x);
        }
    }
    Ok(SymEigen { values: pairs.into_iter().map(|p| p.0).collect(), vectors })
}

/// `u·diag(s)·vᵀ` from the first `r` triplets.
pub fn low_rank_product(d: &Svd, r: usize) -> Tensor {
    let (m, n) = (d.u.rows(), d.v.rows());
    let mut out = Tensor::zeros(&[m, n]);
    for k in 0..r {
        for i in 0..m {
            let us = d.u.get(i, k) * d.s[k];
            if us == 0.0 {
                continue;
            }
            for j in 0..n {
                let cur = out.get(i, j);
                out.set(i, j, cur + us * d.v.get(j, k));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded};

    fn orthonormal_cols(t: &Tensor, k: usize) -> f64 {
        let mut worst: f64 = 0.0;
        for a in 0..k {
            for b in 0..k {
                let dot: f64 = (0..t.rows()).map(|i| t.get(i, a) * t.get(i, b)).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    #[test]
    fn svd_reconstructs_random_matrices() {
        let mut rng = seeded(9);
        for &(m, n) in &[(5, 5), (7, 3), (3, 7), (1, 4), (6, 1), (10, 10)] {
            let a = normal_tensor(&mut rng, &[m, n], 1.0);
            let d = svd(&a).unwrap();
            let k = m.min(n);
            let rec = low_rank_product(&d, k);
            let err = rec.zip_map(&a, |x, y| x - y).unwrap().frobenius();
            assert!(err <= 1e-12 * a.frobenius().max(1.0), "({m},{n}) err {err}");
            assert!(orthonormal_cols(&d.u, k) < 1e-12);
            assert!(orthonormal_cols(&d.v, k) < 1e-12);
            assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn svd_sign_convention() {
        let mut rng = seeded(4);
        let a = normal_tensor(&mut rng, &[6, 4], 1.0);
        let d = svd(&a).unwrap();
        for j in 0..4 {
            let (_, x) = pivot_index((0..6).map(|i| d.u.get(i, j))).unwrap();
            assert!(x >= 0.0);
        }
        let neg = a.map(|x| -x);
        let dn = svd(&neg).unwrap();
        // same left vectors, negated right vectors
        assert_eq!(d.u, dn.u);
        for (x, y) in d.v.data().iter().zip(dn.v.data()) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn svd_of_zero_matrix() {
        let d = svd(&Tensor::zeros(&[3, 2])).unwrap();
        assert_eq!(d.s, vec![0.0, 0.0]);
    }

    #[test]
    fn eigen_of_known_matrix() {
        let a = Tensor::matrix(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let e = sym_eigen(&a).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14);
        assert!((e.values[1] - 1.0).abs() < 1e-14);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.vectors.get(0, 0) - h).abs() < 1e-14 && (e.vectors.get(1, 0) - h).abs() < 1e-14);
    }

    #[test]
    fn eigen_residuals_random_symmetric() {
        let mut rng = seeded(17);
        let b = normal_tensor(&mut rng, &[12, 12], 1.0);
        let a = b.transpose().unwrap().matmul(&b).unwrap();
        let e = sym_eigen(&a).unwrap();
        assert!(orthonormal_cols(&e.vectors, 12) < 1e-12);
        for j in 0..12 {
            let col = Tensor::matrix(12, 1, (0..12).map(|i| e.vectors.get(i, j)).collect()).unwrap();
            let av = a.matmul(&col).unwrap();
            let res: f64 = (0..12).map(|i| (av.data()[i] - e.values[j] * col.data()[i]).powi(2)).sum::<f64>().sqrt();
            assert!(res <= 1e-10 * e.values[0]);
        }
    }

    #[test]
    fn eigen_ties_are_ordered_deterministically() {
        let e = sym_eigen(&Tensor::eye(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
        // lexicographically descending columns: e1, e2, e3
        assert_eq!(e.vectors, Tensor::eye(3));
    }
}
