//! Jacobi eigendecomposition and singular value decomposition.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 100;

/// Eigen- or singular-value decomposition with values in descending order.
///
/// For [`jacobi_eigen`], `left == right` holds the eigenvectors as columns.
/// For [`svd`], `M = left · diag(values) · rightᵀ` with thin bases.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralDecomposition {
    pub values: Vec<f64>,
    pub left: Tensor,
    pub right: Tensor,
}

impl SpectralDecomposition {
    /// `left · diag(values) · rightᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        let (m, k) = (self.left.rows(), self.values.len());
        let n = self.right.rows();
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += self.left.at(i, t) * self.values[t] * self.right.at(j, t);
                }
                out.set(i, j, s);
            }
        }
        out
    }
}

/// Cyclic two-sided Jacobi for a symmetric matrix. Sweeps until the
/// off-diagonal Frobenius norm drops below `1e-12·‖M‖_F`.
pub fn jacobi_eigen(m: &Tensor) -> Result<SpectralDecomposition> {
    if m.rank() != 2 || m.rows() != m.cols() {
        return Err(Error::Shape {
            op: "jacobi_eigen",
            lhs: m.shape().to_vec(),
            rhs: vec![],
        });
    }
    let n = m.rows();
    let norm = m.frobenius_norm();
    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in 0..i {
            asym = asym.max((m.at(i, j) - m.at(j, i)).abs());
        }
    }
    if asym > 1e-10 * norm.max(1.0) {
        return Err(Error::NonSymmetric(asym));
    }
    let mut a: Vec<f64> = m.data().to_vec();
    // Symmetrize exactly so rotations act on a symmetric array.
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = avg;
            a[j * n + i] = avg;
        }
    }
    let mut v = Tensor::identity(n).into_data();
    let tol = 1e-12 * norm;

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[p * n + p], a[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut basis = Tensor::zeros(&[n, n]);
    for (col, &src) in order.iter().enumerate() {
        for k in 0..n {
            basis.set(k, col, v[k * n + src]);
        }
    }
    Ok(SpectralDecomposition {
        values,
        left: basis.clone(),
        right: basis,
    })
}

/// Completes `cols` (orthonormal columns of length `n`) by Gram–Schmidt
/// against the standard basis.
fn complete_basis(cols: &mut Vec<Vec<f64>>, n: usize, target: usize) {
    let mut e = 0;
    while cols.len() < target && e < n {
        let mut v = vec![0.0; n];
        v[e] = 1.0;
        e += 1;
        for _ in 0..2 {
            for c in cols.iter() {
                let d: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(x, c)| *x -= d * c);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            cols.push(v);
        }
    }
}

fn columns_to_tensor(cols: &[Vec<f64>], n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, cols.len()]);
    for (j, c) in cols.iter().enumerate() {
        for i in 0..n {
            t.set(i, j, c[i]);
        }
    }
    t
}

/// Thin SVD by one-sided (Hestenes) Jacobi orthogonalization of the columns
/// of `M`, working on `Mᵀ` when `M` is wide. Small singular values are
/// resolved to roughly machine precision relative to `σ₁`.
pub fn svd(m: &Tensor) -> Result<SpectralDecomposition> {
    if m.rank() != 2 {
        return Err(Error::Shape {
            op: "svd",
            lhs: m.shape().to_vec(),
            rhs: vec![],
        });
    }
    if m.rows() < m.cols() {
        let t = svd(&m.transpose())?;
        return Ok(SpectralDecomposition {
            values: t.values,
            left: t.right,
            right: t.left,
        });
    }
    let (rows, n) = (m.rows(), m.cols());
    // Column-major working copy.
    let mut u: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&u[p], &u[p]);
                let beta = dot(&u[q], &u[q]);
                let gamma = dot(&u[p], &u[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (up, uq) = (u[p].clone(), u[q].clone());
                for k in 0..rows {
                    u[p][k] = c * up[k] - s * uq[k];
                    u[q][k] = s * up[k] + c * uq[k];
                }
                let (vp, vq) = (v[p].clone(), v[q].clone());
                for k in 0..n {
                    v[p][k] = c * vp[k] - s * vq[k];
                    v[q][k] = s * vp[k] + c * vq[k];
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma: Vec<f64> = u.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    let s_max = order.first().map(|&i| sigma[i]).unwrap_or(0.0);

    let mut left_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    let mut right_cols = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for &i in &order {
        values.push(sigma[i]);
        right_cols.push(v[i].clone());
        if sigma[i] > 1e-14 * s_max.max(f64::MIN_POSITIVE) && sigma[i] > 0.0 {
            left_cols.push(u[i].iter().map(|x| x / sigma[i]).collect());
        } else {
            deficient.push(left_cols.len());
            left_cols.push(Vec::new());
        }
    }
    if !deficient.is_empty() {
        let mut kept: Vec<Vec<f64>> = left_cols.iter().filter(|c| !c.is_empty()).cloned().collect();
        let have = kept.len();
        complete_basis(&mut kept, rows, n);
        let mut fill = kept.into_iter().skip(have);
        for k in deficient {
            left_cols[k] = fill.next().expect("rows >= cols leaves room for completion");
        }
    }
    Ok(SpectralDecomposition {
        values,
        left: columns_to_tensor(&left_cols, rows),
        right: columns_to_tensor(&right_cols, n),
    })
}

/// Fraction `Σ_{i≤r} σᵢ² / Σ σᵢ²` of squared singular mass in the top `r`
/// values. A zero matrix counts as fully captured.
pub fn energy_fraction(m: &Tensor, r: usize) -> Result<f64> {
    if r == 0 {
        return Err(Error::invalid("energy fraction needs r >= 1"));
    }
    let s = svd(m)?.values;
    Ok(energy_of_values(&s.iter().map(|x| x * x).collect::<Vec<_>>(), r))
}

/// Top-`r` share of non-negative spectral masses given in descending order.
pub fn energy_of_values(masses: &[f64], r: usize) -> f64 {
    let total: f64 = masses.iter().map(|x| x.max(0.0)).sum();
    if total == 0.0 {
        return 1.0;
    }
    let top: f64 = masses.iter().take(r).map(|x| x.max(0.0)).sum();
    (top / total).clamp(0.0, 1.0)
}

/// `max |QᵀQ − I|` over the columns of `q`.
pub fn orthonormality_error(q: &Tensor) -> f64 {
    let g = q.transpose().matmul(q).expect("conformable");
    let k = g.rows();
    let mut worst: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g.at(i, j) - want).abs());
        }
    }
    worst
}

/// A uniformly random `n × k` orthonormal frame (Gaussian + Gram–Schmidt).
pub fn random_orthonormal(n: usize, k: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if k > n {
        return Err(Error::invalid(format!("cannot draw {k} orthonormal vectors in R^{n}")));
    }
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for c in &cols {
                let d: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(x, c)| *x -= d * c);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            cols.push(v);
        }
    }
    Ok(columns_to_tensor(&cols, n))
}
