//! One-sided Jacobi singular value decomposition.
//!
//! Hestenes' method: columns of a working copy of the matrix are rotated in
//! pairs until every pair is numerically orthogonal. The column norms are then
//! the singular values, the normalized columns the left singular vectors, and
//! the accumulated rotations the right singular vectors. Wide matrices are
//! handled through their transpose.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 100;

/// Thin SVD `a = u · diag(s) · vt` with `k = min(m, n)`.
#[derive(Debug, Clone)]
pub struct SvdResult<T> {
    /// `m × k`, orthonormal columns.
    pub u: Tensor<T>,
    /// `k` singular values, non-increasing.
    pub s: Tensor<T>,
    /// `k × n`, orthonormal rows.
    pub vt: Tensor<T>,
}

impl<T: Scalar> SvdResult<T> {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Result<Tensor<T>> {
        let (m, k) = self.u.dims2()?;
        let mut us = self.u.clone();
        for i in 0..m {
            for j in 0..k {
                us.set(i, j, self.u.at(i, j) * self.s.data()[j]);
            }
        }
        us.matmul(&self.vt)
    }

    /// First `i` left singular vectors as an `m × i` matrix.
    pub fn top_left(&self, i: usize) -> Result<Tensor<T>> {
        let k = self.rank();
        if i == 0 || i > k {
            return Err(Error::Contract(format!(
                "requested {i} left singular vectors, {k} available"
            )));
        }
        self.u.slice_cols(0, i)
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn rotate<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

type Columns<T> = Vec<Vec<T>>;

/// Orthogonalizes the columns of a tall (`m ≥ n`) matrix given as columns.
/// Returns the rotated columns and the accumulated right rotation (columns).
fn hestenes<T: Scalar>(mut cols: Columns<T>) -> Result<(Columns<T>, Columns<T>)> {
    let n = cols.len();
    let tol = T::lit(1e-12).max(T::epsilon() * T::lit(16.0));
    let mut right: Vec<Vec<T>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { T::one() } else { T::zero() }).collect())
        .collect();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == T::zero() || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut right, p, q, c, s);
            }
        }
        if !rotated {
            return Ok((cols, right));
        }
    }
    Err(Error::Numeric(format!(
        "Jacobi SVD did not converge in {MAX_SWEEPS} sweeps"
    )))
}

/// Replaces `target` with a unit vector orthogonal to every vector in `basis`.
fn complete_basis<T: Scalar>(basis: &[Vec<T>], m: usize) -> Vec<T> {
    let mut best: Option<(T, Vec<T>)> = None;
    for e in 0..m {
        let mut v = vec![T::zero(); m];
        v[e] = T::one();
        // two Gram-Schmidt passes
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&v, b);
                for (x, &y) in v.iter_mut().zip(b) {
                    *x = *x - proj * y;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if best.as_ref().is_none_or(|(n, _)| norm > *n) {
            best = Some((norm, v));
        }
    }
    let (norm, mut v) = best.expect("m >= 1");
    for x in &mut v {
        *x = *x / norm;
    }
    v
}

/// Left vectors, singular values, right vectors (all as columns) of a tall matrix.
fn tall_svd<T: Scalar>(a: &Tensor<T>) -> Result<(Columns<T>, Vec<T>, Columns<T>)> {
    let (m, n) = a.dims2()?;
    let cols: Vec<Vec<T>> = (0..n).map(|j| (0..m).map(|i| a.at(i, j)).collect()).collect();
    let (cols, right) = hestenes(cols)?;

    let norms: Vec<T> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));

    let s_max = norms[order[0]];
    let null_tol = s_max * T::epsilon() * T::lit(m.max(n) as f64);
    let mut left: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    let mut right_sorted = Vec::with_capacity(n);
    for &j in &order {
        let sigma = norms[j];
        let u = if sigma > null_tol && sigma > T::zero() {
            cols[j].iter().map(|&x| x / sigma).collect()
        } else {
            complete_basis(&left, m)
        };
        left.push(u);
        values.push(sigma);
        right_sorted.push(right[j].clone());
    }
    Ok((left, values, right_sorted))
}

/// Thin singular value decomposition of a 2-D tensor.
///
/// Singular values are sorted in descending order. Each left singular vector
/// is signed so that its first non-negligible entry is positive, with the
/// matching right vector flipped alongside.
pub fn svd<T: Scalar>(a: &Tensor<T>) -> Result<SvdResult<T>> {
    let (m, n) = a
        .dims2()
        .map_err(|_| shape_err!("svd needs a 2-D tensor, got shape {:?}", a.shape()))?;
    if !a.all_finite() {
        return Err(Error::Numeric("svd input has non-finite entries".into()));
    }
    let (mut left, values, mut right) = if m >= n {
        tall_svd(a)?
    } else {
        let (l, s, r) = tall_svd(&a.transpose()?)?;
        (r, s, l)
    };
    let k = values.len();

    for (u, v) in left.iter_mut().zip(right.iter_mut()) {
        let scale = u.iter().fold(T::zero(), |acc, x| acc.max(x.abs()));
        let cutoff = scale * T::epsilon().sqrt();
        if let Some(&first) = u.iter().find(|x| x.abs() > cutoff) {
            if first < T::zero() {
                u.iter_mut().for_each(|x| *x = -*x);
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }

    let mut u = Tensor::zeros(&[m, k])?;
    for (j, col) in left.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            u.set(i, j, x);
        }
    }
    let vt = Tensor::new(&[k, n], right.concat())?;
    Ok(SvdResult {
        u,
        s: Tensor::new(&[k], values)?,
        vt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let diff = a.sub(b).unwrap().frobenius_norm_sq().sqrt();
        diff / b.frobenius_norm_sq().sqrt().max(f64::MIN_POSITIVE)
    }

    fn gram_error(u: &Tensor<f64>) -> f64 {
        let g = u.transpose().unwrap().matmul(u).unwrap();
        let k = g.shape()[0];
        g.sub(&Tensor::eye(k).unwrap()).unwrap().max_abs()
    }

    #[test]
    fn diagonal_matrix() {
        let mut a = Tensor::<f64>::zeros(&[3, 3]).unwrap();
        a.set(0, 0, 1.0);
        a.set(1, 1, 3.0);
        a.set(2, 2, 2.0);
        let r = svd(&a).unwrap();
        assert_eq!(r.s.data(), &[3.0, 2.0, 1.0]);
        assert!(rel_err(&r.reconstruct().unwrap(), &a) < 1e-15);
    }

    #[test]
    fn rank_one_outer_product() {
        let mut rng = Rng::new(4);
        let mut u = Tensor::<f64>::randn(&[6, 1], 1.0, &mut rng).unwrap();
        let mut v = Tensor::<f64>::randn(&[4, 1], 1.0, &mut rng).unwrap();
        let nu = u.frobenius_norm_sq().sqrt();
        let nv = v.frobenius_norm_sq().sqrt();
        u = u.scale(1.0 / nu);
        v = v.scale(1.0 / nv);
        let a = u.matmul(&v.transpose().unwrap()).unwrap();
        let r = svd(&a).unwrap();
        assert!((r.s.data()[0] - 1.0).abs() < 1e-12);
        assert!(r.s.data()[1..].iter().all(|&x| x.abs() < 1e-12));
        assert!(gram_error(&r.u) < 1e-10);
    }

    #[test]
    fn random_reconstruction_tall_and_wide() {
        let mut rng = Rng::new(8);
        for shape in [[8, 5], [5, 8], [1, 4], [4, 1], [7, 7]] {
            let a = Tensor::<f64>::randn(&shape, 1.0, &mut rng).unwrap();
            let r = svd(&a).unwrap();
            let k = shape[0].min(shape[1]);
            assert_eq!(r.u.shape(), &[shape[0], k]);
            assert_eq!(r.vt.shape(), &[k, shape[1]]);
            assert!(rel_err(&r.reconstruct().unwrap(), &a) < 1e-9);
            assert!(gram_error(&r.u) < 1e-10);
            assert!(gram_error(&r.vt.transpose().unwrap()) < 1e-10);
            assert!(r.s.data().windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn sign_convention() {
        let a = Tensor::<f64>::randn(&[6, 3], 1.0, &mut Rng::new(12)).unwrap();
        let r = svd(&a).unwrap();
        for j in 0..3 {
            let first = (0..6).map(|i| r.u.at(i, j)).find(|x| x.abs() > 1e-8).unwrap();
            assert!(first > 0.0);
        }
        let neg = svd(&a.scale(-1.0)).unwrap();
        // flipping the matrix keeps u and flips vt
        assert!(rel_err(&neg.u, &r.u) < 1e-10);
        assert!(rel_err(&neg.vt, &r.vt.scale(-1.0)) < 1e-10);
    }

    #[test]
    fn rejects_non_matrix() {
        let a = Tensor::<f64>::zeros(&[2, 2, 2]).unwrap();
        assert!(matches!(svd(&a), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_matrix_still_orthonormal() {
        let r = svd(&Tensor::<f64>::zeros(&[4, 3]).unwrap()).unwrap();
        assert!(r.s.data().iter().all(|&x| x == 0.0));
        assert!(gram_error(&r.u) < 1e-12);
    }

    #[test]
    fn top_left_bounds() {
        let a = Tensor::<f64>::randn(&[5, 3], 1.0, &mut Rng::new(1)).unwrap();
        let r = svd(&a).unwrap();
        assert_eq!(r.top_left(2).unwrap().shape(), &[5, 2]);
        assert!(r.top_left(0).is_err());
        assert!(r.top_left(4).is_err());
    }
}
