//! Thin SVD via one-sided (Hestenes) Jacobi rotations, plus the truncation and
//! sign-canonicalization helpers shared with the randomized path.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use super::randomized::{randomized_svd, RandomizedConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Maximum number of full Jacobi sweeps before giving up.
pub const MAX_SWEEPS: usize = 100;

/// Singular value decomposition `m ≈ u · diag(sigma) · vt`.
///
/// `u` is `d×p` with orthonormal columns, `vt` is `p×k` with orthonormal rows and
/// `sigma` is non-negative and sorted in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd<T: Scalar> {
    pub u: DenseMatrix<T>,
    pub sigma: Vec<T>,
    pub vt: DenseMatrix<T>,
}

/// Which kernel computes the (truncated) decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SvdMethod {
    Exact,
    Randomized(RandomizedConfig),
}

impl SvdMethod {
    pub fn randomized(seed: u64) -> Self {
        SvdMethod::Randomized(RandomizedConfig {
            seed,
            ..RandomizedConfig::default()
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SvdMethod::Exact => "exact",
            SvdMethod::Randomized(_) => "randomized",
        }
    }
}

impl<T: Scalar> Svd<T> {
    /// Number of retained singular triplets.
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `u · diag(sigma) · vt`.
    pub fn reconstruct(&self) -> DenseMatrix<T> {
        let mut us = self.u.clone();
        let p = self.sigma.len();
        for row in us.data_mut().chunks_mut(p) {
            for (v, &s) in row.iter_mut().zip(&self.sigma) {
                *v = *v * s;
            }
        }
        us.matmul(&self.vt).expect("svd factors are conformant")
    }

    /// Keep the leading `r` triplets (`r` is clamped to the current rank).
    pub fn truncate(&self, r: usize) -> Svd<T> {
        let r = r.clamp(1, self.rank());
        Svd {
            u: self.u.leading_cols(r),
            sigma: self.sigma[..r].to_vec(),
            vt: self.vt.leading_rows(r),
        }
    }

    /// Sum of `sigma_i²` for `i >= r` (0-based), i.e. the optimal squared
    /// Frobenius error of a rank-`r` approximation.
    pub fn tail_energy(&self, r: usize) -> f64 {
        self.sigma.iter().skip(r).map(|s| s.as_f64() * s.as_f64()).sum()
    }

    /// Flip signs so the largest-magnitude entry of each column of `u` is
    /// non-negative, flipping the matching row of `vt` in tandem.
    pub fn canonicalize_signs(&mut self) {
        let (rows, p) = self.u.shape();
        let k = self.vt.cols();
        for j in 0..p {
            let mut best = 0;
            let mut best_abs = T::zero();
            for i in 0..rows {
                let a = self.u[(i, j)].abs();
                if a > best_abs {
                    best_abs = a;
                    best = i;
                }
            }
            if self.u[(best, j)] < T::zero() {
                let u = self.u.data_mut();
                for i in 0..rows {
                    u[i * p + j] = -u[i * p + j];
                }
                for v in &mut self.vt.data_mut()[j * k..(j + 1) * k] {
                    *v = -*v;
                }
            }
        }
    }
}

/// Clamp a requested rank to `[1, min(rows, cols)]`, returning a warning when
/// the request was out of range.
pub fn clamp_rank(r: usize, rows: usize, cols: usize) -> (usize, Option<String>) {
    let max = rows.min(cols);
    if r > max {
        (
            max,
            Some(format!("rank {r} exceeds min({rows}, {cols}); clamped to {max}")),
        )
    } else {
        (r.max(1), None)
    }
}

/// Thin SVD with `p = min(rows, cols)`, descending singular values and the
/// canonical sign convention.
pub fn svd_thin<T: Scalar>(m: &DenseMatrix<T>) -> Result<Svd<T>> {
    let mut svd = if m.rows() >= m.cols() {
        jacobi_tall(m)?
    } else {
        // m^T = V Σ U^T
        let t = jacobi_tall(&m.transpose())?;
        Svd {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        }
    };
    svd.canonicalize_signs();
    Ok(svd)
}

/// Rank-`r` truncated SVD. `r` must be at least 1 and is clamped to
/// `min(rows, cols)`.
pub fn svd_truncated<T: Scalar>(m: &DenseMatrix<T>, r: usize, method: SvdMethod) -> Result<Svd<T>> {
    if r == 0 {
        return Err(Error::InvalidRank);
    }
    let (r, warning) = clamp_rank(r, m.rows(), m.cols());
    if let Some(w) = warning {
        log::warn!("{w}");
    }
    match method {
        SvdMethod::Exact => Ok(svd_thin(m)?.truncate(r)),
        SvdMethod::Randomized(cfg) => randomized_svd(m, r, &cfg),
    }
}

/// One-sided Jacobi on a matrix with `rows >= cols`. Signs are not canonicalized.
fn jacobi_tall<T: Scalar>(m: &DenseMatrix<T>) -> Result<Svd<T>> {
    let (rows, n) = m.shape();
    debug_assert!(rows >= n);
    let mut cols: Vec<Vec<T>> = (0..n).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|j| {
            let mut e = vec![T::zero(); n];
            e[j] = T::one();
            e
        })
        .collect();
    let tol = T::epsilon() * T::of(rows as f64);
    let mut norms: Vec<T> = cols.iter().map(|c| dot(c, c)).collect();

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta) = (norms[p], norms[q]);
                if alpha == T::zero() || beta == T::zero() {
                    continue;
                }
                let (left, right) = cols.split_at_mut(q);
                let (cp, cq) = (&mut left[p], &mut right[0]);
                let gamma = dot(cp, cq);
                if gamma.abs() <= tol * (alpha.sqrt() * beta.sqrt()) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::of(2.0) * gamma);
                let sign = if zeta < T::zero() { -T::one() } else { T::one() };
                let t = sign / (zeta.abs() + T::one().hypot(zeta));
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(cp, cq, c, s);
                let (vl, vr) = v.split_at_mut(q);
                rotate(&mut vl[p], &mut vr[0], c, s);
                norms[p] = alpha - t * gamma;
                norms[q] = beta + t * gamma;
            }
        }
        // refresh the running norms to stop drift
        for (nrm, c) in norms.iter_mut().zip(&cols) {
            *nrm = dot(c, c);
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::ConvergenceFailure {
            iterations: MAX_SWEEPS,
            layer: None,
        });
    }

    let sigma_raw: Vec<T> = norms.iter().map(|x| x.sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        sigma_raw[b]
            .partial_cmp(&sigma_raw[a])
            .unwrap_or(Ordering::Equal)
    });

    let tiny = T::min_positive_value() / T::epsilon();
    let mut u_cols: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = sigma_raw[j];
        if s > tiny {
            u_cols.push(cols[j].iter().map(|&x| x / s).collect());
        } else {
            u_cols.push(vec![T::zero(); rows]);
            missing.push(slot);
        }
    }
    complete_orthonormal(&mut u_cols, &missing, rows);

    let sigma: Vec<T> = order.iter().map(|&j| sigma_raw[j]).collect();
    let mut u = DenseMatrix::zeros(rows, n);
    {
        let ud = u.data_mut();
        for (j, col) in u_cols.iter().enumerate() {
            for i in 0..rows {
                ud[i * n + j] = col[i];
            }
        }
    }
    let mut vt = DenseMatrix::zeros(n, n);
    {
        let vd = vt.data_mut();
        for (slot, &j) in order.iter().enumerate() {
            vd[slot * n..(slot + 1) * n].copy_from_slice(&v[j]);
        }
    }
    Ok(Svd { u, sigma, vt })
}

/// Fill the columns listed in `missing` with unit vectors orthogonal to every
/// other column, drawing candidates from the standard basis.
pub(crate) fn complete_orthonormal<T: Scalar>(cols: &mut [Vec<T>], missing: &[usize], len: usize) {
    if missing.is_empty() {
        return;
    }
    let mut filled: Vec<bool> = (0..cols.len()).map(|j| !missing.contains(&j)).collect();
    let mut next_basis = 0;
    for &slot in missing {
        let mut best: Option<(T, Vec<T>)> = None;
        while next_basis < len {
            let mut cand = vec![T::zero(); len];
            cand[next_basis] = T::one();
            next_basis += 1;
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if filled[j] {
                        let proj = dot(&cand, c);
                        for (x, &y) in cand.iter_mut().zip(c) {
                            *x = *x - proj * y;
                        }
                    }
                }
            }
            let nrm = dot(&cand, &cand).sqrt();
            // a residual this large keeps the candidate well conditioned
            if nrm > T::of(0.5) {
                best = Some((nrm, cand));
                break;
            }
            if best.as_ref().is_none_or(|(b, _)| nrm > *b) {
                best = Some((nrm, cand));
            }
        }
        let (nrm, cand) = best.expect("orthogonal complement exists");
        cols[slot] = cand.into_iter().map(|x| x / nrm).collect();
        filled[slot] = true;
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn rotate<T: Scalar>(x: &mut [T], y: &mut [T], c: T, s: T) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type M = DenseMatrix<f64>;

    fn random(rows: usize, cols: usize, seed: u64) -> M {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        M::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn orthonormal_cols_err(m: &M) -> f64 {
        let g = m.transpose().matmul(m).unwrap();
        g.max_abs_diff(&M::identity(g.rows())).unwrap()
    }

    /// Symmetric eigenvalues by classical two-sided Jacobi; independent of the
    /// one-sided kernel under test.
    #[allow(clippy::needless_range_loop)]
    fn sym_eigenvalues(a: &M) -> Vec<f64> {
        let n = a.rows();
        let mut s: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| s[i][j] * s[i][j])
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if s[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (s[q][q] - s[p][p]) / (2.0 * s[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let sn = t * c;
                    for k in 0..n {
                        let (skp, skq) = (s[k][p], s[k][q]);
                        s[k][p] = c * skp - sn * skq;
                        s[k][q] = sn * skp + c * skq;
                    }
                    for k in 0..n {
                        let (spk, sqk) = (s[p][k], s[q][k]);
                        s[p][k] = c * spk - sn * sqk;
                        s[q][k] = sn * spk + c * sqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| s[i][i]).collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        ev
    }

    #[test]
    fn diagonal_is_its_own_svd() {
        let m = M::from_diag(&[3.0, 2.0, 1.0]).unwrap();
        let svd = svd_thin(&m).unwrap();
        assert_eq!(svd.sigma, vec![3.0, 2.0, 1.0]);
        assert_eq!(svd.u, M::identity(3));
        assert_eq!(svd.vt, M::identity(3));
    }

    #[test]
    fn unsorted_diagonal_is_sorted() {
        let m = M::from_diag(&[1.0, -3.0, 2.0]).unwrap();
        let svd = svd_thin(&m).unwrap();
        assert_eq!(svd.sigma, vec![3.0, 2.0, 1.0]);
        assert!(svd.reconstruct().max_abs_diff(&m).unwrap() < 1e-15);
    }

    #[test]
    fn zero_matrix() {
        let m = M::zeros(3, 2);
        let svd = svd_thin(&m).unwrap();
        assert_eq!(svd.sigma, vec![0.0, 0.0]);
        assert!(svd.reconstruct().is_zero());
        assert!(orthonormal_cols_err(&svd.u) < 1e-15);
        assert!(orthonormal_cols_err(&svd.vt.transpose()) < 1e-15);
    }

    #[test]
    fn random_4x3_matches_gram_eigenvalues() {
        let m = random(4, 3, 7);
        let svd = svd_thin(&m).unwrap();
        let err = svd.reconstruct().sub(&m).unwrap().frobenius_norm();
        assert!(err < 1e-10, "reconstruction error {err}");
        assert!(orthonormal_cols_err(&svd.u) < 1e-10);
        assert!(orthonormal_cols_err(&svd.vt.transpose()) < 1e-10);
        let ev = sym_eigenvalues(&m.transpose().matmul(&m).unwrap());
        for (s, e) in svd.sigma.iter().zip(&ev) {
            assert!((s * s - e).abs() < 1e-10, "{s}² vs {e}");
        }
    }

    #[test]
    fn wide_and_rank_deficient_inputs() {
        let a = random(2, 5, 3);
        let b = random(2, 5, 4);
        // rank <= 2 inside a 5x5 matrix
        let m = a.transpose().matmul(&b).unwrap();
        let svd = svd_thin(&m).unwrap();
        assert!(svd.sigma[2] < 1e-14);
        assert!(orthonormal_cols_err(&svd.u) < 1e-12);
        assert!(svd.reconstruct().max_abs_diff(&m).unwrap() < 1e-12);

        let wide = random(3, 7, 5);
        let svd = svd_thin(&wide).unwrap();
        assert_eq!(svd.u.shape(), (3, 3));
        assert_eq!(svd.vt.shape(), (3, 7));
        assert!(svd.reconstruct().max_abs_diff(&wide).unwrap() < 1e-12);
    }

    #[test]
    fn canonical_signs() {
        let m = random(6, 4, 11);
        let svd = svd_thin(&m).unwrap();
        for j in 0..4 {
            let col = svd.u.column(j);
            let max = col.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(max >= 0.0);
        }
        let neg = svd_thin(&m.neg()).unwrap();
        for (a, b) in svd.sigma.iter().zip(&neg.sigma) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn truncation() {
        let m = M::from_diag(&[3.0, 2.0, 1.0]).unwrap();
        let t = svd_truncated(&m, 2, SvdMethod::Exact).unwrap();
        assert_eq!(t.sigma, vec![3.0, 2.0]);
        assert_eq!(t.u.shape(), (3, 2));
        assert_eq!(t.vt.shape(), (2, 3));

        let r = random(5, 4, 2);
        assert_eq!(svd_truncated(&r, 4, SvdMethod::Exact).unwrap(), svd_thin(&r).unwrap());
        assert_eq!(svd_truncated(&r, 40, SvdMethod::Exact).unwrap().rank(), 4);
        assert!(matches!(svd_truncated(&r, 0, SvdMethod::Exact), Err(Error::InvalidRank)));
    }

    #[test]
    fn clamp_rank_reports() {
        assert_eq!(clamp_rank(3, 4, 5), (3, None));
        let (r, w) = clamp_rank(9, 4, 5);
        assert_eq!(r, 4);
        assert!(w.is_some());
    }

    #[test]
    fn f32_kernel() {
        let m = DenseMatrix::<f32>::from_fn(5, 3, |i, j| ((i * 3 + j) as f32).sin());
        let svd = svd_thin(&m).unwrap();
        assert!(svd.reconstruct().max_abs_diff(&m).unwrap() < 1e-5);
    }
}
