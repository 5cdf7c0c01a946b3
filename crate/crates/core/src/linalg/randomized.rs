//! Randomized range-finder SVD for large layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use super::svd::{svd_thin, Svd};
use crate::error::Result;
use crate::scalar::Scalar;

pub const DEFAULT_OVERSAMPLING: usize = 10;
pub const DEFAULT_POWER_ITERATIONS: usize = 2;
pub const DEFAULT_SEED: u64 = 0x5EED_10AA;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomizedConfig {
    pub oversampling: usize,
    pub power_iterations: usize,
    pub seed: u64,
}

impl Default for RandomizedConfig {
    fn default() -> Self {
        Self {
            oversampling: DEFAULT_OVERSAMPLING,
            power_iterations: DEFAULT_POWER_ITERATIONS,
            seed: DEFAULT_SEED,
        }
    }
}

/// Top-`r` SVD from a Gaussian sketch of width `r + oversampling`, refined by
/// subspace power iterations. Falls back to the exact kernel when the sketch
/// would cover the whole spectrum. `r` must already be clamped.
pub fn randomized_svd<T: Scalar>(m: &DenseMatrix<T>, r: usize, cfg: &RandomizedConfig) -> Result<Svd<T>> {
    let (rows, cols) = m.shape();
    let width = r + cfg.oversampling;
    if width >= rows.min(cols) {
        return Ok(svd_thin(m)?.truncate(r));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let omega = DenseMatrix::from_fn(cols, width, |_, _| {
        let g: f64 = StandardNormal.sample(&mut rng);
        T::of(g)
    });
    let mt = m.transpose();
    let mut q = orthonormal_basis(&m.matmul(&omega)?);
    for _ in 0..cfg.power_iterations {
        let z = orthonormal_basis(&mt.matmul(&q)?);
        q = orthonormal_basis(&m.matmul(&z)?);
    }
    let projected = q.transpose().matmul(m)?;
    let small = svd_thin(&projected)?;
    let mut svd = Svd {
        u: q.matmul(&small.u)?,
        sigma: small.sigma,
        vt: small.vt,
    }
    .truncate(r);
    svd.canonicalize_signs();
    Ok(svd)
}

/// Thin `Q` factor of a Householder QR of `y` (`rows >= cols`). The columns are
/// orthonormal even when `y` is rank deficient.
pub fn orthonormal_basis<T: Scalar>(y: &DenseMatrix<T>) -> DenseMatrix<T> {
    let (rows, n) = y.shape();
    assert!(rows >= n, "orthonormal_basis needs a tall matrix");
    let mut cols: Vec<Vec<T>> = (0..n).map(|j| y.column(j)).collect();
    let mut reflectors: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
    let two = T::of(2.0);

    for k in 0..n {
        let x = &cols[k][k..];
        let norm_x = x.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
        if norm_x == T::zero() {
            reflectors.push(None);
            continue;
        }
        let alpha = if x[0] > T::zero() { -norm_x } else { norm_x };
        let mut v = x.to_vec();
        v[0] = v[0] - alpha;
        let vn = v.iter().fold(T::zero(), |a, &t| a + t * t).sqrt();
        if vn == T::zero() {
            reflectors.push(None);
            continue;
        }
        for t in v.iter_mut() {
            *t = *t / vn;
        }
        for col in cols.iter_mut().skip(k) {
            apply_reflector(&v, &mut col[k..], two);
        }
        reflectors.push(Some(v));
    }

    let mut q_cols: Vec<Vec<T>> = (0..n)
        .map(|j| {
            let mut e = vec![T::zero(); rows];
            e[j] = T::one();
            e
        })
        .collect();
    for (k, refl) in reflectors.iter().enumerate().rev() {
        if let Some(v) = refl {
            for col in q_cols.iter_mut() {
                apply_reflector(v, &mut col[k..], two);
            }
        }
    }
    DenseMatrix::from_fn(rows, n, |i, j| q_cols[j][i])
}

#[inline]
fn apply_reflector<T: Scalar>(v: &[T], x: &mut [T], two: T) {
    let proj = v.iter().zip(x.iter()).fold(T::zero(), |a, (&p, &q)| a + p * q);
    if proj == T::zero() {
        return;
    }
    for (xi, &vi) in x.iter_mut().zip(v) {
        *xi = *xi - two * proj * vi;
    }
}
