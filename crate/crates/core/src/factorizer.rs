//! LoRA factors from weight deltas: `B = U_r Σ_r^{1/2}`, `A = Σ_r^{1/2} V_rᵀ`.

use crate::delta::WeightDelta;
use crate::energy::select_rank_partial;
use crate::error::{Error, Result};
use crate::linalg::{clamp_rank, randomized_svd, svd_thin, DenseMatrix, Svd, SvdMethod};
use crate::scalar::Scalar;

/// Rank-`r` factors of one layer's update, applied as `scale · B·A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors<T: Scalar = f64> {
    pub layer_name: String,
    /// `r × k`
    pub a: DenseMatrix<T>,
    /// `d × r`
    pub b: DenseMatrix<T>,
    pub rank: usize,
    pub retained_sigma: Vec<T>,
    /// Σσᵢ² over the whole spectrum of the source delta.
    pub total_sq_energy: f64,
    /// Effective LoRA scale `alpha / r`; 1 for extracted adapters.
    pub scale: f64,
    pub warnings: Vec<String>,
}

impl<T: Scalar> LoraFactors<T> {
    /// Build factors from a (truncated) SVD with the balanced square-root split.
    pub fn from_svd(layer_name: impl Into<String>, svd: &Svd<T>, total_sq_energy: f64) -> Self {
        let r = svd.rank();
        let roots: Vec<T> = svd.sigma.iter().map(|s| s.sqrt()).collect();
        let (d, k) = (svd.u.rows(), svd.vt.cols());
        let b = DenseMatrix::from_fn(d, r, |i, j| svd.u[(i, j)] * roots[j]);
        let a = DenseMatrix::from_fn(r, k, |i, j| roots[i] * svd.vt[(i, j)]);
        Self {
            layer_name: layer_name.into(),
            a,
            b,
            rank: r,
            retained_sigma: svd.sigma.clone(),
            total_sq_energy,
            scale: 1.0,
            warnings: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.b.rows()
    }

    pub fn cols(&self) -> usize {
        self.a.cols()
    }

    /// The dense update `scale · B·A`.
    pub fn update(&self) -> DenseMatrix<T> {
        let ba = self.b.matmul(&self.a).expect("factor shapes are conformant");
        if self.scale == 1.0 {
            ba
        } else {
            ba.scale(T::of(self.scale))
        }
    }

    /// `E_r` of the retained spectrum against the delta's total energy.
    pub fn preserved_energy(&self) -> f64 {
        if self.total_sq_energy == 0.0 {
            return 1.0;
        }
        let kept: f64 = self.retained_sigma.iter().map(|s| s.as_f64() * s.as_f64()).sum();
        (kept / self.total_sq_energy).min(1.0)
    }
}

/// Factorize a delta matrix at rank `r` (clamped to `min(d, k)`).
pub fn factorize_matrix<T: Scalar>(
    layer_name: &str,
    delta: &DenseMatrix<T>,
    r: usize,
    method: SvdMethod,
) -> Result<LoraFactors<T>> {
    if r == 0 {
        return Err(Error::InvalidRank);
    }
    let (r_eff, warning) = clamp_rank(r, delta.rows(), delta.cols());
    let (svd, total) = match method {
        SvdMethod::Exact => {
            let full = svd_thin(delta).map_err(|e| e.with_layer(layer_name))?;
            let total = full.tail_energy(0);
            (full.truncate(r_eff), total)
        }
        SvdMethod::Randomized(cfg) => {
            let svd = randomized_svd(delta, r_eff, &cfg).map_err(|e| e.with_layer(layer_name))?;
            (svd, delta.frobenius_norm_sq())
        }
    };
    let mut f = LoraFactors::from_svd(layer_name, &svd, total);
    if let Some(w) = warning {
        log::warn!("{layer_name}: {w}");
        f.warnings.push(w);
    }
    Ok(f)
}

/// Factorize a layer delta at rank `r`.
pub fn factorize(delta: &WeightDelta, r: usize, method: SvdMethod) -> Result<LoraFactors> {
    factorize_matrix(&delta.layer_name, &delta.delta, r, method)
}

/// Factorize at the smallest rank whose preserved energy reaches `tau`.
///
/// The randomized path sketches a growing number of leading triplets (doubling
/// from 8) against the exact total `‖ΔW‖_F²` until the threshold is met.
pub fn factorize_to_threshold<T: Scalar>(
    layer_name: &str,
    delta: &DenseMatrix<T>,
    tau: f64,
    method: SvdMethod,
) -> Result<LoraFactors<T>> {
    // validates tau even for trivial spectra
    select_rank_partial::<T>(&[], 1.0, tau)?;
    let p = delta.rows().min(delta.cols());
    let ctx = |e: Error| e.with_layer(layer_name);
    match method {
        SvdMethod::Exact => {
            let full = svd_thin(delta).map_err(ctx)?;
            let total = full.tail_energy(0);
            let r = select_rank_partial(&full.sigma, total, tau)?.unwrap_or(p);
            Ok(LoraFactors::from_svd(layer_name, &full.truncate(r), total))
        }
        SvdMethod::Randomized(cfg) => {
            let total = delta.frobenius_norm_sq();
            let mut width = 8.min(p);
            loop {
                let svd = randomized_svd(delta, width, &cfg).map_err(ctx)?;
                let found = select_rank_partial(&svd.sigma, total, tau)?;
                match found {
                    Some(r) => return Ok(LoraFactors::from_svd(layer_name, &svd.truncate(r), total)),
                    None if width == p => return Ok(LoraFactors::from_svd(layer_name, &svd, total)),
                    None => width = (width * 2).min(p),
                }
            }
        }
    }
}

/// Absolute and relative Frobenius error of the factors against the delta.
/// The relative error is defined as 0 for a zero delta.
pub fn reconstruction_error(delta: &WeightDelta, f: &LoraFactors) -> Result<(f64, f64)> {
    let residual = delta
        .delta
        .sub(&f.update())
        .map_err(|e| e.with_layer(&delta.layer_name))?;
    let abs = residual.frobenius_norm_sq().sqrt();
    let norm = delta.delta.frobenius_norm_sq().sqrt();
    let rel = if norm == 0.0 { 0.0 } else { abs / norm };
    Ok((abs, rel))
}

/// `w_base + scale · B·A`.
pub fn merge<T: Scalar>(w_base: &DenseMatrix<T>, f: &LoraFactors<T>) -> Result<DenseMatrix<T>> {
    w_base.add(&f.update()).map_err(|e| e.with_layer(&f.layer_name))
}
