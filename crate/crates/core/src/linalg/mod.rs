//! Dense matrices and SVD kernels.

pub mod matrix;
pub mod randomized;
pub mod svd;

pub use matrix::{frobenius_norm, matmul, DenseMatrix};
pub use randomized::{orthonormal_basis, randomized_svd, RandomizedConfig};
pub use svd::{clamp_rank, svd_thin, svd_truncated, Svd, SvdMethod};
