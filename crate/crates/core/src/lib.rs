//! Post-hoc extraction of LoRA adapters from a base/fine-tuned checkpoint pair.
//!
//! The pipeline pairs tensors by name, forms each layer's weight delta, takes a
//! truncated SVD and splits the singular values evenly between the two LoRA
//! factors, so that `B·A` is the best rank-`r` approximation of the delta. The
//! dense kernels are generic over [`Scalar`]; the extraction pipeline runs in
//! `f64`.

pub mod adapter;
pub mod checkpoint;
pub mod cli;
pub mod delta;
pub mod energy;
pub mod error;
pub mod factorizer;
pub mod linalg;
pub mod scalar;

pub use error::{Error, Result};
pub use linalg::{DenseMatrix, Svd, SvdMethod};
pub use scalar::Scalar;

/// Double-precision matrix; every extraction step computes in this type.
pub type Matrix = DenseMatrix<f64>;
pub type Matrix32 = DenseMatrix<f32>;
pub type SvdResult = Svd<f64>;
pub type SvdResult32 = Svd<f32>;
pub type LoraFactors = factorizer::LoraFactors<f64>;
