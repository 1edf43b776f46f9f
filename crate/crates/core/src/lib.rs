//! Numerical audit of the kernel-PCA reading of self-attention.
//!
//! The pipeline for one attention head: build the centered Gram matrix of
//! the scaled key features ([`kernel`]), diagonalize it ([`spectral`]),
//! form the KPCA value matrix from the top eigenvectors ([`kpca`]), then
//! compare it with the learned values ([`similarity`]), inspect the
//! projection-loss norms ([`projection`]) and audit the eigenvector
//! condition ([`gamma`]). Heads are stored as `.atd` files ([`container`])
//! and can be synthesized or planted with a known answer ([`attention`]).
//!
//! Numerical routines are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix `f64`, which is what the container stores.

pub mod attention;
pub mod container;
pub mod error;
pub mod gamma;
pub mod kernel;
pub mod kpca;
pub mod projection;
pub mod report;
pub mod scalar;
pub mod similarity;
pub mod spectral;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Dump = container::AttentionDump<f64>;
pub type Weights = attention::AttentionWeights<f64>;
pub type GramBundle = kernel::GramBundle<f64>;
pub type Spectrum = spectral::Spectrum<f64>;
pub type KpcaResult = kpca::KpcaResult<f64>;
pub type ProjStats = projection::ProjStats<f64>;
pub type GammaStats = gamma::GammaStats<f64>;

pub type Dump32 = container::AttentionDump<f32>;
pub type GramBundle32 = kernel::GramBundle<f32>;
pub type Spectrum32 = spectral::Spectrum<f32>;
