//! PRNU-based camera source identification.
//!
//! The crate covers the whole matching pipeline:
//!
//! - [`imaging`]: luminance images, central crops, std normalization, JPEG
//!   re-compression.
//! - [`residual`]: wavelet-domain Wiener denoising and noise residuals.
//! - [`fingerprint`]: maximum-likelihood PRNU estimation and the binary
//!   fingerprint container.
//! - [`pce`]: the classical NCC / peak-to-correlation-energy matcher.
//! - [`pcn`]: the pair-wise correlation network, a learned matcher fed with
//!   a (fingerprint, residual) two-channel crop.
//! - [`training`]: batch construction, loss, Adam and early stopping.
//! - [`synth`]: a deterministic sensor simulator producing devices,
//!   flat-field and natural images.
//! - [`eval`]: closed-set accuracy, open-set ROC/AUC, the JPEG domain grid.
//! - [`bench`]: latency and batching harness.

pub mod bench;
pub mod error;
pub mod eval;
pub mod fingerprint;
pub mod imaging;
pub mod parallel;
pub mod pce;
pub mod pcn;
pub mod plane;
pub mod residual;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use plane::Plane;

// The guide under book/ is compiled here so its snippets run with the
// doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/residuals.md")]
    mod residuals {}
    #[doc = include_str!("../../../book/src/fingerprints.md")]
    mod fingerprints {}
    #[doc = include_str!("../../../book/src/pce.md")]
    mod pce {}
    #[doc = include_str!("../../../book/src/pcn.md")]
    mod pcn {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
