//! Pair-wise correlation network: a shallow two-channel CNN that scores
//! whether a residual and a fingerprint come from the same sensor.
//!
//! The fingerprint and residual crops are stacked as two channels and
//! passed through three valid-padding convolutions with ReLU. The last
//! feature volume has 64 maps; pair-wise correlation pooling reduces it to
//! 32 numbers, one per adjacent map pair `(2n, 2n+1)`:
//!
//! ```text
//! pooled[n] = 1/S^2 * sum_{i,j} x[i][j][2n] * x[i][j][2n+1]
//! ```
//!
//! which is the diagonal-adjacent slice of a full bilinear (Gram) pooling.
//! A linear head maps the 32 values to a logit; `c_s = sigmoid(logit)`.
//! Because the pooling averages over space, one model scores any input
//! side at or above [`ArchDescriptor::min_input_side`].

pub(crate) mod io;
mod layers;
mod model;
mod scalar;
mod tensor;

pub use io::{load_model, load_model_expecting, read_model, save_model, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use layers::{
    pairwise_corr_pool_backward, pairwise_corr_pool_forward, relu_backward, relu_forward, Conv2d, ConvCache,
    ConvGrads,
};
pub use model::{sigmoid, ArchDescriptor, ConvSpec, ForwardCache, MatchScore, PcnGradients, PcnModel};
pub use scalar::Scalar;
pub use tensor::{PairTensor, Tensor3};
