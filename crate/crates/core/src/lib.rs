//! Multi-color-space factorized bilinear coding (MC-FBC) for face
//! presentation attack detection.
//!
//! The pipeline converts a pre-cropped RGB face into two color spaces, runs
//! one small convolutional backbone per space, fuses the two feature maps
//! with factorized bilinear coding (a closed-form sparse code per spatial
//! location followed by a max over locations) and classifies the result with
//! a softmax head trained under focal loss. Evaluation follows the
//! ISO/IEC 30107-3 error rates.
//!
//! Every differentiable stage carries a hand-written backward pass; the
//! [`train::grad_check`] audit and the [`oracle`] suite check them against
//! finite differences and brute-force solvers.

pub mod backbone;
pub mod colorspace;
pub mod data;
pub mod error;
pub mod fbc;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use tensor::Real;
