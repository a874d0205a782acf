//! Normal/abnormal chest-screening pipeline.
//!
//! A desk-scale, fully deterministic implementation of a binary screening
//! classifier: a from-scratch tensor engine with reverse-mode autodiff, a
//! dilated residual CNN, CLAHE preprocessing with affine augmentation,
//! patient-grouped five-fold evaluation, ROC/PR metrics, and DIRECT-based
//! selection of the operating threshold that maximizes precision for the
//! normal class, then recall.

pub mod autodiff;
pub mod gradcheck;
pub mod rng;
pub mod tensor;

pub use autodiff::{Graph, Mode, NodeId, Padding};
pub use rng::RngState;
pub use tensor::{Dtype, Element, Tensor, TensorError};
