//! Cross-domain knowledge transfer for person re-identification, at desk scale.
//!
//! The crate contains everything needed to train and evaluate the pipeline
//! end to end on procedurally generated data:
//!
//! * [`autodiff`]: tensors with tape-based reverse-mode differentiation,
//!   checked by [`gradcheck`].
//! * [`backbone`]: a five-stage residual CNN with stage truncation.
//! * [`gate`]: the spatial-gate LSTM feature aggregator and its masks.
//! * [`heads`]: task heads and the classification, attribute and triplet losses.
//! * [`pipeline`]: optimizer, augmentation, triplet sampling, staged training
//!   and ablation presets.
//! * [`weights`]: the named-tensor checkpoint format used for transfer.
//! * [`data`]: the synthetic person generator and on-disk dataset format.
//! * [`eval`]: CMC evaluation over random identity splits.
//! * [`config`] and [`verify`]: run configuration and the oracle suites
//!   behind the command-line tool.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gate;
pub mod gradcheck;
pub mod heads;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod verify;
pub mod weights;

pub use autodiff::{Graph, Mode, Var};
pub use error::{Error, Result};
pub use params::{Module, ParamStore};
pub use tensor::Tensor;
