//! Signal-level one-shot action recognition.
//!
//! Multivariate sensor sequences are encoded into compact 3-channel images,
//! a small residual network learns a 128-d metric embedding (triplet margin
//! loss with multi-similarity pair mining plus a weighted classifier loss),
//! and unseen action classes are recognized by nearest-neighbor search
//! against a single reference sample per class.
//!
//! Pipeline: [`signal`] loads and fuses raw sequences, [`encode`] turns them
//! into normalized images, [`net`] + [`metric`] + [`train`] learn the
//! embedding, and [`oneshot`] runs the reference-bank evaluation protocol.

pub mod config;
pub mod encode;
pub mod metric;
pub mod net;
pub mod oneshot;
pub mod pipeline;
pub mod signal;
pub mod synth;
pub mod tensor;
pub mod train;

pub use encode::SignalImage;
pub use metric::{LossWeights, MinedPairs, MinerMode};
pub use net::{EmbeddingVec, ModelParams, OptState};
pub use oneshot::{EmbeddingBank, SplitProtocol};
pub use signal::{DatasetManifest, SignalMatrix};
pub use tensor::Tensor;
pub use train::{RunHistory, TrainConfig};
