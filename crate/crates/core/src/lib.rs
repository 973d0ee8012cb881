//! Action detection in untrimmed video, end to end on the CPU.
//!
//! The crate implements a small but complete pipeline:
//!
//! * [`tensor`], [`graph`], [`gradcheck`] — a dense f64 tensor type, a
//!   reverse-mode autodiff tape with the handful of ops the model needs,
//!   and a finite-difference checker for the backward passes.
//! * [`convlstm`] — a ConvLSTM cell (ReLU state activations, 2D dropout on
//!   inputs and hidden states) and a bidirectional layer with 1x1 fusion.
//! * [`anchors`], [`boxes`], [`detector`] — SSD-style anchor machinery and
//!   the recurrent multi-scale detector that maps a clip of frames to
//!   per-anchor box offsets and raw classification scores.
//! * [`transition`] — decoupled scoring: each anchor carries action scores
//!   and transition scores; category probabilities come from their sum,
//!   the active/transitional state from their difference.
//! * [`loss`] — matching, hard-negative and transitional mining, and the
//!   combined classification / localization / transition-state loss.
//! * [`tubes`] — greedy linking of per-frame detections into tubes,
//!   temporal trimming by multi-threshold watershed, micro-tube score
//!   refinement.
//! * [`eval`] — frame-level and video-level average precision over spatial
//!   or spatio-temporal IoU.
//! * [`synth`] — deterministic synthetic untrimmed-video generator used for
//!   training and for the end-to-end tests.
//! * [`formats`] — JSONL records, key=value config files, checkpoints.
//! * [`train`], [`pipeline`] — SGD training loop and the infer/link/eval
//!   drivers shared by the CLI and the acceptance tests.
//!
//! Everything is deterministic given explicit seeds: same inputs, same
//! bytes out.

pub mod anchors;
pub mod boxes;
pub mod convlstm;
pub mod detector;
pub mod eval;
pub mod formats;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod transition;
pub mod tubes;

pub use boxes::BoxXYXY;
pub use detector::{DetectorConfig, DetectorModel};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    Record { path: String, line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Splitmix64-style mix of a base seed with up to two stream indices.
///
/// Used everywhere a reproducible sub-stream is needed (per-episode RNGs,
/// per-step dropout masks) so that seeds never collide across sites.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
