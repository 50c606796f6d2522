//! Robust relative-transfer-function (RTF) estimation for MVDR beamforming.
//!
//! Noisy GEVD-based RTF estimates are refined by a message-passing network
//! that looks at their nearest neighbours among clean RTFs measured in the
//! same room. The crate also contains everything needed to produce and score
//! those estimates: an image-source room simulator, STFT machinery, Hermitian
//! eigensolvers, the MVDR beamformer, intelligibility and distortion metrics,
//! a small reverse-mode differentiation engine, and the experiment harness
//! behind the `rtfgraph` binary.

pub mod beamformer;
pub mod container;
pub mod error;
pub mod gcn;
pub mod graph;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod objective;
pub mod room;
pub mod rtf;
pub mod signal;
pub mod util;

pub use error::{Error, Result};
