//! Hierarchy-preserving learning to hash.
//!
//! This crate trains a feed-forward encoder so that sign-quantized
//! embeddings respect a semantic class hierarchy: at every level of the
//! label tree, codes from the same class end up closer in Hamming space
//! than codes from different classes. The pieces:
//!
//! - [`hierarchy`]: the K-level label tree, path validation, and the
//!   per-level variance schedule.
//! - [`encoder`]: a pluggable MLP with exact analytic gradients and a
//!   binary checkpoint format.
//! - [`loss`]: the multi-level Gaussian class-center loss with a box
//!   penalty, and its gradient.
//! - [`centers`]: per-class centers — fine level from data means, upper
//!   levels by recursive unweighted averaging.
//! - [`trainer`]: alternating center estimation and mini-batch SGD with
//!   momentum, in two stages (the second escalates the box penalty to
//!   shrink quantization error).
//! - [`codec`] / [`index`]: packed ±1 codes, popcount Hamming distance,
//!   and exact linear-scan k-NN.
//! - [`metrics`]: mAP, hierarchical precision (HP@N / mAHP@K) and nDCG.
//! - [`dataio`]: feature/label ingestion and a seeded synthetic
//!   hierarchical dataset generator.
//! - [`cli`]: the `hihash` command-line pipeline
//!   (gen-data / train / encode / eval / search).

pub mod centers;
pub mod cli;
pub mod codec;
pub mod dataio;
pub mod encoder;
pub mod hierarchy;
pub mod index;
pub mod loss;
pub mod metrics;
pub mod trainer;

mod binio;

pub use centers::CenterSet;
pub use codec::BinaryCode;
pub use encoder::{Activation, EncoderState, InitScheme};
pub use hierarchy::{LabelPath, LabelTaxonomy};
pub use index::CodeDatabase;
pub use loss::{DistanceForm, LossConfig, LossReport};
