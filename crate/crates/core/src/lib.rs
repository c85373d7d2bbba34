//! Edge pruning for convolutional retrieval networks.
//!
//! The crate covers the whole desk-scale workflow: a small conv/ReLU/max-pool
//! feature extractor with hand-written backward passes ([`tensor`],
//! [`network`]), four per-weight salience heuristics ([`salience`]), exact
//! global-threshold pruning ([`pruner`]), SQP and R-MAC global descriptors
//! ([`pooling`]), cosine-normalized similarity and retrieval metrics
//! ([`retrieval`]), mask-preserving triplet fine-tuning ([`finetune`]), a
//! synthetic instance-retrieval dataset ([`synth`], [`dataset`]) and the
//! experiment driver ([`pipeline`]).

pub mod container;
pub mod dataset;
pub mod error;
pub mod finetune;
pub mod network;
pub mod pipeline;
pub mod pooling;
pub mod pruner;
pub mod retrieval;
pub mod salience;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use network::{init_network, load_model, save_model, ArchitectureSpec, NetworkModel};
pub use pooling::{Descriptor, PoolingConfig, PoolingKind};
pub use salience::{Heuristic, SalienceMap};
pub use tensor::Tensor;
