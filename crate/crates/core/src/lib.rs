//! Self-supervised pre-training with hard examples.
//!
//! Contrastive (queue + momentum encoder) and prototype (k-means pseudo-label)
//! pretext tasks, each augmented with adversarial and cut-mixed views, plus the
//! probes used to compare the resulting representations.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dcluster;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod metrics;
pub mod moco;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod scheme;
pub mod tensor;
pub mod train;

pub use error::{HexaError, Result};
pub use tensor::{Tape, Tensor, Var};
pub use checkpoint::Checkpoint;
pub use config::{Pretext, RunConfig};
pub use data::Dataset;
pub use eval::{EvalReport, LabeledSet, ProbeConfig};
pub use experiment::{GridKind, PretrainOptions, Session, Trainer};
pub use scheme::Scheme;
pub use train::EpochMetrics;
