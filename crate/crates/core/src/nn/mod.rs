//! Encoder building blocks: dual-statistics batch norm, conv backbone,
//! projection head and the optimizer.

mod batchnorm;
mod encoder;
mod optim;

pub use batchnorm::{BnMode, BnUsage, DualBatchNorm, RunningStats};
pub use encoder::{
    momentum_update, BoundEncoder, ConvBlock, EncoderConfig, EncoderOutput, EncoderParams,
    ProjectionHead,
};
pub use optim::{cosine_lr, Sgd, SgdConfig};
