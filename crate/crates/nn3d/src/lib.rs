//! A small CPU engine for 3-D convolutional networks.
//!
//! Layers own their forward caches and expose explicit `backward` passes;
//! there is no tape. Every reduction runs in a fixed order so results are
//! bit-reproducible across runs.

pub mod conv;
pub mod layers;
pub mod norm;
pub mod optim;
pub mod param;
pub mod resample;
pub mod tensor;

pub use conv::Conv3d;
pub use layers::{GlobalAvgPool, Linear, MaxPool2, Relu};
pub use norm::BatchNorm3d;
pub use optim::AdamW;
pub use param::{Param, Parameterized};
pub use resample::Resize;
pub use tensor::{concat_channels, split_channels, Tensor};

/// Whether batch statistics (training) or running statistics (evaluation) are used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
