//! Voxel-level brain-age prediction: volumes, synthetic phantoms, a multitask
//! 3-D U-Net, its composite loss and training loop, PAD maps, regional
//! aggregation, saliency baselines and paired statistics.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod evalmaps;
pub mod interpret;
pub mod loss;
pub mod net;
pub mod phantom;
pub mod regional;
pub mod stats;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
