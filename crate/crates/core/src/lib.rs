#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod channels;
pub mod cnn_post;
pub mod error;
pub mod fft;
pub mod gaze;
pub mod io;
pub mod observers;
pub mod phantom;
pub mod rng;
pub mod search;
pub mod stats;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{crop, BinaryMask, CropSpec, Dims, Sample, Volume, Voxel};
