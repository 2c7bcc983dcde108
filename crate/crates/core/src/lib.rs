//! Spacing-conditioned segmentation: a hypernetwork maps voxel spacing to
//! the complete weight vector of a U-Net.

pub mod checkpoint;
pub mod cka;
pub mod error;
pub mod evaluation;
pub mod hypernet;
pub mod memprobe;
pub mod real;
pub mod segnet;
pub mod synthdata;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use real::Real;
