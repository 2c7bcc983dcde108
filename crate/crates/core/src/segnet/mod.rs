//! U-Net as a pure function of an image and an externally supplied flat
//! weight vector.

mod config;
mod layout;
mod net;
pub mod ops;
mod tensor;

pub use config::UNetConfig;
pub use layout::{
    dispatch, flatten, param_count, param_layout, ParamEntry, ParamLayout, ParamRole, ParamTensor,
};
pub use net::{LayerInfo, LayerKind, Stage, Tape, UNet};
pub use tensor::Tensor;

use crate::real::Real;
use crate::volume::{dims3, Volume};

/// Lifts a (padded) volume into a one-channel network input.
pub fn volume_tensor<T: Real>(vol: &Volume) -> Tensor<T> {
    Tensor::from_vec(
        1,
        dims3(vol.shape()),
        vol.data().iter().map(|&v| T::from_f64(v as f64)).collect(),
    )
}

/// Class with the highest logit at every voxel (first wins ties).
pub fn argmax_labels<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    let v = logits.voxels();
    (0..v)
        .map(|i| {
            let mut best = 0;
            for c in 1..logits.channels {
                if logits.data[c * v + i] > logits.data[best * v + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
