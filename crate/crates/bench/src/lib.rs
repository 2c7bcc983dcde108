//! Fixtures shared by the criterion benches.

use hyperspace::hypernet::{HyperNet, HyperNetConfig};
use hyperspace::segnet::{Tensor, UNet, UNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(channels: usize, dims: [usize; 3], seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    let n = channels * dims.iter().product::<usize>();
    Tensor::from_vec(channels, dims, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

/// The 3-D network used by the desk experiment.
pub fn desk_unet() -> UNet {
    let cfg = UNetConfig {
        base_channels: 4,
        ..UNetConfig::new(3, 4)
    };
    UNet::new(cfg).expect("valid config")
}

pub fn desk_hypernet(unet: &UNet) -> (HyperNet, Vec<f32>) {
    let h = HyperNet::for_layout(HyperNetConfig::new(3, unet.param_count()), unet.layout()).expect("valid hypernet");
    let beta = h.init(unet.layout(), &mut rng(1)).expect("init");
    (h, beta)
}

/// U-Net weights from the hypernetwork at 1 mm, i.e. a plausible η.
pub fn desk_weights(unet: &UNet) -> Vec<f32> {
    let (h, beta) = desk_hypernet(unet);
    h.forward(&beta, &[1.0, 1.0, 1.0]).expect("forward")
}
