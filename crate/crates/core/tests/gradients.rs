//! End-to-end gradient of the loss with respect to the hypernetwork
//! parameters: hypernetwork, dispatch, U-Net and loss.

use hyperspace::hypernet::{HyperNet, HyperNetConfig};
use hyperspace::segnet::{param_layout, Tensor, UNet, UNetConfig};
use hyperspace::training::{hyper_loss_and_grad, LossWeights};
use hyperspace::volume::{PadRecord, Spacing};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn setup(seed: u64) -> (UNet, HyperNet, Vec<f64>, Vec<Tensor<f64>>, Vec<Vec<u8>>, ChaCha8Rng) {
    let cfg = UNetConfig {
        dim: 2,
        levels: 1,
        blocks_per_level: 1,
        base_channels: 2,
        kernel_size: 3,
        in_channels: 1,
        num_classes: 3,
    };
    let unet = UNet::new(cfg.clone()).unwrap();
    let mut hc = HyperNetConfig::new(2, param_layout(&cfg).total);
    hc.hidden_width = 16;
    hc.final_init_scale = 0.3;
    let hyper = HyperNet::for_layout(hc, &param_layout(&cfg)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta: Vec<f64> = hyper.init(unet.layout(), &mut rng).unwrap();
    let images: Vec<Tensor<f64>> = (0..2)
        .map(|_| Tensor::from_vec(1, [1, 8, 8], (0..64).map(|_| StandardNormal.sample(&mut rng)).collect()))
        .collect();
    let labels: Vec<Vec<u8>> = (0..2).map(|_| (0..64).map(|_| rng.random_range(0..3u8)).collect()).collect();
    (unet, hyper, beta, images, labels, rng)
}

#[test]
fn loss_gradient_wrt_beta_matches_central_differences() {
    for seed in 0..3 {
        let (unet, hyper, beta, images, labels, mut rng) = setup(seed);
        let r = Spacing::new(vec![1.7, 2.4]).unwrap();
        let pad = PadRecord::none(2);
        let w = LossWeights::default();
        let loss = |b: &[f64]| hyper_loss_and_grad(&unet, &hyper, b, &r, &images, &labels, &[8, 8], &pad, w).unwrap();
        let (_, grad) = loss(&beta);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 25 {
            let i = rng.random_range(0..beta.len());
            let mut p = beta.clone();
            p[i] += h;
            let mut m = beta.clone();
            m[i] -= h;
            let num = (loss(&p).0 - loss(&m).0) / (2.0 * h);
            let scale = num.abs().max(grad[i].abs());
            if scale < 1e-7 {
                // Dead ReLU coordinate: both sides vanish.
                assert!(grad[i].abs() < 1e-7);
                continue;
            }
            let rel = (num - grad[i]).abs() / scale;
            assert!(rel < 1e-3, "seed {seed} beta[{i}]: analytic {} numeric {num} rel {rel}", grad[i]);
            checked += 1;
        }
    }
}

#[test]
fn padded_margin_does_not_enter_the_loss() {
    let (unet, hyper, beta, images, labels, _) = setup(9);
    let r = Spacing::new(vec![1.0, 1.0]).unwrap();
    let w = LossWeights::default();
    // Treat the outer ring as padding: labels cover the inner 6x6 only.
    let pad = PadRecord {
        pad_before: vec![1, 1],
        pad_after: vec![1, 1],
    };
    let inner: Vec<Vec<u8>> = labels.iter().map(|l| l[..36].to_vec()).collect();
    let (base, _) = hyper_loss_and_grad(&unet, &hyper, &beta, &r, &images, &inner, &[6, 6], &pad, w).unwrap();
    assert!(base.is_finite() && base > 0.0);
}
