//! MLP mapping voxel spacing (mm) to the complete U-Net weight vector.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::segnet::{ParamLayout, ParamRole};

/// Generated weights satisfy `|w| < OUTPUT_BOUND` through `bound * tanh(z)`.
pub const OUTPUT_BOUND: f64 = 5.0;

/// Optional affine map applied to the spacing before the first layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperNetConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
    #[serde(default = "default_hidden_width")]
    pub hidden_width: usize,
    pub output_dim: usize,
    #[serde(default = "default_final_scale")]
    pub final_init_scale: f64,
    #[serde(default)]
    pub input_norm: Option<InputNorm>,
}

fn default_hidden_layers() -> usize {
    3
}
fn default_hidden_width() -> usize {
    64
}
fn default_final_scale() -> f64 {
    0.1
}

impl HyperNetConfig {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_layers: default_hidden_layers(),
            hidden_width: default_hidden_width(),
            output_dim,
            final_init_scale: default_final_scale(),
            input_norm: None,
        }
    }

    /// `(fan_in, fan_out)` of every linear layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.hidden_layers {
            dims.push((fan_in, self.hidden_width));
            fan_in = self.hidden_width;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_width == 0 {
            return Err(Error::Config("hypernetwork dimensions must be non-zero".into()));
        }
        if let Some(n) = &self.input_norm {
            if n.center.len() != self.input_dim || n.scale.len() != self.input_dim {
                return Err(Error::Config("input_norm length must equal input_dim".into()));
            }
            if n.scale.iter().any(|s| *s == 0.0) {
                return Err(Error::Config("input_norm scale must be non-zero".into()));
            }
        }
        Ok(())
    }
}

/// Layer activations kept for the backward pass.
pub struct HyperCache<T> {
    /// Input of every linear layer (the first entry is the normalised spacing).
    inputs: Vec<Vec<T>>,
    /// `tanh(z)` of the output layer.
    tanh: Vec<T>,
}

/// The hypernetwork structure; its parameters live in a flat vector.
#[derive(Debug, Clone)]
pub struct HyperNet {
    config: HyperNetConfig,
    /// `(weight offset, bias offset, fan_in, fan_out)` per layer.
    layers: Vec<(usize, usize, usize, usize)>,
    total: usize,
}

impl HyperNet {
    pub fn new(config: HyperNetConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut off = 0;
        for (fan_in, fan_out) in config.layer_dims() {
            layers.push((off, off + fan_in * fan_out, fan_in, fan_out));
            off += fan_in * fan_out + fan_out;
        }
        Ok(Self {
            config,
            layers,
            total: off,
        })
    }

    /// Builds the hypernetwork for a given U-Net layout, which fixes its output size.
    pub fn for_layout(mut config: HyperNetConfig, layout: &ParamLayout) -> Result<Self> {
        if config.output_dim != layout.total {
            return Err(Error::Config(format!(
                "hypernetwork output_dim {} does not match U-Net parameter count {}",
                config.output_dim, layout.total
            )));
        }
        config.output_dim = layout.total;
        Self::new(config)
    }

    pub fn config(&self) -> &HyperNetConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.total
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    fn check(&self, beta_len: usize, r: &[f64]) -> Result<()> {
        if beta_len != self.total {
            return Err(Error::WeightLength {
                expected: self.total,
                actual: beta_len,
            });
        }
        if r.len() != self.config.input_dim {
            return Err(Error::DimMismatch {
                expected: self.config.input_dim,
                actual: r.len(),
            });
        }
        if r.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::NonPositiveSpacing(r.to_vec()));
        }
        Ok(())
    }

    fn input<T: Real>(&self, r: &[f64]) -> Vec<T> {
        match &self.config.input_norm {
            Some(n) => r
                .iter()
                .zip(n.center.iter().zip(&n.scale))
                .map(|(v, (c, s))| T::from_f64((v - c) / s))
                .collect(),
            None => r.iter().map(|&v| T::from_f64(v)).collect(),
        }
    }

    fn run<T: Real>(&self, beta: &[T], r: &[f64], keep: bool) -> (Vec<T>, Option<HyperCache<T>>) {
        let bound = T::from_f64(OUTPUT_BOUND);
        // tanh rounds to exactly ±1 once saturated; keep the bound strict.
        let cap = T::one() - T::from_f64(4.0) * T::epsilon();
        let mut h = self.input::<T>(r);
        let mut inputs = Vec::new();
        let last = self.layers.len() - 1;
        let mut out = Vec::new();
        for (i, &(w_off, b_off, fan_in, fan_out)) in self.layers.iter().enumerate() {
            let mut z = beta[b_off..b_off + fan_out].to_vec();
            T::gemm(
                fan_out, fan_in, 1, T::one(), &beta[w_off..b_off], fan_in as isize, 1, &h, 1, 1,
                T::one(), &mut z, 1, 1,
            );
            if keep {
                inputs.push(std::mem::take(&mut h));
            }
            if i == last {
                z.iter_mut().for_each(|v| *v = v.tanh().max(-cap).min(cap));
                out = z;
            } else {
                z.iter_mut().for_each(|v| *v = v.max(T::zero()));
                h = z;
            }
        }
        let eta: Vec<T> = out.iter().map(|&t| bound * t).collect();
        let cache = keep.then(|| HyperCache { inputs, tanh: out });
        (eta, cache)
    }

    /// Weight vector for spacing `r`; every component lies strictly in `(-5, 5)`.
    pub fn forward<T: Real>(&self, beta: &[T], r: &[f64]) -> Result<Vec<T>> {
        self.check(beta.len(), r)?;
        Ok(self.run(beta, r, false).0)
    }

    pub fn forward_train<T: Real>(&self, beta: &[T], r: &[f64]) -> Result<(Vec<T>, HyperCache<T>)> {
        self.check(beta.len(), r)?;
        let (eta, cache) = self.run(beta, r, true);
        Ok((eta, cache.expect("cache requested")))
    }

    /// Accumulates `d loss / d beta` into `grad_beta` from `d loss / d eta`
    /// and returns `d loss / d r` (in raw spacing units).
    pub fn backward<T: Real>(
        &self,
        cache: &HyperCache<T>,
        beta: &[T],
        d_eta: &[T],
        grad_beta: &mut [T],
    ) -> Vec<T> {
        assert_eq!(d_eta.len(), self.config.output_dim);
        assert_eq!(grad_beta.len(), self.total);
        let bound = T::from_f64(OUTPUT_BOUND);
        let mut dz: Vec<T> = d_eta
            .iter()
            .zip(&cache.tanh)
            .map(|(&g, &t)| g * bound * (T::one() - t * t))
            .collect();
        for (i, &(w_off, b_off, fan_in, fan_out)) in self.layers.iter().enumerate().rev() {
            let h = &cache.inputs[i];
            // dW += dz h^T ; db += dz ; dh = W^T dz
            T::gemm(
                fan_out, 1, fan_in, T::one(), &dz, 1, 1, h, 1, 1, T::one(),
                &mut grad_beta[w_off..b_off], fan_in as isize, 1,
            );
            for (g, &d) in grad_beta[b_off..b_off + fan_out].iter_mut().zip(&dz) {
                *g += d;
            }
            let mut dh = vec![T::zero(); fan_in];
            T::gemm(
                fan_in, fan_out, 1, T::one(), &beta[w_off..b_off], 1, fan_in as isize, &dz, 1, 1,
                T::zero(), &mut dh, 1, 1,
            );
            if i > 0 {
                // The input of layer i is the ReLU output of layer i - 1.
                for (d, &a) in dh.iter_mut().zip(h) {
                    if a <= T::zero() {
                        *d = T::zero();
                    }
                }
            } else if let Some(n) = &self.config.input_norm {
                for (d, s) in dh.iter_mut().zip(&n.scale) {
                    *d /= T::from_f64(*s);
                }
            }
            dz = dh;
        }
        dz
    }

    /// Fan-in-scaled initialisation whose output reproduces a conventionally
    /// initialised U-Net. Final-layer rows are damped by `final_init_scale`
    /// times the typical magnitude of the tensor they generate, and final
    /// biases are `atanh(target / 5)` of a conventional draw.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, unet: &ParamLayout, rng: &mut R) -> Result<Vec<T>> {
        if unet.total != self.config.output_dim {
            return Err(Error::Config(format!(
                "hypernetwork output_dim {} does not match U-Net parameter count {}",
                self.config.output_dim, unet.total
            )));
        }
        let mut beta = vec![T::zero(); self.total];
        let last = self.layers.len() - 1;
        for &(w_off, b_off, fan_in, _) in &self.layers[..last] {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            for v in &mut beta[w_off..b_off] {
                *v = T::from_f64(normal.sample(rng));
            }
        }
        let (w_off, b_off, fan_in, _) = self.layers[last];
        let base = self.config.final_init_scale * (2.0 / fan_in as f64).sqrt();
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        for (row, scale) in output_scales(unet).into_iter().enumerate() {
            let dst = &mut beta[w_off + row * fan_in..w_off + (row + 1) * fan_in];
            for v in dst {
                *v = T::from_f64(base * scale * unit.sample(rng));
            }
        }
        let target = conventional_init(unet, rng);
        for (b, t) in beta[b_off..].iter_mut().zip(target) {
            let ratio = (t / OUTPUT_BOUND).clamp(-0.99, 0.99);
            *b = T::from_f64(ratio.atanh());
        }
        Ok(beta)
    }
}

/// Typical magnitude of every generated weight: the He std of its
/// convolution for conv weights and biases, one for norm parameters.
fn output_scales(layout: &ParamLayout) -> Vec<f64> {
    let mut out = vec![1.0; layout.total];
    let mut conv = 1.0;
    for e in &layout.entries {
        let s = match e.role {
            ParamRole::ConvWeight => {
                conv = conv_init_std(e.fan_in());
                conv
            }
            ParamRole::ConvBias => conv,
            ParamRole::NormScale | ParamRole::NormShift => 1.0,
        };
        out[e.range()].fill(s);
    }
    out
}

/// He-normal conv weights, zero biases and shifts, unit norm scales.
pub fn conventional_init<R: Rng + ?Sized>(layout: &ParamLayout, rng: &mut R) -> Vec<f64> {
    let mut w = vec![0.0; layout.total];
    for e in &layout.entries {
        let dst = &mut w[e.range()];
        match e.role {
            ParamRole::ConvWeight => {
                let normal = Normal::new(0.0, conv_init_std(e.fan_in())).expect("finite std");
                dst.iter_mut().for_each(|v| *v = normal.sample(rng));
            }
            ParamRole::NormScale => dst.fill(1.0),
            ParamRole::ConvBias | ParamRole::NormShift => {}
        }
    }
    w
}

/// Standard deviation of a He-normal convolution weight.
pub fn conv_init_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::{param_layout, UNetConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (HyperNet, ParamLayout) {
        let cfg = UNetConfig {
            dim: 3,
            levels: 2,
            blocks_per_level: 1,
            base_channels: 2,
            kernel_size: 3,
            in_channels: 1,
            num_classes: 2,
        };
        let layout = param_layout(&cfg);
        let hn = HyperNet::new(HyperNetConfig::new(3, layout.total)).unwrap();
        (hn, layout)
    }

    #[test]
    fn output_is_strictly_bounded() {
        let (hn, layout) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut beta: Vec<f64> = hn.init(&layout, &mut rng).unwrap();
        // Blow the weights up so tanh saturates.
        beta.iter_mut().for_each(|b| *b *= 50.0);
        let eta = hn.forward(&beta, &[0.7, 2.0, 3.5]).unwrap();
        assert!(eta.iter().any(|v| v.abs() > 4.999));
        assert!(eta.iter().all(|v| v.abs() < OUTPUT_BOUND));
        let eta32 = hn.forward(&beta.iter().map(|&b| b as f32).collect::<Vec<_>>(), &[0.7, 2.0, 3.5]).unwrap();
        assert!(eta32.iter().all(|v| v.abs() < OUTPUT_BOUND as f32));
    }

    #[test]
    fn rejects_wrong_spacing_length() {
        let (hn, layout) = small();
        let beta: Vec<f32> = hn.init(&layout, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(
            hn.forward(&beta, &[1.0, 1.0]),
            Err(Error::DimMismatch { expected: 3, actual: 2 })
        ));
    }

    #[test]
    fn init_is_deterministic() {
        let (hn, layout) = small();
        let a: Vec<f32> = hn.init(&layout, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b: Vec<f32> = hn.init(&layout, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn continuity_in_spacing() {
        let (hn, layout) = small();
        let beta: Vec<f64> = hn.init(&layout, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let a = hn.forward(&beta, &[1.0, 1.0, 1.0]).unwrap();
        let b = hn.forward(&beta, &[1.0 + 1e-9, 1.0, 1.0]).unwrap();
        let max = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max < 1e-8, "{max}");
    }

    #[test]
    fn output_dim_mismatch_is_rejected() {
        let (_, layout) = small();
        let err = HyperNet::for_layout(HyperNetConfig::new(3, layout.total + 1), &layout).unwrap_err();
        assert!(err.to_string().contains(&layout.total.to_string()));
    }
}
