use serde::{Deserialize, Serialize};

use super::layout::{param_layout, ParamLayout};
use super::ops::{self, NormCache};
use super::tensor::Tensor;
use super::UNetConfig;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Encoder,
    Bottleneck,
    Decoder,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Relu,
}

/// An observable activation: the output of a convolution or a nonlinearity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    pub stage: Stage,
    /// Resolution level; features live on a grid `2^level` times coarser.
    pub level: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Conv {
        weight: usize,
        bias: usize,
        cout: usize,
        kernel: [usize; 3],
        layer: usize,
    },
    Norm {
        scale: usize,
        shift: usize,
    },
    Relu {
        layer: usize,
    },
    SaveSkip,
    Pool,
    Upsample,
    ConcatSkip,
}

enum TapeEntry<T> {
    Conv(Tensor<T>),
    Norm(NormCache<T>),
    Relu(Vec<bool>),
    Pool(Vec<u32>, [usize; 3]),
    Concat(usize),
    None,
}

/// Cached intermediates of a training forward pass.
pub struct Tape<T> {
    entries: Vec<TapeEntry<T>>,
}

/// A U-Net whose parameters are supplied on every call as a flat vector.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    layout: ParamLayout,
    ops: Vec<Op>,
    layers: Vec<LayerInfo>,
}

struct PlanBuilder<'a> {
    layout: &'a ParamLayout,
    cursor: usize,
    ops: Vec<Op>,
    layers: Vec<LayerInfo>,
}

impl PlanBuilder<'_> {
    fn take(&mut self, suffix: &str) -> usize {
        let i = self.cursor;
        debug_assert!(self.layout.entries[i].name.ends_with(suffix));
        self.cursor += 1;
        i
    }

    fn layer(&mut self, name: String, kind: LayerKind, stage: Stage, level: usize, ch: usize) -> usize {
        self.layers.push(LayerInfo {
            name,
            kind,
            stage,
            level,
            channels: ch,
        });
        self.layers.len() - 1
    }

    fn conv(&mut self, name: &str, stage: Stage, level: usize, kernel: [usize; 3]) {
        let weight = self.take("weight");
        let bias = self.take("bias");
        let cout = self.layout.entries[weight].shape[0];
        let layer = self.layer(name.to_string(), LayerKind::Conv, stage, level, cout);
        self.ops.push(Op::Conv {
            weight,
            bias,
            cout,
            kernel,
            layer,
        });
    }

    fn stage(&mut self, prefix: &str, stage: Stage, level: usize, cfg: &UNetConfig) {
        for b in 0..cfg.blocks_per_level {
            let name = format!("{prefix}.block{b}");
            self.conv(&format!("{name}.conv"), stage, level, cfg.kernel3());
            let scale = self.take("scale");
            let shift = self.take("shift");
            self.ops.push(Op::Norm { scale, shift });
            let layer = self.layer(format!("{name}.relu"), LayerKind::Relu, stage, level, cfg.channels(level));
            self.ops.push(Op::Relu { layer });
        }
    }
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        let mut b = PlanBuilder {
            layout: &layout,
            cursor: 0,
            ops: Vec::new(),
            layers: Vec::new(),
        };
        let deepest = config.levels - 1;
        for level in 0..deepest {
            b.stage(&format!("enc{level}"), Stage::Encoder, level, &config);
            b.ops.push(Op::SaveSkip);
            b.ops.push(Op::Pool);
        }
        b.stage("bottleneck", Stage::Bottleneck, deepest, &config);
        for level in (0..deepest).rev() {
            b.ops.push(Op::Upsample);
            b.conv(&format!("dec{level}.up"), Stage::Decoder, level, config.kernel3());
            b.ops.push(Op::ConcatSkip);
            b.stage(&format!("dec{level}"), Stage::Decoder, level, &config);
        }
        b.conv("head", Stage::Head, 0, [1, 1, 1]);
        debug_assert_eq!(b.cursor, layout.entries.len());
        let (ops, layers) = (b.ops, b.layers);
        Ok(Self {
            config,
            layout,
            ops,
            layers,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Observable layers in forward execution order.
    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn check_input<T: Real>(&self, x: &Tensor<T>, w: &[T]) -> Result<()> {
        if w.len() != self.layout.total {
            return Err(Error::WeightLength {
                expected: self.layout.total,
                actual: w.len(),
            });
        }
        if x.channels != self.config.in_channels {
            return Err(Error::DimMismatch {
                expected: self.config.in_channels,
                actual: x.channels,
            });
        }
        let m = self.config.divisor();
        let spatial: Vec<usize> = if self.config.dim == 2 {
            if x.dims[0] != 1 {
                return Err(Error::DimMismatch {
                    expected: 2,
                    actual: 3,
                });
            }
            x.dims[1..].to_vec()
        } else {
            x.dims.to_vec()
        };
        if spatial.iter().any(|&n| n % m != 0) {
            return Err(Error::Indivisible {
                shape: spatial,
                multiple: m,
            });
        }
        Ok(())
    }

    fn run<T: Real>(
        &self,
        input: &Tensor<T>,
        w: &[T],
        mut tape: Option<&mut Vec<TapeEntry<T>>>,
        observer: &mut dyn FnMut(&LayerInfo, &Tensor<T>),
    ) -> Tensor<T> {
        let entries = &self.layout.entries;
        let slice = |i: usize| &w[entries[i].range()];
        let pool = self.config.pool3();
        let mut skips: Vec<Tensor<T>> = Vec::new();
        let mut cur = input.clone();
        for op in &self.ops {
            let record = tape.is_some();
            let (next, entry) = match op {
                Op::Conv {
                    weight,
                    bias,
                    cout,
                    kernel,
                    layer,
                } => {
                    let y = ops::conv_forward(&cur, slice(*weight), slice(*bias), *cout, *kernel);
                    observer(&self.layers[*layer], &y);
                    let e = if record { TapeEntry::Conv(cur) } else { TapeEntry::None };
                    (y, e)
                }
                Op::Norm { scale, shift } => {
                    let (y, cache) =
                        ops::instance_norm_forward(&cur, slice(*scale), slice(*shift), record);
                    (y, cache.map_or(TapeEntry::None, TapeEntry::Norm))
                }
                Op::Relu { layer } => {
                    ops::relu_inplace(&mut cur);
                    observer(&self.layers[*layer], &cur);
                    let e = if record {
                        TapeEntry::Relu(cur.data.iter().map(|&v| v > T::zero()).collect())
                    } else {
                        TapeEntry::None
                    };
                    (cur, e)
                }
                Op::SaveSkip => {
                    skips.push(cur.clone());
                    (cur, TapeEntry::None)
                }
                Op::Pool => {
                    let (y, arg) = ops::max_pool_forward(&cur, pool);
                    let e = if record { TapeEntry::Pool(arg, cur.dims) } else { TapeEntry::None };
                    (y, e)
                }
                Op::Upsample => (ops::upsample_forward(&cur, pool), TapeEntry::None),
                Op::ConcatSkip => {
                    let skip = skips.pop().expect("skip stack underflow");
                    let y = ops::concat(&skip, &cur);
                    (y, TapeEntry::Concat(skip.channels))
                }
            };
            if let Some(t) = tape.as_deref_mut() {
                t.push(entry);
            }
            cur = next;
        }
        cur
    }

    /// Inference forward pass; intermediates are dropped as soon as possible.
    pub fn forward<T: Real>(&self, input: &Tensor<T>, w: &[T]) -> Result<Tensor<T>> {
        self.check_input(input, w)?;
        Ok(self.run(input, w, None, &mut |_, _| {}))
    }

    /// Forward pass that hands every conv and ReLU output to `observer`.
    pub fn forward_observed<T: Real>(
        &self,
        input: &Tensor<T>,
        w: &[T],
        observer: &mut dyn FnMut(&LayerInfo, &Tensor<T>),
    ) -> Result<Tensor<T>> {
        self.check_input(input, w)?;
        Ok(self.run(input, w, None, observer))
    }

    pub fn forward_train<T: Real>(&self, input: &Tensor<T>, w: &[T]) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(input, w)?;
        let mut entries = Vec::with_capacity(self.ops.len());
        let out = self.run(input, w, Some(&mut entries), &mut |_, _| {});
        Ok((out, Tape { entries }))
    }

    /// Backpropagates `d_logits`, accumulating into `grad_w`. Returns the
    /// gradient with respect to the input image when `need_input_grad`.
    pub fn backward<T: Real>(
        &self,
        tape: Tape<T>,
        w: &[T],
        d_logits: Tensor<T>,
        grad_w: &mut [T],
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        assert_eq!(grad_w.len(), self.layout.total);
        let entries = &self.layout.entries;
        let pool = self.config.pool3();
        let mut skip_grads: Vec<Tensor<T>> = Vec::new();
        let mut dy = d_logits;
        let mut tape = tape.entries;
        for (i, op) in self.ops.iter().enumerate().rev() {
            let cached = tape.pop().expect("tape shorter than plan");
            dy = match (op, cached) {
                (Op::Conv { weight, bias, kernel, .. }, TapeEntry::Conv(x)) => {
                    let (we, be) = (&entries[*weight], &entries[*bias]);
                    let (lo, hi) = grad_w.split_at_mut(be.offset);
                    let d_w = &mut lo[we.range()];
                    let d_b = &mut hi[..be.size()];
                    let need_dx = i > 0 || need_input_grad;
                    match ops::conv_backward(&x, &w[we.range()], &dy, *kernel, d_w, d_b, need_dx) {
                        Some(dx) => dx,
                        None => return None,
                    }
                }
                (Op::Norm { scale, shift }, TapeEntry::Norm(cache)) => {
                    let (se, he) = (&entries[*scale], &entries[*shift]);
                    let (lo, hi) = grad_w.split_at_mut(he.offset);
                    ops::instance_norm_backward(
                        &cache,
                        &w[se.range()],
                        &dy,
                        &mut lo[se.range()],
                        &mut hi[..he.size()],
                    )
                }
                (Op::Relu { .. }, TapeEntry::Relu(mask)) => {
                    for (g, keep) in dy.data.iter_mut().zip(mask) {
                        if !keep {
                            *g = T::zero();
                        }
                    }
                    dy
                }
                (Op::Pool, TapeEntry::Pool(arg, dims)) => ops::max_pool_backward(&dy, &arg, dims),
                (Op::Upsample, _) => ops::upsample_backward(&dy, pool),
                (Op::ConcatSkip, TapeEntry::Concat(skip_ch)) => {
                    let (d_skip, d_up) = ops::split(dy, skip_ch);
                    skip_grads.push(d_skip);
                    d_up
                }
                (Op::SaveSkip, _) => {
                    let d_skip = skip_grads.pop().expect("skip gradient stack underflow");
                    for (a, b) in dy.data.iter_mut().zip(d_skip.data) {
                        *a += b;
                    }
                    dy
                }
                _ => unreachable!("tape entry does not match op"),
            };
        }
        need_input_grad.then_some(dy)
    }
}
