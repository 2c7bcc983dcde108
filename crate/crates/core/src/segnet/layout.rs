use serde::{Deserialize, Serialize};

use super::UNetConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.size()
    }

    /// Fan-in of a convolution weight (input channels times kernel volume).
    pub fn fan_in(&self) -> usize {
        self.shape[1..].iter().product()
    }
}

/// Ordered manifest of every U-Net parameter inside the flat weight vector.
///
/// Order: encoder (shallow to deep), bottleneck, decoder (deep to shallow), head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

struct Builder<'c> {
    cfg: &'c UNetConfig,
    entries: Vec<ParamEntry>,
    offset: usize,
}

impl Builder<'_> {
    fn push(&mut self, name: String, role: ParamRole, shape: Vec<usize>) -> usize {
        let entry = ParamEntry {
            name,
            role,
            shape,
            offset: self.offset,
        };
        self.offset += entry.size();
        self.entries.push(entry);
        self.entries.len() - 1
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> usize {
        let mut shape = vec![cout, cin];
        shape.extend(self.cfg.kernel_shape(k));
        let w = self.push(format!("{prefix}.weight"), ParamRole::ConvWeight, shape);
        self.push(format!("{prefix}.bias"), ParamRole::ConvBias, vec![cout]);
        w
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize) {
        let k = self.cfg.kernel_size;
        self.conv(&format!("{prefix}.conv"), cin, cout, k);
        self.push(format!("{prefix}.norm.scale"), ParamRole::NormScale, vec![cout]);
        self.push(format!("{prefix}.norm.shift"), ParamRole::NormShift, vec![cout]);
    }

    fn stage(&mut self, prefix: &str, cin: usize, cout: usize) {
        for b in 0..self.cfg.blocks_per_level {
            let input = if b == 0 { cin } else { cout };
            self.block(&format!("{prefix}.block{b}"), input, cout);
        }
    }
}

pub fn param_layout(cfg: &UNetConfig) -> ParamLayout {
    let mut b = Builder {
        cfg,
        entries: Vec::new(),
        offset: 0,
    };
    let deepest = cfg.levels - 1;
    let mut cin = cfg.in_channels;
    for level in 0..deepest {
        b.stage(&format!("enc{level}"), cin, cfg.channels(level));
        cin = cfg.channels(level);
    }
    b.stage("bottleneck", cin, cfg.channels(deepest));
    for level in (0..deepest).rev() {
        let c = cfg.channels(level);
        b.conv(&format!("dec{level}.up"), cfg.channels(level + 1), c, cfg.kernel_size);
        b.stage(&format!("dec{level}"), 2 * c, c);
    }
    b.conv("head", cfg.channels(0), cfg.num_classes, 1);
    ParamLayout {
        total: b.offset,
        entries: b.entries,
    }
}

pub fn param_count(cfg: &UNetConfig) -> usize {
    param_layout(cfg).total
}

/// One named, shaped slice of the flat weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<'a, T> {
    pub name: &'a str,
    pub shape: &'a [usize],
    pub values: &'a [T],
}

/// Slices `w` into one tensor per layout entry.
pub fn dispatch<'a, T>(w: &'a [T], layout: &'a ParamLayout) -> Result<Vec<ParamTensor<'a, T>>> {
    if w.len() != layout.total {
        return Err(Error::WeightLength {
            expected: layout.total,
            actual: w.len(),
        });
    }
    Ok(layout
        .entries
        .iter()
        .map(|e| ParamTensor {
            name: &e.name,
            shape: &e.shape,
            values: &w[e.range()],
        })
        .collect())
}

/// Concatenates structured tensors back into the flat vector, checking
/// that they follow the layout exactly.
pub fn flatten<T: Copy>(params: &[ParamTensor<'_, T>], layout: &ParamLayout) -> Result<Vec<T>> {
    if params.len() != layout.entries.len() {
        return Err(Error::Config(format!(
            "expected {} parameter tensors, got {}",
            layout.entries.len(),
            params.len()
        )));
    }
    let mut out = Vec::with_capacity(layout.total);
    for (p, e) in params.iter().zip(&layout.entries) {
        if p.shape != e.shape.as_slice() || p.values.len() != e.size() {
            return Err(Error::ShapeMismatch {
                left: e.shape.clone(),
                right: p.shape.to_vec(),
            });
        }
        out.extend_from_slice(p.values);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(dim: usize) -> UNetConfig {
        UNetConfig {
            dim,
            levels: 2,
            blocks_per_level: 2,
            base_channels: 2,
            kernel_size: 3,
            in_channels: 1,
            num_classes: 3,
        }
    }

    #[test]
    fn offsets_are_contiguous() {
        let layout = param_layout(&UNetConfig::new(3, 4));
        let mut next = 0;
        for e in &layout.entries {
            assert_eq!(e.offset, next);
            next += e.size();
        }
        assert_eq!(next, layout.total);
    }

    #[test]
    fn single_conv_count() {
        let cfg = UNetConfig {
            dim: 2,
            levels: 1,
            blocks_per_level: 1,
            base_channels: 2,
            kernel_size: 3,
            in_channels: 1,
            num_classes: 2,
        };
        let layout = param_layout(&cfg);
        let conv: usize = layout.entries[..2].iter().map(ParamEntry::size).sum();
        assert_eq!(conv, 20);
        let norm: usize = layout.entries[2..4].iter().map(ParamEntry::size).sum();
        assert_eq!(norm, 2 * 2);
    }

    #[test]
    fn doubling_width_quadruples_inner_conv_weights() {
        let a = param_layout(&UNetConfig::new(3, 4));
        let mut cfg = UNetConfig::new(3, 4);
        cfg.base_channels *= 2;
        let b = param_layout(&cfg);
        for (x, y) in a.entries.iter().zip(&b.entries) {
            let inner = x.role == ParamRole::ConvWeight
                && !x.name.starts_with("enc0.block0")
                && !x.name.starts_with("head");
            if inner {
                assert_eq!(y.size(), 4 * x.size(), "{}", x.name);
            }
        }
    }

    #[test]
    fn wrong_length_names_both_counts() {
        let layout = param_layout(&tiny(2));
        let w = vec![0.0f32; layout.total - 1];
        let err = dispatch(&w, &layout).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&layout.total.to_string()));
        assert!(msg.contains(&(layout.total - 1).to_string()));
    }

    #[test]
    fn first_entry_is_first_conv_raveled() {
        let layout = param_layout(&tiny(3));
        let w: Vec<f32> = (0..layout.total).map(|i| i as f32).collect();
        let parts = dispatch(&w, &layout).unwrap();
        assert_eq!(parts[0].name, "enc0.block0.conv.weight");
        assert_eq!(parts[0].shape, &[2, 1, 3, 3, 3]);
        assert_eq!(parts[0].values, &w[..54]);
    }

    proptest! {
        #[test]
        fn flatten_inverts_dispatch(dim in 2usize..4, seed in any::<u64>()) {
            let layout = param_layout(&tiny(dim));
            let w: Vec<f64> = (0..layout.total)
                .map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 7.0)
                .collect();
            let parts = dispatch(&w, &layout).unwrap();
            prop_assert_eq!(flatten(&parts, &layout).unwrap(), w);
        }
    }
}
