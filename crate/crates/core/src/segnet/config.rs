use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// U-Net architecture. Channel count doubles at every level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub dim: usize,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_blocks")]
    pub blocks_per_level: usize,
    #[serde(default = "default_base")]
    pub base_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default = "default_in")]
    pub in_channels: usize,
    pub num_classes: usize,
}

fn default_levels() -> usize {
    4
}
fn default_blocks() -> usize {
    3
}
fn default_base() -> usize {
    8
}
fn default_kernel() -> usize {
    3
}
fn default_in() -> usize {
    1
}

impl UNetConfig {
    pub fn new(dim: usize, num_classes: usize) -> Self {
        Self {
            dim,
            levels: default_levels(),
            blocks_per_level: default_blocks(),
            base_channels: default_base(),
            kernel_size: default_kernel(),
            in_channels: default_in(),
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(2..=3).contains(&self.dim) {
            return fail(format!("dim must be 2 or 3, got {}", self.dim));
        }
        // A single level is a plain conv stack; used for tiny test networks.
        if self.levels < 1 || self.levels > 8 {
            return fail(format!("levels must lie in [1, 8], got {}", self.levels));
        }
        if self.blocks_per_level < 1 {
            return fail("blocks_per_level must be at least 1".into());
        }
        if self.base_channels < 1 || self.in_channels < 1 {
            return fail("channel counts must be at least 1".into());
        }
        if self.kernel_size % 2 == 0 {
            return fail(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial sizes must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Kernel extent lifted to three axes (2-D kernels are flat in depth).
    pub fn kernel3(&self) -> [usize; 3] {
        let k = self.kernel_size;
        if self.dim == 2 {
            [1, k, k]
        } else {
            [k, k, k]
        }
    }

    /// Pooling factor lifted to three axes.
    pub fn pool3(&self) -> [usize; 3] {
        if self.dim == 2 {
            [1, 2, 2]
        } else {
            [2, 2, 2]
        }
    }

    /// Kernel shape as stored in the parameter layout.
    pub(crate) fn kernel_shape(&self, k: usize) -> Vec<usize> {
        vec![k; self.dim]
    }
}
