//! Physical-space-aware images and label maps.

mod io;
mod pad;
mod resample;

pub use io::{load_labels, load_volume, save_labels, save_volume, Sidecar};
pub use pad::{crop_back, pad_channels, pad_labels_to_multiple, pad_to_multiple, PadRecord};
pub use resample::{axis_sampling, output_size, resample_image, resample_labels, resample_labels_onto, sample_linear};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-axis voxel size in millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Spacing(Vec<f64>);

impl Spacing {
    pub fn new(mm: Vec<f64>) -> Result<Self> {
        if mm.is_empty() || mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::NonPositiveSpacing(mm));
        }
        Ok(Self(mm))
    }

    pub fn isotropic(mm: f64, dim: usize) -> Result<Self> {
        Self::new(vec![mm; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|s| s * factor).collect())
    }
}

impl TryFrom<Vec<f64>> for Spacing {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Spacing> for Vec<f64> {
    fn from(s: Spacing) -> Self {
        s.0
    }
}

impl std::ops::Index<usize> for Spacing {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::fmt::Display for Spacing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|s| format!("{s:.4}")).collect();
        write!(f, "{}", parts.join("x"))
    }
}

/// Single-channel image with physical spacing. Data is C-order over `shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: Vec<usize>,
    spacing: Spacing,
    data: Vec<f32>,
}

/// Integer label map; every element lies in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    shape: Vec<usize>,
    spacing: Spacing,
    num_classes: usize,
    data: Vec<u8>,
}

fn check_shape(shape: &[usize], spacing: &Spacing, len: usize) -> Result<()> {
    if !(2..=3).contains(&shape.len()) {
        return Err(Error::Config(format!(
            "only 2-D and 3-D volumes are supported, got {} axes",
            shape.len()
        )));
    }
    if shape.len() != spacing.dim() {
        return Err(Error::DimMismatch {
            expected: shape.len(),
            actual: spacing.dim(),
        });
    }
    if shape.iter().any(|&n| n == 0) {
        return Err(Error::Empty("volume axis of length zero"));
    }
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::ShapeMismatch {
            left: shape.to_vec(),
            right: vec![len],
        });
    }
    Ok(())
}

impl Volume {
    pub fn new(shape: Vec<usize>, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape, &spacing, data.len())?;
        Ok(Self {
            shape,
            spacing,
            data,
        })
    }

    pub fn filled(shape: Vec<usize>, spacing: Spacing, value: f32) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, spacing, vec![value; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &Spacing {
        &self.spacing
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Physical extent per axis in mm.
    pub fn extent_mm(&self) -> Vec<f64> {
        extent(&self.shape, &self.spacing)
    }

    /// Retag the same voxels with another spacing (no resampling).
    pub fn with_spacing(mut self, spacing: Spacing) -> Result<Self> {
        if spacing.dim() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                actual: spacing.dim(),
            });
        }
        self.spacing = spacing;
        Ok(self)
    }

    /// Rectangular sub-block `[start, start + size)` per axis.
    pub fn crop(&self, start: &[usize], size: &[usize]) -> Result<Self> {
        let data = crop_block(&self.data, &self.shape, start, size)?;
        Self::new(size.to_vec(), self.spacing.clone(), data)
    }
}

impl LabelMap {
    pub fn new(
        shape: Vec<usize>,
        spacing: Spacing,
        num_classes: usize,
        data: Vec<u8>,
    ) -> Result<Self> {
        check_shape(&shape, &spacing, data.len())?;
        if !(2..=256).contains(&num_classes) {
            return Err(Error::Config(format!(
                "num_classes must lie in [2, 256], got {num_classes}"
            )));
        }
        if let Some(&bad) = data.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad as u32,
                num_classes,
            });
        }
        Ok(Self {
            shape,
            spacing,
            num_classes,
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &Spacing {
        &self.spacing
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn extent_mm(&self) -> Vec<f64> {
        extent(&self.shape, &self.spacing)
    }

    /// Sorted set of labels present.
    pub fn label_set(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.data {
            seen[l as usize] = true;
        }
        (0..=255u8).filter(|&l| seen[l as usize]).collect()
    }

    /// Voxel count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.data {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Result<Self> {
        if spacing.dim() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                actual: spacing.dim(),
            });
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn crop(&self, start: &[usize], size: &[usize]) -> Result<Self> {
        let data = crop_block(&self.data, &self.shape, start, size)?;
        Self::new(size.to_vec(), self.spacing.clone(), self.num_classes, data)
    }
}

fn extent(shape: &[usize], spacing: &Spacing) -> Vec<f64> {
    shape
        .iter()
        .zip(spacing.as_slice())
        .map(|(&n, &s)| n as f64 * s)
        .collect()
}

/// Pads a 2-D/3-D shape to three axes with leading singleton axes.
pub(crate) fn dims3(shape: &[usize]) -> [usize; 3] {
    match *shape {
        [h, w] => [1, h, w],
        [d, h, w] => [d, h, w],
        _ => panic!("expected 2 or 3 axes, got {}", shape.len()),
    }
}

pub(crate) fn crop_block<E: Copy>(
    data: &[E],
    shape: &[usize],
    start: &[usize],
    size: &[usize],
) -> Result<Vec<E>> {
    if start.len() != shape.len() || size.len() != shape.len() {
        return Err(Error::DimMismatch {
            expected: shape.len(),
            actual: start.len().min(size.len()),
        });
    }
    for a in 0..shape.len() {
        if start[a] + size[a] > shape[a] || size[a] == 0 {
            return Err(Error::ShapeMismatch {
                left: shape.to_vec(),
                right: start.iter().zip(size).map(|(s, n)| s + n).collect(),
            });
        }
    }
    let src = dims3(shape);
    let (s0, n0) = lift(start, size);
    let mut out = Vec::with_capacity(n0.iter().product());
    for z in 0..n0[0] {
        for y in 0..n0[1] {
            let base = ((z + s0[0]) * src[1] + (y + s0[1])) * src[2] + s0[2];
            out.extend_from_slice(&data[base..base + n0[2]]);
        }
    }
    Ok(out)
}

fn lift(start: &[usize], size: &[usize]) -> ([usize; 3], [usize; 3]) {
    if start.len() == 2 {
        ([0, start[0], start[1]], [1, size[0], size[1]])
    } else {
        ([start[0], start[1], start[2]], [size[0], size[1], size[2]])
    }
}
