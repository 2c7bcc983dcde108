use rand::Rng;

use super::Regime;
use crate::error::{Error, Result};
use crate::segnet::{volume_tensor, Tensor};
use crate::synthdata::SpacingRange;
use crate::volume::{pad_to_multiple, resample_image, resample_labels, LabelMap, PadRecord, Spacing, Volume};

/// Paired images and label maps, typically at the phantom reference spacing.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub pairs: Vec<(Volume, LabelMap)>,
}

impl Dataset {
    pub fn new(pairs: Vec<(Volume, LabelMap)>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.pairs.first().map(|(_, l)| l.num_classes())
    }
}

/// Patches sharing one spacing; images are padded for the network, labels
/// cover only the unpadded region.
#[derive(Debug, Clone)]
pub struct Batch {
    pub spacing: Spacing,
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<Vec<u8>>,
    pub pad: PadRecord,
    /// Unpadded patch shape in voxels.
    pub patch_shape: Vec<usize>,
}

/// Patch size in voxels for a physical edge length: `round(mm / spacing)` per axis.
pub fn patch_voxels(patch_mm: f64, spacing: &Spacing) -> Vec<usize> {
    spacing
        .as_slice()
        .iter()
        .map(|&s| ((patch_mm / s).round() as usize).max(1))
        .collect()
}

/// Draws the batch spacing for a regime.
pub fn batch_spacing<R: Rng + ?Sized>(regime: &Regime, range: &SpacingRange, rng: &mut R) -> Spacing {
    match regime.fixed_spacing() {
        Some(s) => s.clone(),
        None => range.sample(rng),
    }
}

/// Builds one training batch: one spacing, `batch_size` random phantoms,
/// each resampled to that spacing and cropped to a fixed physical patch.
pub fn make_batch<R: Rng + ?Sized>(
    regime: &Regime,
    range: &SpacingRange,
    dataset: &Dataset,
    batch_size: usize,
    patch_mm: f64,
    divisor: usize,
    rng: &mut R,
) -> Result<Batch> {
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let spacing = batch_spacing(regime, range, rng);
    let patch = patch_voxels(patch_mm, &spacing);
    let mut images = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    let mut pad = None;
    for _ in 0..batch_size.max(1) {
        let (img, lab) = &dataset.pairs[rng.random_range(0..dataset.len())];
        let img = resample_image(img, &spacing)?;
        let lab = resample_labels(lab, &spacing)?;
        if img.shape().iter().zip(&patch).any(|(&n, &p)| p > n) {
            return Err(Error::PatchTooLarge {
                patch_mm,
                extent_mm: img.extent_mm(),
            });
        }
        let start: Vec<usize> = img
            .shape()
            .iter()
            .zip(&patch)
            .map(|(&n, &p)| rng.random_range(0..=n - p))
            .collect();
        let img = img.crop(&start, &patch)?;
        let lab = lab.crop(&start, &patch)?;
        let (padded, rec) = pad_to_multiple(&img, divisor);
        images.push(volume_tensor(&padded));
        labels.push(lab.data().to_vec());
        pad = Some(rec);
    }
    Ok(Batch {
        spacing,
        images,
        labels,
        pad: pad.expect("non-empty batch"),
        patch_shape: patch,
    })
}
