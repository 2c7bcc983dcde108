use serde::{Deserialize, Serialize};

use super::{dims3, LabelMap, Volume};
use crate::error::{Error, Result};

/// Voxels added before and after each axis by [`pad_to_multiple`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadRecord {
    pub pad_before: Vec<usize>,
    pub pad_after: Vec<usize>,
}

impl PadRecord {
    pub fn none(dim: usize) -> Self {
        Self {
            pad_before: vec![0; dim],
            pad_after: vec![0; dim],
        }
    }

    fn for_shape(shape: &[usize], m: usize) -> Self {
        let m = m.max(1);
        let mut rec = Self::none(shape.len());
        for (a, &n) in shape.iter().enumerate() {
            let total = n.div_ceil(m) * m - n;
            rec.pad_before[a] = total / 2;
            rec.pad_after[a] = total - total / 2;
        }
        rec
    }

    pub fn padded_shape(&self, shape: &[usize]) -> Vec<usize> {
        shape
            .iter()
            .enumerate()
            .map(|(a, &n)| n + self.pad_before[a] + self.pad_after[a])
            .collect()
    }

    pub fn is_identity(&self) -> bool {
        self.pad_before.iter().chain(&self.pad_after).all(|&p| p == 0)
    }
}

/// Edge-replicating or constant fill of a C-order block into a larger one.
fn pad_block<E: Copy>(data: &[E], shape: &[usize], rec: &PadRecord, fill: Option<E>) -> Vec<E> {
    let src = dims3(shape);
    let out_shape = rec.padded_shape(shape);
    let dst = dims3(&out_shape);
    let before = dims3_offsets(&rec.pad_before);
    let mut out = Vec::with_capacity(dst.iter().product());
    let map = |o: usize, a: usize| -> Option<usize> {
        let i = o as isize - before[a] as isize;
        if i >= 0 && (i as usize) < src[a] {
            Some(i as usize)
        } else if fill.is_some() {
            None
        } else {
            Some(i.clamp(0, src[a] as isize - 1) as usize)
        }
    };
    for z in 0..dst[0] {
        let sz = map(z, 0);
        for y in 0..dst[1] {
            let sy = map(y, 1);
            for x in 0..dst[2] {
                let v = match (sz, sy, map(x, 2)) {
                    (Some(a), Some(b), Some(c)) => data[(a * src[1] + b) * src[2] + c],
                    _ => fill.expect("constant fill required outside the source"),
                };
                out.push(v);
            }
        }
    }
    out
}

fn dims3_offsets(v: &[usize]) -> [usize; 3] {
    if v.len() == 2 {
        [0, v[0], v[1]]
    } else {
        [v[0], v[1], v[2]]
    }
}

/// Pads every axis up to a multiple of `m`, split as evenly as possible
/// (the extra voxel goes after). Images replicate their edge.
pub fn pad_to_multiple(vol: &Volume, m: usize) -> (Volume, PadRecord) {
    let rec = PadRecord::for_shape(vol.shape(), m);
    if rec.is_identity() {
        return (vol.clone(), rec);
    }
    let data = pad_block(vol.data(), vol.shape(), &rec, None);
    let out = Volume::new(rec.padded_shape(vol.shape()), vol.spacing().clone(), data)
        .expect("padded shape is consistent");
    (out, rec)
}

/// Label-map counterpart of [`pad_to_multiple`]; pads with background (0).
pub fn pad_labels_to_multiple(lab: &LabelMap, m: usize) -> (LabelMap, PadRecord) {
    let rec = PadRecord::for_shape(lab.shape(), m);
    if rec.is_identity() {
        return (lab.clone(), rec);
    }
    let data = pad_block(lab.data(), lab.shape(), &rec, Some(0));
    let out = LabelMap::new(
        rec.padded_shape(lab.shape()),
        lab.spacing().clone(),
        lab.num_classes(),
        data,
    )
    .expect("padded shape is consistent");
    (out, rec)
}

/// Embeds each of `channels` planes of `shape` into the padded grid,
/// filling the margin with `fill`. Adjoint of [`crop_back`] for `fill = 0`.
pub fn pad_channels<E: Copy>(data: &[E], shape: &[usize], channels: usize, rec: &PadRecord, fill: E) -> Vec<E> {
    let plane: usize = shape.iter().product();
    assert_eq!(plane * channels, data.len(), "channel planes do not match shape");
    let mut out = Vec::with_capacity(rec.padded_shape(shape).iter().product::<usize>() * channels);
    for c in 0..channels {
        out.extend(pad_block(&data[c * plane..(c + 1) * plane], shape, rec, Some(fill)));
    }
    out
}

/// Removes padding recorded in `rec` from a C-order block of `padded_shape`.
///
/// `channels` leading planes are cropped independently, so this also
/// applies to multi-channel network outputs.
pub fn crop_back<E: Copy>(
    data: &[E],
    padded_shape: &[usize],
    channels: usize,
    rec: &PadRecord,
) -> Result<(Vec<E>, Vec<usize>)> {
    if rec.pad_before.len() != padded_shape.len() {
        return Err(Error::DimMismatch {
            expected: padded_shape.len(),
            actual: rec.pad_before.len(),
        });
    }
    let plane: usize = padded_shape.iter().product();
    if plane * channels != data.len() {
        return Err(Error::ShapeMismatch {
            left: padded_shape.to_vec(),
            right: vec![channels, data.len()],
        });
    }
    let size: Vec<usize> = padded_shape
        .iter()
        .enumerate()
        .map(|(a, &n)| n.checked_sub(rec.pad_before[a] + rec.pad_after[a]))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::ShapeMismatch {
            left: padded_shape.to_vec(),
            right: rec.pad_before.clone(),
        })?;
    let mut out = Vec::with_capacity(channels * size.iter().product::<usize>());
    for c in 0..channels {
        let block =
            super::crop_block(&data[c * plane..(c + 1) * plane], padded_shape, &rec.pad_before, &size)?;
        out.extend(block);
    }
    Ok((out, size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Spacing;
    use proptest::prelude::*;

    #[test]
    fn multiple_already_satisfied_is_untouched() {
        let v = Volume::filled(vec![32, 32, 32], Spacing::isotropic(1.0, 3).unwrap(), 1.0).unwrap();
        let (p, rec) = pad_to_multiple(&v, 8);
        assert_eq!(p.shape(), &[32, 32, 32]);
        assert!(rec.is_identity());
    }

    #[test]
    fn ceiling_arithmetic() {
        let v = Volume::filled(vec![33, 8], Spacing::isotropic(1.0, 2).unwrap(), 1.0).unwrap();
        let (p, rec) = pad_to_multiple(&v, 8);
        assert_eq!(p.shape(), &[40, 8]);
        assert_eq!(rec.pad_before, vec![3, 0]);
        assert_eq!(rec.pad_after, vec![4, 0]);
    }

    #[test]
    fn images_replicate_edges_labels_use_background() {
        let sp = Spacing::isotropic(1.0, 2).unwrap();
        let v = Volume::new(vec![1, 2], sp.clone(), vec![3.0, 7.0]).unwrap();
        let (p, _) = pad_to_multiple(&v, 4);
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[0..4], &[3.0, 3.0, 7.0, 7.0]);
        let l = LabelMap::new(vec![1, 2], sp, 3, vec![1, 2]).unwrap();
        let (pl, _) = pad_labels_to_multiple(&l, 4);
        assert_eq!(pl.data().iter().filter(|&&x| x != 0).count(), 2);
    }

    #[test]
    fn pad_channels_round_trips_through_crop_back() {
        let v = Volume::filled(vec![3, 5], Spacing::isotropic(1.0, 2).unwrap(), 0.0).unwrap();
        let (_, rec) = pad_to_multiple(&v, 4);
        let data: Vec<i32> = (1..=30).collect();
        let padded = pad_channels(&data, &[3, 5], 2, &rec, 0);
        assert_eq!(padded.len(), 2 * 4 * 8);
        assert_eq!(padded.iter().sum::<i32>(), data.iter().sum::<i32>());
        let (back, _) = crop_back(&padded, &[4, 8], 2, &rec).unwrap();
        assert_eq!(back, data);
    }

    proptest! {
        #[test]
        fn crop_back_inverts_pad(
            d in 1usize..7, h in 1usize..9, w in 1usize..9, m in 1usize..6, seed in 0u32..1000
        ) {
            let n = d * h * w;
            let data: Vec<f32> = (0..n).map(|i| ((i as u32).wrapping_mul(2654435761u32) ^ seed) as f32).collect();
            let v = Volume::new(vec![d, h, w], Spacing::isotropic(0.7, 3).unwrap(), data).unwrap();
            let (p, rec) = pad_to_multiple(&v, m);
            prop_assert!(p.shape().iter().all(|&s| s % m == 0));
            let (back, shape) = crop_back(p.data(), p.shape(), 1, &rec).unwrap();
            prop_assert_eq!(shape, v.shape().to_vec());
            prop_assert_eq!(back, v.data().to_vec());
        }
    }
}
