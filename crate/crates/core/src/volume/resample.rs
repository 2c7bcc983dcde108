use super::{dims3, LabelMap, Spacing, Volume};
use crate::error::{Error, Result};

/// Number of output voxels along an axis of `n` voxels at spacing `src`
/// when resampled to `dst`: `round(n * src / dst)`, at least one.
pub fn output_size(n: usize, src: f64, dst: f64) -> usize {
    ((n as f64 * src / dst).round() as usize).max(1)
}

/// Continuous source index of output voxel `k` under the voxel-center
/// convention, clamped to `[0, n - 1]`.
#[inline]
fn source_coord(k: usize, src: f64, dst: f64, n: usize) -> f64 {
    let u = (k as f64 + 0.5) * dst / src - 0.5;
    u.clamp(0.0, (n - 1) as f64)
}

/// Linear interpolation taps for every output index along one axis:
/// `(lower index, upper index, weight of upper)`.
pub fn axis_sampling(n: usize, src: f64, dst: f64) -> Vec<(usize, usize, f64)> {
    let m = output_size(n, src, dst);
    (0..m)
        .map(|k| {
            let u = source_coord(k, src, dst, n);
            let i0 = u.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, u - i0 as f64)
        })
        .collect()
}

/// Nearest-voxel index per output position; ties go to the lower index.
fn axis_nearest(n: usize, src: f64, dst: f64, m: usize) -> Vec<usize> {
    (0..m)
        .map(|k| {
            let u = source_coord(k, src, dst, n);
            ((u - 0.5).ceil().max(0.0) as usize).min(n - 1)
        })
        .collect()
}

fn check_target(vol_dim: usize, target: &Spacing) -> Result<()> {
    if target.dim() != vol_dim {
        return Err(Error::DimMismatch {
            expected: vol_dim,
            actual: target.dim(),
        });
    }
    Ok(())
}

/// Axis tables lifted to three axes; 2-D inputs get a singleton leading axis.
fn lifted<T: Clone>(per_axis: Vec<Vec<T>>, unit: T) -> [Vec<T>; 3] {
    let mut it = per_axis.into_iter();
    match it.len() {
        2 => [vec![unit], it.next().unwrap(), it.next().unwrap()],
        _ => [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()],
    }
}

/// Multilinear resampling of an image to `target` spacing.
pub fn resample_image(vol: &Volume, target: &Spacing) -> Result<Volume> {
    check_target(vol.dim(), target)?;
    if vol.spacing() == target {
        return Ok(vol.clone());
    }
    let src = dims3(vol.shape());
    let taps: Vec<_> = (0..vol.dim())
        .map(|a| axis_sampling(vol.shape()[a], vol.spacing()[a], target[a]))
        .collect();
    let [tz, ty, tx] = lifted(taps, (0, 0, 0.0));
    let data = vol.data();
    let mut out = Vec::with_capacity(tz.len() * ty.len() * tx.len());
    let plane = src[1] * src[2];
    for &(z0, z1, wz) in &tz {
        for &(y0, y1, wy) in &ty {
            let r00 = z0 * plane + y0 * src[2];
            let r01 = z0 * plane + y1 * src[2];
            let r10 = z1 * plane + y0 * src[2];
            let r11 = z1 * plane + y1 * src[2];
            for &(x0, x1, wx) in &tx {
                let lerp = |row: usize| {
                    let a = data[row + x0] as f64;
                    let b = data[row + x1] as f64;
                    a + (b - a) * wx
                };
                let c0 = lerp(r00) + (lerp(r01) - lerp(r00)) * wy;
                let c1 = lerp(r10) + (lerp(r11) - lerp(r10)) * wy;
                out.push((c0 + (c1 - c0) * wz) as f32);
            }
        }
    }
    let shape = taps_shape(vol.dim(), &tz, &ty, &tx);
    Volume::new(shape, target.clone(), out)
}

/// Nearest-neighbour resampling of a label map to `target` spacing.
pub fn resample_labels(lab: &LabelMap, target: &Spacing) -> Result<LabelMap> {
    check_target(lab.dim(), target)?;
    if lab.spacing() == target {
        return Ok(lab.clone());
    }
    let shape: Vec<usize> = (0..lab.dim())
        .map(|a| output_size(lab.shape()[a], lab.spacing()[a], target[a]))
        .collect();
    resample_labels_onto(lab, &shape, target)
}

/// Nearest-neighbour resampling onto an explicit grid of `shape` voxels at
/// `target` spacing, sharing the first voxel corner with the source. Used to
/// pull predictions back onto an image's own grid, where rounding the size
/// twice would not return the original shape.
pub fn resample_labels_onto(lab: &LabelMap, shape: &[usize], target: &Spacing) -> Result<LabelMap> {
    check_target(lab.dim(), target)?;
    if shape.len() != lab.dim() {
        return Err(Error::DimMismatch {
            expected: lab.dim(),
            actual: shape.len(),
        });
    }
    if lab.spacing() == target && lab.shape() == shape {
        return Ok(lab.clone());
    }
    let src = dims3(lab.shape());
    let idx: Vec<_> = (0..lab.dim())
        .map(|a| axis_nearest(lab.shape()[a], lab.spacing()[a], target[a], shape[a]))
        .collect();
    let [iz, iy, ix] = lifted(idx, 0);
    let data = lab.data();
    let mut out = Vec::with_capacity(iz.len() * iy.len() * ix.len());
    for &z in &iz {
        for &y in &iy {
            let row = (z * src[1] + y) * src[2];
            out.extend(ix.iter().map(|&x| data[row + x]));
        }
    }
    LabelMap::new(shape.to_vec(), target.clone(), lab.num_classes(), out)
}

fn taps_shape<A, B, C>(dim: usize, z: &[A], y: &[B], x: &[C]) -> Vec<usize> {
    if dim == 2 {
        vec![y.len(), x.len()]
    } else {
        vec![z.len(), y.len(), x.len()]
    }
}

/// Trilinear read of a `[d, h, w]` grid at a continuous index, clamped to the edge.
pub fn sample_linear<T: Copy + Into<f64>>(data: &[T], dims: [usize; 3], coord: [f64; 3]) -> f64 {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut w = [0f64; 3];
    for a in 0..3 {
        let u = coord[a].clamp(0.0, (dims[a] - 1) as f64);
        lo[a] = u.floor() as usize;
        hi[a] = (lo[a] + 1).min(dims[a] - 1);
        w[a] = u - lo[a] as f64;
    }
    let at = |z: usize, y: usize, x: usize| -> f64 { data[(z * dims[1] + y) * dims[2] + x].into() };
    let mut acc = 0.0;
    for (cz, wz) in [(lo[0], 1.0 - w[0]), (hi[0], w[0])] {
        for (cy, wy) in [(lo[1], 1.0 - w[1]), (hi[1], w[1])] {
            for (cx, wx) in [(lo[2], 1.0 - w[2]), (hi[2], w[2])] {
                let weight = wz * wy * wx;
                if weight != 0.0 {
                    acc += weight * at(cz, cy, cx);
                }
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp(v: &[f64]) -> Spacing {
        Spacing::new(v.to_vec()).unwrap()
    }

    /// Independent scalar interpolation: physical centers, explicit neighbours.
    fn oracle_linear_1d(values: &[f64], src: f64, dst: f64) -> Vec<f64> {
        let n_out = (values.len() as f64 * src / dst).round().max(1.0) as usize;
        let centers: Vec<f64> = (0..values.len()).map(|j| (j as f64 + 0.5) * src).collect();
        (0..n_out)
            .map(|k| {
                let p = (k as f64 + 0.5) * dst;
                if p <= centers[0] {
                    return values[0];
                }
                if p >= *centers.last().unwrap() {
                    return *values.last().unwrap();
                }
                let j = centers.iter().rposition(|&c| c <= p).unwrap();
                let t = (p - centers[j]) / (centers[j + 1] - centers[j]);
                values[j] * (1.0 - t) + values[j + 1] * t
            })
            .collect()
    }

    #[test]
    fn identity_spacing_is_exact() {
        let v = Volume::new(
            vec![2, 3, 4],
            sp(&[1.0, 1.0, 1.0]),
            (0..24).map(|i| (i as f32).sin()).collect(),
        )
        .unwrap();
        let r = resample_image(&v, &sp(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn constant_volume_stays_constant() {
        let v = Volume::filled(vec![5, 7, 3], sp(&[0.5, 1.3, 2.0]), 3.25).unwrap();
        let r = resample_image(&v, &sp(&[0.9, 0.4, 1.1])).unwrap();
        assert!(r.data().iter().all(|&x| (x - 3.25).abs() < 1e-6));
        assert_eq!(r.shape(), &[3, 23, 5]);
    }

    #[test]
    fn profile_matches_scalar_oracle() {
        // [0, 2] at 1 mm -> 0.5 mm, as a 1x2 image along the last axis.
        let v = Volume::new(vec![1, 2], sp(&[1.0, 1.0]), vec![0.0, 2.0]).unwrap();
        let r = resample_image(&v, &sp(&[1.0, 0.5])).unwrap();
        let expected = oracle_linear_1d(&[0.0, 2.0], 1.0, 0.5);
        assert_eq!(expected, vec![0.0, 0.5, 1.5, 2.0]);
        let got: Vec<f64> = r.data().iter().map(|&x| x as f64).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn longer_profile_matches_scalar_oracle() {
        let values = [0.0, 1.0, 4.0, 2.0, -1.0, 3.0, 5.0];
        for &dst in &[0.3, 0.7, 1.6, 2.5] {
            let v = Volume::new(
                vec![1, values.len()],
                sp(&[1.0, 1.0]),
                values.iter().map(|&x| x as f32).collect(),
            )
            .unwrap();
            let r = resample_image(&v, &sp(&[1.0, dst])).unwrap();
            let expected = oracle_linear_1d(&values, 1.0, dst);
            assert_eq!(r.len(), expected.len());
            for (g, e) in r.data().iter().zip(&expected) {
                assert!((*g as f64 - e).abs() < 1e-5, "{g} vs {e} at dst {dst}");
            }
        }
    }

    #[test]
    fn checkerboard_matches_nearest_center_oracle() {
        let n = 8;
        let data: Vec<u8> = (0..n * n).map(|i| (((i / n) + (i % n)) % 2) as u8).collect();
        let lab = LabelMap::new(vec![n, n], sp(&[1.0, 1.0]), 2, data.clone()).unwrap();
        for &t in &[2.0, 1.5, 0.7, 3.0] {
            let out = resample_labels(&lab, &sp(&[t, t])).unwrap();
            let m = output_size(n, 1.0, t);
            assert_eq!(out.shape(), &[m, m]);
            // Exhaustive nearest-center search; first minimum wins ties.
            let nearest = |k: usize| {
                let p = (k as f64 + 0.5) * t;
                (0..n)
                    .min_by(|&a, &b| {
                        let da = ((a as f64 + 0.5) - p).abs();
                        let db = ((b as f64 + 0.5) - p).abs();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap()
            };
            for y in 0..m {
                for x in 0..m {
                    let e = data[nearest(y) * n + nearest(x)];
                    assert_eq!(out.data()[y * m + x], e, "t={t} at ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let v = Volume::filled(vec![2, 2], sp(&[1.0, 1.0]), 0.0).unwrap();
        assert!(resample_image(&v, &sp(&[1.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn sample_linear_interpolates_between_centers() {
        let data = [0.0f32, 10.0];
        assert_eq!(sample_linear(&data, [1, 1, 2], [0.0, 0.0, 0.25]), 2.5);
        assert_eq!(sample_linear(&data, [1, 1, 2], [0.0, 0.0, 5.0]), 10.0);
    }
}
