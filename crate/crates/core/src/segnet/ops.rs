//! Layer kernels with explicit backward passes.

use super::tensor::Tensor;
use crate::real::Real;

/// Target number of elements in one im2col buffer.
const COLS_BUDGET: usize = 1 << 17;

fn rows_per_chunk(cin_k: usize, dims: [usize; 3]) -> usize {
    let row = cin_k * dims[2];
    (COLS_BUDGET / row.max(1)).clamp(1, dims[0] * dims[1])
}

/// Gathers `[cin * kvol, rows * w]` patches for output rows `r0..r1`
/// (a row is one `(z, y)` pair). Zero padding outside the volume.
fn im2col<T: Real>(x: &Tensor<T>, kernel: [usize; 3], r0: usize, r1: usize, cols: &mut [T]) {
    let [d, h, w] = x.dims;
    let [kd, kh, kw] = kernel;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let len = (r1 - r0) * w;
    let mut row_idx = 0;
    for c in 0..x.channels {
        let src = x.channel(c);
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut cols[row_idx * len..(row_idx + 1) * len];
                    row_idx += 1;
                    let dx = kx as isize - pw;
                    // Valid output x range for which x + dx stays in bounds.
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    for (i, r) in (r0..r1).enumerate() {
                        let out = &mut dst[i * w..(i + 1) * w];
                        let z = (r / h) as isize + kz as isize - pd;
                        let y = (r % h) as isize + ky as isize - ph;
                        if z < 0 || z >= d as isize || y < 0 || y >= h as isize || x_lo >= x_hi {
                            out.fill(T::zero());
                            continue;
                        }
                        let base = (z as usize * h + y as usize) * w;
                        out[..x_lo].fill(T::zero());
                        out[x_hi..].fill(T::zero());
                        let s0 = (x_lo as isize + dx) as usize;
                        out[x_lo..x_hi].copy_from_slice(&src[base + s0..base + s0 + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column buffer back onto the input gradient.
fn col2im<T: Real>(cols: &[T], kernel: [usize; 3], r0: usize, r1: usize, dx_t: &mut Tensor<T>) {
    let [d, h, w] = dx_t.dims;
    let [kd, kh, kw] = kernel;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let len = (r1 - r0) * w;
    let mut row_idx = 0;
    for c in 0..dx_t.channels {
        let dst = dx_t.channel_mut(c);
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &cols[row_idx * len..(row_idx + 1) * len];
                    row_idx += 1;
                    let dx = kx as isize - pw;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for (i, r) in (r0..r1).enumerate() {
                        let z = (r / h) as isize + kz as isize - pd;
                        let y = (r % h) as isize + ky as isize - ph;
                        if z < 0 || z >= d as isize || y < 0 || y >= h as isize {
                            continue;
                        }
                        let base = (z as usize * h + y as usize) * w;
                        let s0 = (x_lo as isize + dx) as usize;
                        let seg = &src[i * w + x_lo..i * w + x_hi];
                        for (o, &g) in dst[base + s0..base + s0 + seg.len()].iter_mut().zip(seg) {
                            *o += g;
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(kernel: [usize; 3]) -> bool {
    kernel == [1, 1, 1]
}

/// Same-size, stride-1, zero-padded convolution. `weight` is `[cout, cin, k...]`.
pub fn conv_forward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    cout: usize,
    kernel: [usize; 3],
) -> Tensor<T> {
    let kvol: usize = kernel.iter().product();
    let cin_k = x.channels * kvol;
    debug_assert_eq!(weight.len(), cout * cin_k);
    let v = x.voxels();
    let mut out = Tensor::zeros(cout, x.dims);
    if is_pointwise(kernel) {
        T::gemm(
            cout, cin_k, v, T::one(), weight, cin_k as isize, 1, &x.data, v as isize, 1,
            T::zero(), &mut out.data, v as isize, 1,
        );
    } else {
        let rows = x.dims[0] * x.dims[1];
        let step = rows_per_chunk(cin_k, x.dims);
        let mut cols = vec![T::zero(); cin_k * step * x.dims[2]];
        let mut r0 = 0;
        while r0 < rows {
            let r1 = (r0 + step).min(rows);
            let len = (r1 - r0) * x.dims[2];
            let buf = &mut cols[..cin_k * len];
            im2col(x, kernel, r0, r1, buf);
            let off = r0 * x.dims[2];
            T::gemm(
                cout, cin_k, len, T::one(), weight, cin_k as isize, 1, buf, len as isize, 1,
                T::zero(), &mut out.data[off..], v as isize, 1,
            );
            r0 = r1;
        }
    }
    for (c, &b) in bias.iter().enumerate() {
        if b != T::zero() {
            out.channel_mut(c).iter_mut().for_each(|o| *o += b);
        }
    }
    out
}

/// Accumulates weight/bias gradients; returns the input gradient when asked.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    kernel: [usize; 3],
    d_weight: &mut [T],
    d_bias: &mut [T],
    need_dx: bool,
) -> Option<Tensor<T>> {
    let cout = dy.channels;
    let kvol: usize = kernel.iter().product();
    let cin_k = x.channels * kvol;
    let v = x.voxels();
    for (c, db) in d_bias.iter_mut().enumerate() {
        *db += dy.channel(c).iter().copied().sum::<T>();
    }
    let mut dx = need_dx.then(|| Tensor::zeros(x.channels, x.dims));
    if is_pointwise(kernel) {
        // dW += dY X^T ; dX = W^T dY
        T::gemm(
            cout, v, cin_k, T::one(), &dy.data, v as isize, 1, &x.data, 1, v as isize,
            T::one(), d_weight, cin_k as isize, 1,
        );
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                cin_k, cout, v, T::one(), weight, 1, cin_k as isize, &dy.data, v as isize, 1,
                T::zero(), &mut dx.data, v as isize, 1,
            );
        }
        return dx;
    }
    let rows = x.dims[0] * x.dims[1];
    let step = rows_per_chunk(cin_k, x.dims);
    let mut cols = vec![T::zero(); cin_k * step * x.dims[2]];
    let mut dcols = if need_dx { vec![T::zero(); cols.len()] } else { Vec::new() };
    let mut r0 = 0;
    while r0 < rows {
        let r1 = (r0 + step).min(rows);
        let len = (r1 - r0) * x.dims[2];
        let off = r0 * x.dims[2];
        let buf = &mut cols[..cin_k * len];
        im2col(x, kernel, r0, r1, buf);
        T::gemm(
            cout, len, cin_k, T::one(), &dy.data[off..], v as isize, 1, buf, 1, len as isize,
            T::one(), d_weight, cin_k as isize, 1,
        );
        if let Some(dx) = dx.as_mut() {
            let dbuf = &mut dcols[..cin_k * len];
            T::gemm(
                cin_k, cout, len, T::one(), weight, 1, cin_k as isize, &dy.data[off..], v as isize,
                1, T::zero(), dbuf, len as isize, 1,
            );
            col2im(dbuf, kernel, r0, r1, dx);
        }
        r0 = r1;
    }
    dx
}

pub const NORM_EPS: f64 = 1e-5;

/// Per-channel statistics kept for the instance-norm backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Instance normalisation with affine scale/shift. A constant channel
/// normalises to exactly zero.
pub fn instance_norm_forward<T: Real>(
    x: &Tensor<T>,
    scale: &[T],
    shift: &[T],
    keep: bool,
) -> (Tensor<T>, Option<NormCache<T>>) {
    let n = T::from_f64(x.voxels() as f64);
    let eps = T::from_f64(NORM_EPS);
    let mut out = Tensor::zeros(x.channels, x.dims);
    let mut normalized = keep.then(|| Tensor::zeros(x.channels, x.dims));
    let mut inv_stds = Vec::with_capacity(x.channels);
    for c in 0..x.channels {
        let src = x.channel(c);
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv_std = (var + eps).sqrt().recip();
        inv_stds.push(inv_std);
        let (g, b) = (scale[c], shift[c]);
        let dst = out.channel_mut(c);
        match normalized.as_mut() {
            Some(nt) => {
                let nd = nt.channel_mut(c);
                for ((o, h), &v) in dst.iter_mut().zip(nd.iter_mut()).zip(src) {
                    *h = (v - mean) * inv_std;
                    *o = g * *h + b;
                }
            }
            None => {
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = g * ((v - mean) * inv_std) + b;
                }
            }
        }
    }
    let cache = normalized.map(|normalized| NormCache {
        normalized,
        inv_std: inv_stds,
    });
    (out, cache)
}

pub fn instance_norm_backward<T: Real>(
    cache: &NormCache<T>,
    scale: &[T],
    dy: &Tensor<T>,
    d_scale: &mut [T],
    d_shift: &mut [T],
) -> Tensor<T> {
    let xh = &cache.normalized;
    let n = T::from_f64(xh.voxels() as f64);
    let mut dx = Tensor::zeros(dy.channels, dy.dims);
    for c in 0..dy.channels {
        let g = dy.channel(c);
        let h = xh.channel(c);
        let mut sum_g = T::zero();
        let mut sum_gh = T::zero();
        for (&gi, &hi) in g.iter().zip(h) {
            sum_g += gi;
            sum_gh += gi * hi;
        }
        d_scale[c] += sum_gh;
        d_shift[c] += sum_g;
        // dx = gamma * inv_std / n * (n * g - sum(g) - h * sum(g * h))
        let k = scale[c] * cache.inv_std[c] / n;
        for ((o, &gi), &hi) in dx.channel_mut(c).iter_mut().zip(g).zip(h) {
            *o = k * (n * gi - sum_g - hi * sum_gh);
        }
    }
    dx
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient through ReLU given its output.
pub fn relu_backward<T: Real>(out: &Tensor<T>, dy: &mut Tensor<T>) {
    for (g, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Max pooling with window == stride == `factor`; returns argmax offsets.
pub fn max_pool_forward<T: Real>(x: &Tensor<T>, factor: [usize; 3]) -> (Tensor<T>, Vec<u32>) {
    let [d, h, w] = x.dims;
    let od = [d / factor[0], h / factor[1], w / factor[2]];
    let mut out = Tensor::zeros(x.channels, od);
    let mut arg = vec![0u32; out.data.len()];
    let ov = out.voxels();
    for c in 0..x.channels {
        let src = x.channel(c);
        for z in 0..od[0] {
            for y in 0..od[1] {
                for xx in 0..od[2] {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    for a in 0..factor[0] {
                        for b in 0..factor[1] {
                            let row = ((z * factor[0] + a) * h + y * factor[1] + b) * w;
                            for e in 0..factor[2] {
                                let i = row + xx * factor[2] + e;
                                if src[i] > best {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    let o = (z * od[1] + y) * od[2] + xx;
                    out.data[c * ov + o] = best;
                    arg[c * ov + o] = best_i as u32;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward<T: Real>(
    dy: &Tensor<T>,
    arg: &[u32],
    input_dims: [usize; 3],
) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.channels, input_dims);
    let ov = dy.voxels();
    for c in 0..dy.channels {
        let dst = dx.channel_mut(c);
        for o in 0..ov {
            dst[arg[c * ov + o] as usize] += dy.data[c * ov + o];
        }
    }
    dx
}

/// Nearest-neighbour upsampling by `factor`.
pub fn upsample_forward<T: Real>(x: &Tensor<T>, factor: [usize; 3]) -> Tensor<T> {
    let [d, h, w] = x.dims;
    let od = [d * factor[0], h * factor[1], w * factor[2]];
    let mut out = Tensor::zeros(x.channels, od);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..od[0] {
            for y in 0..od[1] {
                let srow = ((z / factor[0]) * h + y / factor[1]) * w;
                let drow = (z * od[1] + y) * od[2];
                for xx in 0..od[2] {
                    dst[drow + xx] = src[srow + xx / factor[2]];
                }
            }
        }
    }
    out
}

pub fn upsample_backward<T: Real>(dy: &Tensor<T>, factor: [usize; 3]) -> Tensor<T> {
    let od = dy.dims;
    let id = [od[0] / factor[0], od[1] / factor[1], od[2] / factor[2]];
    let mut dx = Tensor::zeros(dy.channels, id);
    for c in 0..dy.channels {
        let src = dy.channel(c);
        let dst = dx.channel_mut(c);
        for z in 0..od[0] {
            for y in 0..od[1] {
                let drow = ((z / factor[0]) * id[1] + y / factor[1]) * id[2];
                let srow = (z * od[1] + y) * od[2];
                for xx in 0..od[2] {
                    dst[drow + xx / factor[2]] += src[srow + xx];
                }
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.dims, b.dims, "concat requires matching spatial dims");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(a.channels + b.channels, a.dims, data)
}

/// Splits a concatenated gradient into its `[a, b]` parts.
pub fn split<T: Real>(dy: Tensor<T>, a_channels: usize) -> (Tensor<T>, Tensor<T>) {
    let cut = a_channels * dy.voxels();
    let mut data = dy.data;
    let b = data.split_off(cut);
    (
        Tensor::from_vec(a_channels, dy.dims, data),
        Tensor::from_vec(dy.channels - a_channels, dy.dims, b),
    )
}
