//! Soft Dice plus cross-entropy over softmax probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::segnet::Tensor;

/// Smoothing added to numerator and denominator of each soft Dice.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dice: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { dice: 1.0, ce: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.dice < 0.0 || self.ce < 0.0 || (self.dice == 0.0 && self.ce == 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative and not both zero, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: f64,
    /// `1 - mean foreground soft Dice`.
    pub dice_term: f64,
    /// Mean voxelwise cross-entropy.
    pub ce_term: f64,
    /// `d loss / d logits`, one tensor per batch element (empty unless requested).
    pub grads: Vec<Tensor<T>>,
}

fn softmax_into(logits: &[f64], probs: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, &z) in probs.iter_mut().zip(logits) {
        *p = (z - max).exp();
        sum += *p;
    }
    probs.iter_mut().for_each(|p| *p /= sum);
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits[k] - max - lse
}

/// Batch loss: `w_dice * (1 - mean_c softDice_c) + w_ce * mean CE`.
///
/// Soft Dice sums intersections over the whole batch and excludes the
/// background class; cross-entropy averages over every voxel of the batch.
pub fn combined_loss<T: Real>(
    logits: &[&Tensor<T>],
    labels: &[&[u8]],
    weights: LossWeights,
    need_grad: bool,
) -> Result<LossOutput<T>> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::Empty("loss needs matching, non-empty logits and labels"));
    }
    let k = logits[0].channels;
    let fg = k.saturating_sub(1).max(1) as f64;
    let mut total_voxels = 0usize;
    for (z, y) in logits.iter().zip(labels) {
        if z.channels != k || z.voxels() != y.len() {
            return Err(Error::ShapeMismatch {
                left: vec![z.channels, z.voxels()],
                right: vec![k, y.len()],
            });
        }
        if let Some(&bad) = y.iter().find(|&&l| l as usize >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad as u32,
                num_classes: k,
            });
        }
        total_voxels += y.len();
    }
    let n = total_voxels as f64;

    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut gsum = vec![0.0; k];
    let mut ce = 0.0;
    let mut zbuf = vec![0.0; k];
    let mut pbuf = vec![0.0; k];
    for (z, y) in logits.iter().zip(labels) {
        let v = z.voxels();
        for (i, &lab) in y.iter().enumerate() {
            for c in 0..k {
                zbuf[c] = z.data[c * v + i].to_f64();
            }
            softmax_into(&zbuf, &mut pbuf);
            ce -= log_softmax_at(&zbuf, lab as usize);
            for c in 0..k {
                psum[c] += pbuf[c];
            }
            inter[lab as usize] += pbuf[lab as usize];
            gsum[lab as usize] += 1.0;
        }
    }
    let ce_term = ce / n;
    let dice: Vec<f64> = (0..k)
        .map(|c| (2.0 * inter[c] + DICE_EPS) / (psum[c] + gsum[c] + DICE_EPS))
        .collect();
    let dice_term = 1.0 - dice[1..].iter().sum::<f64>() / fg;
    let loss = weights.dice * dice_term + weights.ce * ce_term;

    let mut grads = Vec::new();
    if need_grad {
        let mut a = vec![0.0; k];
        for (z, y) in logits.iter().zip(labels) {
            let v = z.voxels();
            let mut g = Tensor::zeros(k, z.dims);
            for (i, &lab) in y.iter().enumerate() {
                for c in 0..k {
                    zbuf[c] = z.data[c * v + i].to_f64();
                }
                softmax_into(&zbuf, &mut pbuf);
                // a_c = d loss / d p_c from the Dice term.
                a[0] = 0.0;
                for c in 1..k {
                    let s = psum[c] + gsum[c] + DICE_EPS;
                    let gc = if lab as usize == c { 1.0 } else { 0.0 };
                    a[c] = -weights.dice / fg * (2.0 * gc * s - (2.0 * inter[c] + DICE_EPS)) / (s * s);
                }
                let mean_a: f64 = (0..k).map(|c| a[c] * pbuf[c]).sum();
                for c in 0..k {
                    let onehot = if lab as usize == c { 1.0 } else { 0.0 };
                    let d = pbuf[c] * (a[c] - mean_a) + weights.ce * (pbuf[c] - onehot) / n;
                    g.data[c * v + i] = T::from_f64(d);
                }
            }
            grads.push(g);
        }
    }
    Ok(LossOutput {
        loss,
        dice_term,
        ce_term,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar re-derivation of the loss straight from the definitions.
    fn oracle(logits: &[Vec<Vec<f64>>], labels: &[Vec<u8>], w: LossWeights) -> f64 {
        let k = logits[0].len();
        let mut inter = vec![0.0; k];
        let mut p_tot = vec![0.0; k];
        let mut g_tot = vec![0.0; k];
        let mut ce = 0.0;
        let mut count = 0.0;
        for (z, y) in logits.iter().zip(labels) {
            for (i, &lab) in y.iter().enumerate() {
                let denom: f64 = (0..k).map(|c| z[c][i].exp()).sum();
                for c in 0..k {
                    let p = z[c][i].exp() / denom;
                    p_tot[c] += p;
                    if c == lab as usize {
                        inter[c] += p;
                        g_tot[c] += 1.0;
                        ce += -p.ln();
                    }
                }
                count += 1.0;
            }
        }
        let mut dsum = 0.0;
        for c in 1..k {
            dsum += (2.0 * inter[c] + DICE_EPS) / (p_tot[c] + g_tot[c] + DICE_EPS);
        }
        w.dice * (1.0 - dsum / (k - 1) as f64) + w.ce * ce / count
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let v = (i as u64 + 1).wrapping_mul(6364136223846793005).wrapping_add(seed);
                ((v >> 33) % 4000) as f64 / 1000.0 - 2.0
            })
            .collect()
    }

    #[test]
    fn uniform_binary_logits_give_ln2() {
        let z = Tensor::<f64>::zeros(2, [1, 2, 2]);
        let y = [0u8, 1, 0, 1];
        let out = combined_loss(&[&z], &[&y], LossWeights::default(), false).unwrap();
        assert!((out.ce_term - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_is_near_zero() {
        let y: Vec<u8> = (0..27).map(|i| (i % 3) as u8).collect();
        let mut z = Tensor::<f64>::zeros(3, [3, 3, 3]);
        for (i, &l) in y.iter().enumerate() {
            z.data[l as usize * 27 + i] = 30.0;
        }
        let out = combined_loss(&[&z], &[&y], LossWeights::default(), false).unwrap();
        assert!(out.loss < 0.01, "{}", out.loss);
    }

    #[test]
    fn random_batch_matches_scalar_oracle() {
        let (k, v) = (3, 20);
        let raw: Vec<Vec<f64>> = (0..2).map(|b| pseudo(k * v, b + 11)).collect();
        let labels: Vec<Vec<u8>> = (0..2)
            .map(|b| pseudo(v, b + 40).iter().map(|x| ((x + 2.0) * 10.0) as u8 % k as u8).collect())
            .collect();
        let tensors: Vec<Tensor<f64>> = raw.iter().map(|r| Tensor::from_vec(k, [1, 4, 5], r.clone())).collect();
        let nested: Vec<Vec<Vec<f64>>> =
            raw.iter().map(|r| (0..k).map(|c| r[c * v..(c + 1) * v].to_vec()).collect()).collect();
        let w = LossWeights { dice: 0.7, ce: 1.3 };
        let refs: Vec<&Tensor<f64>> = tensors.iter().collect();
        let labs: Vec<&[u8]> = labels.iter().map(|l| l.as_slice()).collect();
        let got = combined_loss(&refs, &labs, w, false).unwrap().loss;
        let want = oracle(&nested, &labels, w);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (k, v) = (3, 12);
        let base = pseudo(k * v, 5);
        let y: Vec<u8> = (0..v).map(|i| (i % k) as u8).collect();
        let w = LossWeights::default();
        let z = Tensor::from_vec(k, [1, 3, 4], base.clone());
        let out = combined_loss(&[&z], &[&y], w, true).unwrap();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            let mut m = base.clone();
            m[i] -= h;
            let lp = combined_loss(&[&Tensor::from_vec(k, [1, 3, 4], p)], &[&y], w, false).unwrap().loss;
            let lm = combined_loss(&[&Tensor::from_vec(k, [1, 3, 4], m)], &[&y], w, false).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - out.grads[0].data[i]).abs() < 1e-7, "{i}: {fd} vs {}", out.grads[0].data[i]);
        }
    }

    #[test]
    fn batch_order_does_not_matter() {
        let a = Tensor::from_vec(2, [1, 2, 3], pseudo(12, 1));
        let b = Tensor::from_vec(2, [1, 2, 3], pseudo(12, 2));
        let ya = [0u8, 1, 1, 0, 1, 0];
        let yb = [1u8, 1, 0, 0, 0, 1];
        let w = LossWeights::default();
        let l1 = combined_loss(&[&a, &b], &[&ya, &yb], w, false).unwrap().loss;
        let l2 = combined_loss(&[&b, &a], &[&yb, &ya], w, false).unwrap().loss;
        assert!((l1 - l2).abs() < 1e-14);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let z = Tensor::<f64>::zeros(2, [1, 1, 2]);
        let err = combined_loss(&[&z], &[&[0u8, 2]], LossWeights::default(), false).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 2, num_classes: 2 }));
    }
}
