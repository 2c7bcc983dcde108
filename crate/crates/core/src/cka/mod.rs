//! Linear CKA on centred activations, CKA maps across layers and the
//! joint spacing protocol.

mod capture;
mod protocol;

use serde::{Deserialize, Serialize};

pub use capture::{capture_activations, capture_grams, CaptureSpec, CropSpec};
pub use protocol::{default_grid, run_cka_protocol, CkaBundle, CkaProtocolConfig};

use crate::error::{Error, Result};
use crate::real::Real;

/// `n x p` activations (row-major), one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub n: usize,
    pub p: usize,
    pub data: Vec<f64>,
    pub layer: String,
    pub tag: String,
}

impl ActivationMatrix {
    pub fn new(n: usize, p: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * p {
            return Err(Error::ShapeMismatch {
                left: vec![n, p],
                right: vec![data.len()],
            });
        }
        Ok(Self {
            n,
            p,
            data,
            layer: String::new(),
            tag: String::new(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    /// `X X^T`.
    pub fn gram(&self) -> Gram {
        let n = self.n;
        let mut k = vec![0.0; n * n];
        f64::gemm(
            n, self.p, n, 1.0, &self.data, self.p as isize, 1, &self.data, 1, self.p as isize, 0.0, &mut k,
            n as isize, 1,
        );
        Gram { n, k }
    }
}

/// Subtracts column means; needs at least two rows.
pub fn center(mut x: ActivationMatrix) -> Result<ActivationMatrix> {
    if x.n < 2 {
        return Err(Error::Config(format!("centering needs n >= 2 examples, got {}", x.n)));
    }
    let mut mean = vec![0.0; x.p];
    for i in 0..x.n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= x.n as f64);
    for row in x.data.chunks_exact_mut(x.p.max(1)) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    Ok(x)
}

/// `n x n` Gram matrix of centred activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gram {
    pub n: usize,
    pub k: Vec<f64>,
}

/// `tr(K L)` for symmetric `K`, `L`.
pub fn hsic(k: &Gram, l: &Gram) -> Result<f64> {
    if k.n != l.n {
        return Err(Error::DimMismatch {
            expected: k.n,
            actual: l.n,
        });
    }
    Ok(k.k.iter().zip(&l.k).map(|(a, b)| a * b).sum())
}

/// `||X^T Y||_F^2`, the feature-space form of [`hsic`].
pub fn hsic_features(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64> {
    if x.n != y.n {
        return Err(Error::DimMismatch {
            expected: x.n,
            actual: y.n,
        });
    }
    let mut c = vec![0.0; x.p * y.p];
    f64::gemm(
        x.p, x.n, y.p, 1.0, &x.data, 1, x.p as isize, &y.data, y.p as isize, 1, 0.0, &mut c, y.p as isize, 1,
    );
    Ok(c.iter().map(|v| v * v).sum())
}

/// CKA from Gram matrices; a layer with zero self-similarity scores 0.
pub fn cka_from_grams(k: &Gram, l: &Gram) -> Result<f64> {
    let kl = hsic(k, l)?;
    let kk = hsic(k, k)?;
    let ll = hsic(l, l)?;
    if kk <= 0.0 || ll <= 0.0 {
        return Ok(0.0);
    }
    Ok((kl / (kk.sqrt() * ll.sqrt())).clamp(0.0, 1.0))
}

/// `HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L))` on centred inputs.
pub fn linear_cka(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64> {
    if x.n != y.n {
        return Err(Error::DimMismatch {
            expected: x.n,
            actual: y.n,
        });
    }
    cka_from_grams(&x.gram(), &y.gram())
}

/// Layer-by-layer CKA between two networks (or one network with itself).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaMap {
    pub tag_a: String,
    pub tag_b: String,
    pub layers: Vec<String>,
    /// `values[i][j] = CKA(layer i of a, layer j of b)`.
    pub values: Vec<Vec<f64>>,
    /// Layers whose activations were identically zero (CKA set to 0).
    pub dead_layers: Vec<String>,
}

impl CkaMap {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn transpose(&self) -> CkaMap {
        let n = self.len();
        CkaMap {
            tag_a: self.tag_b.clone(),
            tag_b: self.tag_a.clone(),
            layers: self.layers.clone(),
            values: (0..n).map(|i| (0..n).map(|j| self.values[j][i]).collect()).collect(),
            dead_layers: self.dead_layers.clone(),
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.values[i][i]).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer");
        for l in &self.layers {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for (name, row) in self.layers.iter().zip(&self.values) {
            s.push_str(name);
            for v in row {
                s.push_str(&format!(",{v:.8}"));
            }
            s.push('\n');
        }
        s
    }
}

/// CKA map between precomputed Gram matrices of two networks.
pub fn cka_map_grams(a: &[Gram], b: &[Gram], layers: &[String], tag_a: &str, tag_b: &str) -> Result<CkaMap> {
    if a.len() != b.len() || a.len() != layers.len() {
        return Err(Error::Config("CKA map inputs disagree on the layer list".into()));
    }
    let mut dead = Vec::new();
    for (i, (ga, gb)) in a.iter().zip(b).enumerate() {
        if hsic(ga, ga)? <= 0.0 || hsic(gb, gb)? <= 0.0 {
            dead.push(layers[i].clone());
        }
    }
    let values = a
        .iter()
        .map(|ga| b.iter().map(|gb| cka_from_grams(ga, gb)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(CkaMap {
        tag_a: tag_a.into(),
        tag_b: tag_b.into(),
        layers: layers.to_vec(),
        values,
        dead_layers: dead,
    })
}

/// `entry (i, j) = linear_cka(a[i], b[j])`.
pub fn cka_map(a: &[ActivationMatrix], b: &[ActivationMatrix]) -> Result<CkaMap> {
    let n = a.first().map(|m| m.n).unwrap_or(0);
    if a.iter().chain(b).any(|m| m.n != n) {
        return Err(Error::Config("all activation matrices must share n".into()));
    }
    let ga: Vec<Gram> = a.iter().map(|m| m.gram()).collect();
    let gb: Vec<Gram> = b.iter().map(|m| m.gram()).collect();
    let layers: Vec<String> = a.iter().map(|m| m.layer.clone()).collect();
    let tag = |m: &[ActivationMatrix]| m.first().map(|x| x.tag.clone()).unwrap_or_default();
    cka_map_grams(&ga, &gb, &layers, &tag(a), &tag(b))
}

/// Per-entry least-squares slope of CKA against spacing.
pub fn cka_slope(spacings: &[f64], maps: &[CkaMap]) -> Result<Vec<Vec<f64>>> {
    if spacings.len() < 2 || spacings.len() != maps.len() {
        return Err(Error::Config("slope needs at least two spacings, one map each".into()));
    }
    let n = maps[0].len();
    if maps.iter().any(|m| m.len() != n) {
        return Err(Error::Config("maps differ in size".into()));
    }
    let mx = spacings.iter().sum::<f64>() / spacings.len() as f64;
    let sxx: f64 = spacings.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return Err(Error::Config("spacings must not all be equal".into()));
    }
    Ok((0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let my = maps.iter().map(|m| m.values[i][j]).sum::<f64>() / maps.len() as f64;
                    spacings
                        .iter()
                        .zip(maps)
                        .map(|(x, m)| (x - mx) * (m.values[i][j] - my))
                        .sum::<f64>()
                        / sxx
                })
                .collect()
        })
        .collect())
}
