use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{center, ActivationMatrix, Gram};
use crate::error::{Error, Result};
use crate::evaluation::Model;
use crate::segnet::{LayerInfo, Tensor};
use crate::volume::{dims3, sample_linear, Spacing, Volume};

/// Physical region whose activations are compared, and the reference
/// spacing of the grid they are resampled onto.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    /// Crop centre in mm, measured from the image's first voxel corner.
    pub center_mm: Vec<f64>,
    /// Edge length of the cubic crop in mm.
    pub extent_mm: f64,
    pub reference_spacing: f64,
}

impl CropSpec {
    /// A crop centred in an image of the given physical extent.
    pub fn centered(image_extent_mm: &[f64], extent_mm: f64, reference_spacing: f64) -> Self {
        Self {
            center_mm: image_extent_mm.iter().map(|e| 0.5 * e).collect(),
            extent_mm,
            reference_spacing,
        }
    }

    fn check(&self, image_extent_mm: &[f64]) -> Result<()> {
        let tol = 1e-9;
        let outside = self.center_mm.len() != image_extent_mm.len()
            || self
                .center_mm
                .iter()
                .zip(image_extent_mm)
                .any(|(&c, &e)| c - 0.5 * self.extent_mm < -tol || c + 0.5 * self.extent_mm > e + tol);
        if outside || !(self.extent_mm > 0.0 && self.reference_spacing > 0.0) {
            return Err(Error::CropOutside {
                crop_mm: self
                    .center_mm
                    .iter()
                    .flat_map(|c| [c - 0.5 * self.extent_mm, c + 0.5 * self.extent_mm])
                    .collect(),
                extent_mm: image_extent_mm.to_vec(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureSpec {
    pub crop: CropSpec,
    /// Context around the crop fed to the network, in mm per side.
    pub margin_mm: f64,
    /// Layers with more features use a fixed random subset of this size.
    pub feature_cap: usize,
    pub seed: u64,
    /// Layer names to capture; all convolutions and nonlinearities if `None`.
    pub layers: Option<Vec<String>>,
}

/// Per-axis geometry lifted to three axes; 2-D inputs have a flat depth axis.
struct Grid {
    real: [bool; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dims: [usize; 3],
}

struct LayerPlan {
    info: LayerInfo,
    /// Continuous feature-map index of every reference-grid position, per axis.
    coords: [Vec<f64>; 3],
    features: Vec<usize>,
    rows: Vec<f64>,
}

fn lift(v: &[f64], fill: f64) -> [f64; 3] {
    if v.len() == 2 {
        [fill, v[0], v[1]]
    } else {
        [v[0], v[1], v[2]]
    }
}

fn layer_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, so the subset depends only on (seed, layer).
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed
}

/// Network-input grid at spacing `r` covering the crop plus margin; the
/// voxel count per axis is rounded up to the network's divisibility.
fn input_grid(model: &Model, r: &Spacing, spec: &CaptureSpec) -> Grid {
    let dim = r.dim();
    let pool = model.checkpoint.unet.pool3();
    let levels = model.checkpoint.unet.levels;
    let rs = lift(r.as_slice(), 1.0);
    let center = lift(&spec.crop.center_mm, 0.0);
    let mut g = Grid {
        real: [dim == 3, true, true],
        spacing: rs,
        origin: [0.0; 3],
        dims: [1; 3],
    };
    for a in 0..3 {
        if !g.real[a] {
            continue;
        }
        let m = pool[a].pow(levels as u32 - 1);
        let n = ((spec.crop.extent_mm + 2.0 * spec.margin_mm) / rs[a] - 1e-9).ceil().max(1.0) as usize;
        let n = n.div_ceil(m) * m;
        g.dims[a] = n;
        g.origin[a] = center[a] - 0.5 * n as f64 * rs[a];
    }
    g
}

fn sample_input(image: &Volume, g: &Grid) -> Result<Volume> {
    let src = dims3(image.shape());
    let s = lift(image.spacing().as_slice(), 1.0);
    let axis = |a: usize| -> Vec<f64> {
        (0..g.dims[a])
            .map(|i| {
                if g.real[a] {
                    (g.origin[a] + (i as f64 + 0.5) * g.spacing[a]) / s[a] - 0.5
                } else {
                    0.0
                }
            })
            .collect()
    };
    let (uz, uy, ux) = (axis(0), axis(1), axis(2));
    let mut out = Vec::with_capacity(g.dims.iter().product());
    for &z in &uz {
        for &y in &uy {
            for &x in &ux {
                out.push(sample_linear(image.data(), src, [z, y, x]) as f32);
            }
        }
    }
    let shape: Vec<usize> = if image.dim() == 2 { g.dims[1..].to_vec() } else { g.dims.to_vec() };
    let spacing = if image.dim() == 2 { g.spacing[1..].to_vec() } else { g.spacing.to_vec() };
    Volume::new(shape, Spacing::new(spacing)?, out)
}

fn plan_layer(info: &LayerInfo, model: &Model, g: &Grid, spec: &CaptureSpec, n: usize) -> LayerPlan {
    let pool = model.checkpoint.unet.pool3();
    let center = lift(&spec.crop.center_mm, 0.0);
    let coords: [Vec<f64>; 3] = std::array::from_fn(|a| {
        if !g.real[a] {
            return vec![0.0];
        }
        let f = pool[a].pow(info.level as u32) as f64;
        let step = spec.crop.reference_spacing * f;
        let m = ((spec.crop.extent_mm / step).round() as usize).max(1);
        let c0 = center[a] - 0.5 * spec.crop.extent_mm;
        (0..m)
            .map(|k| (c0 + (k as f64 + 0.5) * step - g.origin[a]) / (g.spacing[a] * f) - 0.5)
            .collect()
    });
    let p_full = info.channels * coords.iter().map(|c| c.len()).product::<usize>();
    let features = if p_full > spec.feature_cap && spec.feature_cap > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(layer_seed(spec.seed, &info.name));
        let mut v = rand::seq::index::sample(&mut rng, p_full, spec.feature_cap).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..p_full).collect()
    };
    let rows = Vec::with_capacity(n * features.len());
    LayerPlan {
        info: info.clone(),
        coords,
        features,
        rows,
    }
}

fn extract(plan: &mut LayerPlan, t: &Tensor<f32>) {
    let [cz, cy, cx] = &plan.coords;
    let spatial = cz.len() * cy.len() * cx.len();
    for &q in &plan.features {
        let (c, rest) = (q / spatial, q % spatial);
        let (z, rest) = (rest / (cy.len() * cx.len()), rest % (cy.len() * cx.len()));
        let (y, x) = (rest / cx.len(), rest % cx.len());
        plan.rows.push(sample_linear(t.channel(c), t.dims, [cz[z], cy[y], cx[x]]));
    }
}

/// Centred activation matrices, one per selected layer in forward order,
/// for the network run at spacing `r` on `images` resampled to `r`.
///
/// Every image is sampled onto a grid at `r` covering the crop plus margin;
/// each layer's features over the crop footprint are interpolated onto that
/// layer's reference grid (`reference_spacing * 2^level`), so matrices from
/// different spacings have identical shapes and physical meaning.
pub fn capture_activations(
    model: &Model,
    r: &Spacing,
    images: &[Volume],
    spec: &CaptureSpec,
) -> Result<Vec<ActivationMatrix>> {
    if images.len() < 2 {
        return Err(Error::Config(format!("CKA needs at least 2 images, got {}", images.len())));
    }
    for img in images {
        spec.crop.check(&img.extent_mm())?;
    }
    let g = input_grid(model, r, spec);
    let w = model.weights_for(r)?;
    let selected: Vec<&LayerInfo> = match &spec.layers {
        None => model.unet.layers().iter().collect(),
        Some(names) => names
            .iter()
            .map(|n| {
                model
                    .unet
                    .layers()
                    .iter()
                    .find(|l| &l.name == n)
                    .ok_or_else(|| Error::Config(format!("unknown layer {n:?}")))
            })
            .collect::<Result<_>>()?,
    };
    let mut plans: Vec<LayerPlan> = selected.iter().map(|l| plan_layer(l, model, &g, spec, images.len())).collect();
    let index: HashMap<String, usize> = plans.iter().enumerate().map(|(i, p)| (p.info.name.clone(), i)).collect();
    for img in images {
        let input = sample_input(img, &g)?;
        model.logits_observed(&input, &w, &mut |info, t| {
            if let Some(&i) = index.get(&info.name) {
                extract(&mut plans[i], t);
            }
        })?;
    }
    let tag = format!("{}@{}", model.regime().name(), r);
    plans
        .into_iter()
        .map(|p| {
            let cols = p.features.len();
            let mut m = ActivationMatrix::new(images.len(), cols, p.rows)?;
            m.layer = p.info.name;
            m.tag = tag.clone();
            center(m)
        })
        .collect()
}

/// [`capture_activations`] reduced to Gram matrices, with the layer list.
pub fn capture_grams(
    model: &Model,
    r: &Spacing,
    images: &[Volume],
    spec: &CaptureSpec,
) -> Result<(Vec<LayerInfo>, Vec<Gram>)> {
    let acts = capture_activations(model, r, images, spec)?;
    let infos = acts
        .iter()
        .map(|a| {
            model
                .unet
                .layers()
                .iter()
                .find(|l| l.name == a.layer)
                .cloned()
                .expect("captured layer exists")
        })
        .collect();
    Ok((infos, acts.iter().map(|a| a.gram()).collect()))
}
