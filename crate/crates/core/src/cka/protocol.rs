use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::capture::{capture_grams, CaptureSpec, CropSpec};
use super::{cka_map_grams, cka_slope, CkaMap, Gram};
use crate::error::{Error, Result};
use crate::evaluation::Model;
use crate::segnet::{LayerInfo, Stage};
use crate::volume::{Spacing, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaProtocolConfig {
    pub spacing_min: f64,
    pub spacing_max: f64,
    pub steps: usize,
    /// Inter-network maps compare against the grid point closest to this.
    pub reference_mm: f64,
    pub crop_extent_mm: f64,
    pub margin_mm: f64,
    pub feature_cap: usize,
    pub n_images: usize,
    pub seed: u64,
}

impl Default for CkaProtocolConfig {
    fn default() -> Self {
        Self {
            spacing_min: 0.94,
            spacing_max: 2.0,
            steps: 10,
            reference_mm: 1.0,
            crop_extent_mm: 32.0,
            margin_mm: 8.0,
            feature_cap: 8192,
            n_images: 64,
            seed: 0,
        }
    }
}

/// `steps` evenly spaced values on `[min, max]`.
pub fn default_grid(min: f64, max: f64, steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![min];
    }
    (0..steps)
        .map(|i| min + (max - min) * i as f64 / (steps - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaBundle {
    pub spacings: Vec<f64>,
    pub reference_index: usize,
    pub layers: Vec<LayerInfo>,
    /// One map per spacing: the network against itself.
    pub intra: Vec<CkaMap>,
    /// Every other spacing's network against the reference network.
    pub inter: Vec<CkaMap>,
    pub inter_spacings: Vec<f64>,
    /// Least-squares d CKA / d spacing of the intra and inter maps.
    pub intra_slope: Vec<Vec<f64>>,
    pub inter_slope: Vec<Vec<f64>>,
    /// Same spacing, two independently trained hypernetworks.
    pub cross_seed: Option<CkaMap>,
    /// `|i - j|` in forward order.
    pub layer_distance: Vec<Vec<usize>>,
    /// Whether layers `i` and `j` share a spatial resolution.
    pub same_resolution: Vec<Vec<bool>>,
}

impl CkaBundle {
    pub fn map_count(&self) -> usize {
        self.intra.len() + self.inter.len() + 2 + self.cross_seed.is_some() as usize
    }

    /// Layer where each inter map's diagonal (layer vs same layer) is lowest.
    pub fn inter_minima(&self) -> Vec<&LayerInfo> {
        self.inter
            .iter()
            .map(|m| {
                let d = m.diagonal();
                let i = (0..d.len()).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap_or(0);
                &self.layers[i]
            })
            .collect()
    }

    pub fn bottleneck_minima(&self) -> usize {
        self.inter_minima().iter().filter(|l| l.stage == Stage::Bottleneck).count()
    }

    /// Maps as CSV, the layer manifest and overlays as JSON.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (m, r) in self.intra.iter().zip(&self.spacings) {
            fs::write(dir.join(format!("intra_{r:.3}.csv")), m.to_csv())?;
        }
        for (m, r) in self.inter.iter().zip(&self.inter_spacings) {
            fs::write(dir.join(format!("inter_{r:.3}.csv")), m.to_csv())?;
        }
        let slope = |v: &Vec<Vec<f64>>| CkaMap {
            tag_a: "slope".into(),
            tag_b: "slope".into(),
            layers: self.layers.iter().map(|l| l.name.clone()).collect(),
            values: v.clone(),
            dead_layers: vec![],
        };
        fs::write(dir.join("slope_intra.csv"), slope(&self.intra_slope).to_csv())?;
        fs::write(dir.join("slope_inter.csv"), slope(&self.inter_slope).to_csv())?;
        if let Some(c) = &self.cross_seed {
            fs::write(dir.join("cross_seed.csv"), c.to_csv())?;
        }
        #[derive(Serialize)]
        struct Manifest<'a> {
            spacings: &'a [f64],
            reference_spacing: f64,
            layers: &'a [LayerInfo],
            layer_distance: &'a [Vec<usize>],
            same_resolution: &'a [Vec<bool>],
            inter_minima: Vec<&'a str>,
        }
        let manifest = Manifest {
            spacings: &self.spacings,
            reference_spacing: self.spacings[self.reference_index],
            layers: &self.layers,
            layer_distance: &self.layer_distance,
            same_resolution: &self.same_resolution,
            inter_minima: self.inter_minima().iter().map(|l| l.name.as_str()).collect(),
        };
        fs::write(dir.join("layers.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

/// Networks and images varied jointly over the spacing grid: intra maps per
/// spacing, inter maps against the reference network, slope maps and,
/// given a second hypernetwork, a cross-seed map at the reference spacing.
///
/// `images` are phantoms at a fine reference spacing; each network sees
/// them resampled to its own spacing over the same physical crop.
pub fn run_cka_protocol(
    model: &Model,
    second: Option<&Model>,
    images: &[Volume],
    cfg: &CkaProtocolConfig,
    progress: &mut dyn FnMut(&str),
) -> Result<CkaBundle> {
    if cfg.steps < 2 {
        return Err(Error::Config("the CKA protocol needs at least 2 spacings".into()));
    }
    let first = images.first().ok_or(Error::Empty("CKA images"))?;
    let images = &images[..cfg.n_images.min(images.len())];
    let dim = first.dim();
    let spec = CaptureSpec {
        crop: CropSpec::centered(&first.extent_mm(), cfg.crop_extent_mm, 1.0),
        margin_mm: cfg.margin_mm,
        feature_cap: cfg.feature_cap,
        seed: cfg.seed,
        layers: None,
    };
    let spacings = default_grid(cfg.spacing_min, cfg.spacing_max, cfg.steps);
    let reference_index = (0..spacings.len())
        .min_by(|&a, &b| (spacings[a] - cfg.reference_mm).abs().total_cmp(&(spacings[b] - cfg.reference_mm).abs()))
        .expect("non-empty grid");
    let mut layers = Vec::new();
    let mut grams: Vec<Vec<Gram>> = Vec::with_capacity(spacings.len());
    for &r in &spacings {
        progress(&format!("capturing activations at {r:.3} mm"));
        let (l, g) = capture_grams(model, &Spacing::isotropic(r, dim)?, images, &spec)?;
        layers = l;
        grams.push(g);
    }
    let names: Vec<String> = layers.iter().map(|l| l.name.clone()).collect();
    let tag = |r: f64| format!("{}@{r:.3}", model.regime().name());
    let intra = spacings
        .iter()
        .zip(&grams)
        .map(|(&r, g)| cka_map_grams(g, g, &names, &tag(r), &tag(r)))
        .collect::<Result<Vec<_>>>()?;
    let reference = &grams[reference_index];
    let mut inter = Vec::new();
    let mut inter_spacings = Vec::new();
    for (i, (&r, g)) in spacings.iter().zip(&grams).enumerate() {
        if i == reference_index {
            continue;
        }
        inter.push(cka_map_grams(g, reference, &names, &tag(r), &tag(spacings[reference_index]))?);
        inter_spacings.push(r);
    }
    let intra_slope = cka_slope(&spacings, &intra)?;
    let inter_slope = cka_slope(&inter_spacings, &inter)?;
    let cross_seed = match second {
        Some(m) => {
            progress("capturing the second hypernetwork");
            let r = Spacing::isotropic(spacings[reference_index], dim)?;
            let (_, g2) = capture_grams(m, &r, images, &spec)?;
            Some(cka_map_grams(reference, &g2, &names, "seed-a", "seed-b")?)
        }
        None => None,
    };
    let n = layers.len();
    let layer_distance = (0..n).map(|i| (0..n).map(|j| i.abs_diff(j)).collect()).collect();
    let same_resolution = (0..n)
        .map(|i| (0..n).map(|j| layers[i].level == layers[j].level).collect())
        .collect();
    Ok(CkaBundle {
        spacings,
        reference_index,
        layers,
        intra,
        inter,
        inter_spacings,
        intra_slope,
        inter_slope,
        cross_seed,
        layer_distance,
        same_resolution,
    })
}
