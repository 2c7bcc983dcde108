//! Dice at working resolution, Monte-Carlo and sweep protocols, the snap
//! fallback and inference benchmarking.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::hypernet::HyperNet;
use crate::memprobe;
use crate::segnet::{argmax_labels, volume_tensor, LayerInfo, Tensor, UNet};
use crate::synthdata::SpacingRange;
use crate::training::Regime;
use crate::volume::{
    crop_back, pad_to_multiple, resample_image, resample_labels, resample_labels_onto, LabelMap, Spacing, Volume,
};

#[derive(Debug, Clone, PartialEq)]
pub struct DiceScores {
    /// Foreground classes `1..num_classes`.
    pub per_class: Vec<f64>,
    pub mean: f64,
}

/// Per-class Dice over foreground classes; a class absent from both maps scores 1.
pub fn dice_score(pred: &LabelMap, gt: &LabelMap) -> Result<DiceScores> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            left: pred.shape().to_vec(),
            right: gt.shape().to_vec(),
        });
    }
    if pred.spacing() != gt.spacing() {
        return Err(Error::Config(format!(
            "prediction spacing {} differs from ground truth {}",
            pred.spacing(),
            gt.spacing()
        )));
    }
    let k = pred.num_classes().max(gt.num_classes());
    let mut inter = vec![0usize; k];
    let mut ps = vec![0usize; k];
    let mut gs = vec![0usize; k];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        ps[p as usize] += 1;
        gs[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }
    let per_class: Vec<f64> = (1..k)
        .map(|c| {
            let denom = ps[c] + gs[c];
            if denom == 0 {
                1.0
            } else {
                2.0 * inter[c] as f64 / denom as f64
            }
        })
        .collect();
    let mean = if per_class.is_empty() {
        1.0
    } else {
        per_class.iter().sum::<f64>() / per_class.len() as f64
    };
    Ok(DiceScores { per_class, mean })
}

/// Componentwise clamp of `spacing` into `range`.
pub fn snap_to_training_range(spacing: &Spacing, range: &SpacingRange) -> Result<Spacing> {
    range.clamp(spacing)
}

/// Seconds spent in the two halves of one prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Profile {
    pub hypernet_s: f64,
    pub total_s: f64,
}

/// A trained checkpoint ready for inference.
#[derive(Debug, Clone)]
pub struct Model {
    pub checkpoint: Checkpoint,
    pub unet: UNet,
    pub hyper: Option<HyperNet>,
}

impl Model {
    pub fn new(checkpoint: Checkpoint) -> Result<Self> {
        checkpoint.validate()?;
        let unet = UNet::new(checkpoint.unet.clone())?;
        let hyper = match &checkpoint.hypernet {
            Some(h) => Some(HyperNet::for_layout(h.clone(), unet.layout())?),
            None => None,
        };
        Ok(Self { checkpoint, unet, hyper })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(Checkpoint::load(path)?)
    }

    /// Loads a checkpoint that must have been trained as `regime` (FS and
    /// FSNR are interchangeable).
    pub fn load_as(path: &Path, regime: &Regime) -> Result<Self> {
        Self::new(Checkpoint::load(path)?.with_regime(regime.clone())?)
    }

    /// Same weights, different inference regime (FS <-> FSNR).
    pub fn as_regime(&self, regime: Regime) -> Result<Self> {
        Self::new(self.checkpoint.clone().with_regime(regime)?)
    }

    pub fn regime(&self) -> &Regime {
        &self.checkpoint.regime
    }

    pub fn training_range(&self) -> &SpacingRange {
        &self.checkpoint.training_range
    }

    pub fn num_classes(&self) -> usize {
        self.checkpoint.unet.num_classes
    }

    /// U-Net weights used at spacing `r`: generated for HS, stored otherwise.
    pub fn weights_for(&self, r: &Spacing) -> Result<Cow<'_, [f32]>> {
        match &self.hyper {
            Some(h) => Ok(Cow::Owned(h.forward(&self.checkpoint.params, r.as_slice())?)),
            None => Ok(Cow::Borrowed(&self.checkpoint.params)),
        }
    }

    /// Spacing the network actually runs at for an input at `native`.
    pub fn compute_spacing(&self, native: &Spacing, snap: bool) -> Result<Spacing> {
        if let Some(f) = self.regime().fixed_spacing().filter(|_| matches!(self.regime(), Regime::Fs { .. })) {
            return Ok(f.clone());
        }
        if snap {
            return snap_to_training_range(native, self.training_range());
        }
        Ok(native.clone())
    }

    /// Logits on the unpadded grid of `vol`, run at `vol`'s own spacing.
    pub fn logits(&self, vol: &Volume, w: &[f32]) -> Result<Tensor<f32>> {
        self.logits_observed(vol, w, &mut |_, _| {})
    }

    pub fn logits_observed(
        &self,
        vol: &Volume,
        w: &[f32],
        observer: &mut dyn FnMut(&LayerInfo, &Tensor<f32>),
    ) -> Result<Tensor<f32>> {
        let (padded, rec) = pad_to_multiple(vol, self.checkpoint.unet.divisor());
        let out = self.unet.forward_observed(&volume_tensor(&padded), w, observer)?;
        let k = out.channels;
        let (data, shape) = crop_back(&out.data, padded.shape(), k, &rec)?;
        Ok(Tensor::from_vec(k, crate::volume::dims3(&shape), data))
    }

    /// Label map at `vol`'s spacing and shape (the working resolution).
    pub fn predict(&self, vol: &Volume) -> Result<LabelMap> {
        Ok(self.predict_profiled(vol, false)?.0)
    }

    /// Prediction with optional snapping of out-of-range spacings to the
    /// nearest training spacing, plus a timing breakdown.
    pub fn predict_profiled(&self, vol: &Volume, snap: bool) -> Result<(LabelMap, Profile)> {
        let t0 = Instant::now();
        let target = self.compute_spacing(vol.spacing(), snap)?;
        let resampled = target != *vol.spacing();
        let work = if resampled {
            Cow::Owned(resample_image(vol, &target)?)
        } else {
            Cow::Borrowed(vol)
        };
        let th = Instant::now();
        let w = self.weights_for(&target)?;
        let hypernet_s = if self.hyper.is_some() { th.elapsed().as_secs_f64() } else { 0.0 };
        let logits = self.logits(&work, &w)?;
        let labels = LabelMap::new(
            work.shape().to_vec(),
            target.clone(),
            self.num_classes(),
            argmax_labels(&logits),
        )?;
        let labels = if resampled {
            resample_labels_onto(&labels, vol.shape(), vol.spacing())?
        } else {
            labels
        };
        Ok((
            labels,
            Profile {
                hypernet_s,
                total_s: t0.elapsed().as_secs_f64(),
            },
        ))
    }
}

/// Something that produces a label map for an image; lets protocols score
/// oracles and models alike.
pub trait Predictor {
    fn name(&self) -> String;
    fn predict_case(&self, vol: &Volume, gt: &LabelMap) -> Result<(LabelMap, Profile)>;
}

/// A model under a fixed inference policy.
pub struct ModelPredictor<'a> {
    pub label: String,
    pub model: &'a Model,
    pub snap: bool,
}

impl Predictor for ModelPredictor<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn predict_case(&self, vol: &Volume, _gt: &LabelMap) -> Result<(LabelMap, Profile)> {
        self.model.predict_profiled(vol, self.snap)
    }
}

/// Returns the ground truth; a sanity anchor for protocols.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn predict_case(&self, _vol: &Volume, gt: &LabelMap) -> Result<(LabelMap, Profile)> {
        Ok((gt.clone(), Profile::default()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub case: usize,
    pub draw: usize,
    pub regime: String,
    pub spacing: Spacing,
    pub dice: Vec<f64>,
    pub mean_dice: f64,
    pub wall_s: f64,
    pub peak_bytes: usize,
    pub mem_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub regime: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Table-style `mean (std)`.
    pub fn cell(&self) -> String {
        format!("{:.2} ({:.2})", self.mean, self.std)
    }
}

fn score<P: Predictor + ?Sized>(
    p: &P,
    vol: &Volume,
    gt: &LabelMap,
    case: usize,
    draw: usize,
) -> Result<EvalRow> {
    let (res, peak, source) = memprobe::measure(|| p.predict_case(vol, gt));
    let (pred, prof) = res?;
    let d = dice_score(&pred, gt)?;
    Ok(EvalRow {
        case,
        draw,
        regime: p.name(),
        spacing: vol.spacing().clone(),
        dice: d.per_class,
        mean_dice: d.mean,
        wall_s: prof.total_s,
        peak_bytes: peak,
        mem_source: source.to_string(),
    })
}

/// Monte-Carlo protocol: `n_draws` spacings drawn uniformly from `range`;
/// every test pair is resampled to each draw and scored by every predictor.
pub fn evaluate_mc(
    predictors: &[&dyn Predictor],
    test: &[(Volume, LabelMap)],
    range: &SpacingRange,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    if n_draws == 0 {
        return Err(Error::Config("n_draws must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spacings: Vec<Spacing> = (0..n_draws).map(|_| range.sample(&mut rng)).collect();
    let mut rows = Vec::new();
    for (draw, r) in spacings.iter().enumerate() {
        for (case, (img, lab)) in test.iter().enumerate() {
            let vol = resample_image(img, r)?;
            let gt = resample_labels(lab, r)?;
            for p in predictors {
                rows.push(score(*p, &vol, &gt, case, draw)?);
            }
        }
    }
    Ok(rows)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.max(0.0).sqrt())
}

/// Mean and (population) std of row mean-Dice per regime, in first-seen order.
pub fn summarize(rows: &[EvalRow]) -> Vec<Summary> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.regime) {
            order.push(r.regime.clone());
        }
    }
    order
        .into_iter()
        .map(|regime| {
            let v: Vec<f64> = rows.iter().filter(|r| r.regime == regime).map(|r| r.mean_dice).collect();
            let (mean, std) = mean_std(&v);
            Summary {
                regime,
                n: v.len(),
                mean,
                std,
            }
        })
        .collect()
}

/// A straight segment of spacings, `steps` points from `start` to `end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: Spacing,
    pub end: Spacing,
    pub steps: usize,
}

impl Segment {
    pub fn points(&self) -> Result<Vec<Spacing>> {
        if self.steps < 2 {
            return Err(Error::Config("a sweep needs at least 2 steps".into()));
        }
        if self.start.dim() != self.end.dim() {
            return Err(Error::DimMismatch {
                expected: self.start.dim(),
                actual: self.end.dim(),
            });
        }
        (0..self.steps)
            .map(|i| {
                let t = i as f64 / (self.steps - 1) as f64;
                Spacing::new(
                    self.start
                        .as_slice()
                        .iter()
                        .zip(self.end.as_slice())
                        .map(|(a, b)| a + t * (b - a))
                        .collect(),
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub regime: String,
    pub step: usize,
    pub spacing: Spacing,
    pub mean_dice: f64,
    pub std_dice: f64,
    pub in_range: bool,
}

/// Dense evaluation along a segment: one mean-Dice point per step per predictor.
pub fn dense_sweep(
    predictors: &[&dyn Predictor],
    test: &[(Volume, LabelMap)],
    segment: &Segment,
    training_range: &SpacingRange,
) -> Result<Vec<SweepRow>> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut rows = Vec::new();
    for (step, r) in segment.points()?.into_iter().enumerate() {
        let cases: Vec<(Volume, LabelMap)> = test
            .iter()
            .map(|(i, l)| Ok((resample_image(i, &r)?, resample_labels(l, &r)?)))
            .collect::<Result<_>>()?;
        for p in predictors {
            let scores: Vec<f64> = cases
                .iter()
                .enumerate()
                .map(|(c, (v, g))| score(*p, v, g, c, step).map(|row| row.mean_dice))
                .collect::<Result<_>>()?;
            let (mean_dice, std_dice) = mean_std(&scores);
            rows.push(SweepRow {
                regime: p.name(),
                step,
                spacing: r.clone(),
                mean_dice,
                std_dice,
                in_range: training_range.contains(&r),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub regime: String,
    pub spacing: Spacing,
    pub voxels: usize,
    pub median_s: f64,
    pub times_s: Vec<f64>,
    pub hypernet_median_s: f64,
    pub peak_bytes: usize,
    pub mem_source: String,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Full-pipeline inference cost: median of `runs` (at least 5) timed runs
/// after `warmups` (at least 2), with the peak extra memory of one run.
pub fn benchmark(model: &Model, vol: &Volume, snap: bool, warmups: usize, runs: usize) -> Result<BenchResult> {
    for _ in 0..warmups.max(2) {
        model.predict_profiled(vol, snap)?;
    }
    let mut times = Vec::new();
    let mut hyper = Vec::new();
    for _ in 0..runs.max(5) {
        let (_, p) = model.predict_profiled(vol, snap)?;
        times.push(p.total_s);
        hyper.push(p.hypernet_s);
    }
    let (res, peak, source) = memprobe::measure(|| model.predict_profiled(vol, snap));
    res?;
    Ok(BenchResult {
        regime: model.regime().name().to_string(),
        spacing: vol.spacing().clone(),
        voxels: vol.len(),
        median_s: median(&times),
        times_s: times,
        hypernet_median_s: median(&hyper),
        peak_bytes: peak,
        mem_source: source.to_string(),
    })
}

fn spacing_cell(s: &Spacing) -> String {
    s.as_slice().iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join("x")
}

pub fn results_csv(rows: &[EvalRow]) -> String {
    let k = rows.iter().map(|r| r.dice.len()).max().unwrap_or(0);
    let mut s = String::from("case,draw,regime,spacing");
    for c in 1..=k {
        let _ = write!(s, ",dice_{c}");
    }
    s.push_str(",mean_dice,wall_s,peak_bytes,mem_source\n");
    for r in rows {
        let _ = write!(s, "{},{},{},{}", r.case, r.draw, r.regime, spacing_cell(&r.spacing));
        for c in 0..k {
            let _ = write!(s, ",{:.6}", r.dice.get(c).copied().unwrap_or(f64::NAN));
        }
        let _ = writeln!(s, ",{:.6},{:.6},{},{}", r.mean_dice, r.wall_s, r.peak_bytes, r.mem_source);
    }
    s
}

pub fn summary_csv(summary: &[Summary]) -> String {
    let mut s = String::from("regime,n,mean_dice,std_dice,cell\n");
    for r in summary {
        let _ = writeln!(s, "{},{},{:.6},{:.6},{}", r.regime, r.n, r.mean, r.std, r.cell());
    }
    s
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("regime,step,spacing,mean_dice,std_dice,in_range\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{}",
            r.regime,
            r.step,
            spacing_cell(&r.spacing),
            r.mean_dice,
            r.std_dice,
            r.in_range
        );
    }
    s
}

pub fn bench_csv(rows: &[BenchResult]) -> String {
    let mut s = String::from("regime,spacing,voxels,median_s,hypernet_median_s,peak_bytes,mem_source\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{},{}",
            r.regime,
            spacing_cell(&r.spacing),
            r.voxels,
            r.median_s,
            r.hypernet_median_s,
            r.peak_bytes,
            r.mem_source
        );
    }
    s
}
