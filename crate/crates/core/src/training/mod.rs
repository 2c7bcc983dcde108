//! The four training regimes: fixed spacing (FS, FSNR), spacing
//! augmentation (AS) and the hypernetwork (HS).

mod batch;
pub mod loss;
mod optim;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batch::{batch_spacing, make_batch, patch_voxels, Batch, Dataset};
pub use loss::{combined_loss, LossOutput, LossWeights, DICE_EPS};
pub use optim::{Adam, AdamConfig};

use crate::checkpoint::{Checkpoint, StoredParams, TrainState};
use crate::error::{Error, Result};
use crate::hypernet::{conventional_init, HyperNet, HyperNetConfig, InputNorm};
use crate::segnet::{Tensor, UNet, UNetConfig};
use crate::synthdata::SpacingRange;
use crate::real::Real;
use crate::volume::{crop_back, dims3, pad_channels, PadRecord, Spacing};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Regime {
    /// Trained at `fixed`; inputs are resampled to `fixed` and back at inference.
    Fs { fixed: Spacing },
    /// Same training as FS; inference runs at the native spacing.
    Fsnr { fixed: Spacing },
    /// One network trained on randomly resampled batches.
    As,
    /// Hypernetwork generating the network for each spacing.
    Hs,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Fs { .. } => "fs",
            Regime::Fsnr { .. } => "fsnr",
            Regime::As => "as",
            Regime::Hs => "hs",
        }
    }

    /// Parses `fs|fsnr|as|hs`; the fixed-spacing regimes require `fixed`.
    pub fn parse(name: &str, fixed: Option<Spacing>) -> Result<Self> {
        let need = |f: Option<Spacing>| f.ok_or_else(|| Error::Config(format!("regime {name} needs a fixed spacing")));
        match name.to_ascii_lowercase().as_str() {
            "fs" => Ok(Regime::Fs { fixed: need(fixed)? }),
            "fsnr" => Ok(Regime::Fsnr { fixed: need(fixed)? }),
            "as" => Ok(Regime::As),
            "hs" => Ok(Regime::Hs),
            other => Err(Error::Config(format!("unknown regime {other:?}"))),
        }
    }

    pub fn fixed_spacing(&self) -> Option<&Spacing> {
        match self {
            Regime::Fs { fixed } | Regime::Fsnr { fixed } => Some(fixed),
            _ => None,
        }
    }

    pub fn is_hyper(&self) -> bool {
        matches!(self, Regime::Hs)
    }

    /// FS and FSNR share one training procedure and thus one checkpoint.
    pub fn training_key(&self) -> &'static str {
        match self {
            Regime::Fs { .. } | Regime::Fsnr { .. } => "fixed",
            Regime::As => "as",
            Regime::Hs => "hs",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name().to_ascii_uppercase())
    }
}

/// Hypernetwork shape; input and output sizes follow from the U-Net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperSettings {
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
    #[serde(default = "default_hidden_width")]
    pub hidden_width: usize,
    #[serde(default = "default_final_scale")]
    pub final_init_scale: f64,
    /// Map the training range onto `[-1, 1]` before the first layer.
    #[serde(default)]
    pub normalize_input: bool,
    /// Optional cross-check against the U-Net parameter count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dim: Option<usize>,
}

fn default_hidden_layers() -> usize {
    3
}
fn default_hidden_width() -> usize {
    64
}
fn default_final_scale() -> f64 {
    0.1
}

impl Default for HyperSettings {
    fn default() -> Self {
        Self {
            hidden_layers: default_hidden_layers(),
            hidden_width: default_hidden_width(),
            final_init_scale: default_final_scale(),
            normalize_input: false,
            output_dim: None,
        }
    }
}

impl HyperSettings {
    pub fn build(&self, unet: &UNetConfig, range: &SpacingRange) -> HyperNetConfig {
        let mut cfg = HyperNetConfig::new(unet.dim, crate::segnet::param_count(unet));
        cfg.hidden_layers = self.hidden_layers;
        cfg.hidden_width = self.hidden_width;
        cfg.final_init_scale = self.final_init_scale;
        if self.normalize_input {
            cfg.input_norm = Some(InputNorm {
                center: range.axes().iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect(),
                scale: range.axes().iter().map(|(lo, hi)| (0.5 * (hi - lo)).max(1e-6)).collect(),
            });
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub range: SpacingRange,
    pub unet: UNetConfig,
    #[serde(default)]
    pub hypernet: HyperSettings,
    pub iterations: usize,
    pub batch_size: usize,
    pub patch_size_mm: f64,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub seed: u64,
    /// Rows in `loss.csv` are written every `log_every` steps.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Resumable state is written every `state_every` steps (0 disables).
    #[serde(default)]
    pub state_every: usize,
}

fn default_log_every() -> usize {
    10
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.loss_weights.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.patch_size_mm > 0.0) {
            return bad(format!("patch_size_mm must be positive, got {}", self.patch_size_mm));
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        if self.range.dim() != self.unet.dim {
            return Err(Error::DimMismatch {
                expected: self.unet.dim,
                actual: self.range.dim(),
            });
        }
        if let Some(f) = self.regime.fixed_spacing() {
            if f.dim() != self.unet.dim {
                return Err(Error::DimMismatch {
                    expected: self.unet.dim,
                    actual: f.dim(),
                });
            }
        }
        if let Some(p) = self.hypernet.output_dim {
            let want = crate::segnet::param_count(&self.unet);
            if p != want {
                return Err(Error::Config(format!(
                    "hypernetwork output_dim {p} does not match U-Net parameter count {want}"
                )));
            }
        }
        if !(self.optimizer.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.optimizer.lr));
        }
        Ok(())
    }

    /// Everything a checkpoint depends on: the FS/FSNR distinction is erased
    /// and hypernetwork settings only count for the hypernetwork regime.
    pub fn training_identity(&self) -> TrainConfig {
        let mut c = self.clone();
        if let Regime::Fsnr { fixed } = &c.regime {
            c.regime = Regime::Fs { fixed: fixed.clone() };
        }
        if !c.regime.is_hyper() {
            c.hypernet = HyperSettings::default();
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

fn check_finite(loss: f64, step: usize, r: &Spacing) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            step,
            spacing: r.as_slice().to_vec(),
            loss,
        })
    }
}

/// Loss and `d loss / d w` for a batch under U-Net weights `w`.
pub fn batch_loss_grad(unet: &UNet, w: &[f32], batch: &Batch, weights: LossWeights) -> Result<(f64, Vec<f32>)> {
    loss_and_grad(unet, w, &batch.images, &batch.labels, &batch.patch_shape, &batch.pad, weights)
}

/// Loss over padded network inputs whose labels cover only the unpadded
/// `patch_shape`; the gradient is zero on the padding margin.
pub fn loss_and_grad<T: Real>(
    unet: &UNet,
    w: &[T],
    images: &[Tensor<T>],
    labels: &[Vec<u8>],
    patch_shape: &[usize],
    pad: &PadRecord,
    weights: LossWeights,
) -> Result<(f64, Vec<T>)> {
    let k = unet.config().num_classes;
    let padded_shape = pad.padded_shape(patch_shape);
    let mut logits = Vec::with_capacity(images.len());
    let mut tapes = Vec::with_capacity(images.len());
    for img in images {
        let (out, tape) = unet.forward_train(img, w)?;
        let (cropped, _) = crop_back(&out.data, &padded_shape, k, pad)?;
        logits.push(Tensor::from_vec(k, dims3(patch_shape), cropped));
        tapes.push((tape, out.dims));
    }
    let refs: Vec<&Tensor<T>> = logits.iter().collect();
    let labs: Vec<&[u8]> = labels.iter().map(|l| l.as_slice()).collect();
    let out = combined_loss(&refs, &labs, weights, true)?;
    let mut grad = vec![T::zero(); w.len()];
    for ((tape, dims), g) in tapes.into_iter().zip(out.grads) {
        let d = pad_channels(&g.data, patch_shape, k, pad, T::zero());
        unet.backward(tape, w, Tensor::from_vec(k, dims, d), &mut grad, false);
    }
    Ok((out.loss, grad))
}

/// Hypernetwork loss and `d loss / d beta` at spacing `r`.
#[allow(clippy::too_many_arguments)]
pub fn hyper_loss_and_grad<T: Real>(
    unet: &UNet,
    hyper: &HyperNet,
    beta: &[T],
    r: &Spacing,
    images: &[Tensor<T>],
    labels: &[Vec<u8>],
    patch_shape: &[usize],
    pad: &PadRecord,
    weights: LossWeights,
) -> Result<(f64, Vec<T>)> {
    let (eta, cache) = hyper.forward_train(beta, r.as_slice())?;
    let (loss, d_eta) = loss_and_grad(unet, &eta, images, labels, patch_shape, pad, weights)?;
    let mut grad = vec![T::zero(); beta.len()];
    hyper.backward(&cache, beta, &d_eta, &mut grad);
    Ok((loss, grad))
}

/// One hypernetwork step: `eta = H(beta, r)`, loss through the U-Net,
/// gradient back into `beta`. `beta` is the only state that changes.
pub fn train_step_hs(
    unet: &UNet,
    hyper: &HyperNet,
    beta: &mut [f32],
    batch: &Batch,
    adam: &mut Adam,
    weights: LossWeights,
    step: usize,
) -> Result<StepStats> {
    let (loss, grad) = hyper_loss_and_grad(
        unet,
        hyper,
        beta,
        &batch.spacing,
        &batch.images,
        &batch.labels,
        &batch.patch_shape,
        &batch.pad,
        weights,
    )?;
    check_finite(loss, step, &batch.spacing)?;
    let grad_norm = adam.step(beta, &grad);
    Ok(StepStats { loss, grad_norm })
}

/// Conventional U-Net step on a directly trained weight vector.
pub fn train_step_plain(
    unet: &UNet,
    eta: &mut [f32],
    batch: &Batch,
    adam: &mut Adam,
    weights: LossWeights,
    step: usize,
) -> Result<StepStats> {
    let (loss, grad) = batch_loss_grad(unet, eta, batch, weights)?;
    check_finite(loss, step, &batch.spacing)?;
    let grad_norm = adam.step(eta, &grad);
    Ok(StepStats { loss, grad_norm })
}

/// Step-indexed RNG so that a resumed run draws the same batches.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Optimisation state of one run.
pub struct Trainer {
    pub config: TrainConfig,
    pub unet: UNet,
    pub hyper: Option<HyperNet>,
    pub params: Vec<f32>,
    pub adam: Adam,
    pub step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let unet = UNet::new(config.unet.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0);
        let (hyper, params) = if config.regime.is_hyper() {
            let h = HyperNet::for_layout(config.hypernet.build(&config.unet, &config.range), unet.layout())?;
            let beta = h.init::<f32, _>(unet.layout(), &mut rng)?;
            (Some(h), beta)
        } else {
            let eta = conventional_init(unet.layout(), &mut rng).into_iter().map(|v| v as f32).collect();
            (None, eta)
        };
        let adam = Adam::new(config.optimizer.clone(), params.len());
        Ok(Self {
            config,
            unet,
            hyper,
            params,
            adam,
            step: 0,
        })
    }

    pub fn from_state(state: TrainState) -> Result<Self> {
        let mut t = Self::new(state.config)?;
        if state.params.len() != t.params.len() || state.m.len() != t.params.len() || state.v.len() != t.params.len() {
            return Err(Error::Checkpoint("train state does not match the configured model".into()));
        }
        t.params = state.params;
        t.adam.m = state.m;
        t.adam.v = state.v;
        t.adam.t = state.adam_t;
        t.step = state.step;
        Ok(t)
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            config: self.config.clone(),
            step: self.step,
            adam_t: self.adam.t,
            params: self.params.clone(),
            m: self.adam.m.clone(),
            v: self.adam.v.clone(),
        }
    }

    pub fn next_batch(&self, dataset: &Dataset) -> Result<Batch> {
        let mut rng = step_rng(self.config.seed, self.step);
        make_batch(
            &self.config.regime,
            &self.config.range,
            dataset,
            self.config.batch_size,
            self.config.patch_size_mm,
            self.config.unet.divisor(),
            &mut rng,
        )
    }

    /// Draws the next batch and performs one optimiser update.
    pub fn step(&mut self, dataset: &Dataset) -> Result<(StepStats, Spacing)> {
        let batch = self.next_batch(dataset)?;
        let w = self.config.loss_weights;
        let stats = match &self.hyper {
            Some(h) => train_step_hs(&self.unet, h, &mut self.params, &batch, &mut self.adam, w, self.step)?,
            None => train_step_plain(&self.unet, &mut self.params, &batch, &mut self.adam, w, self.step)?,
        };
        self.step += 1;
        Ok((stats, batch.spacing))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            regime: self.config.regime.clone(),
            unet: self.config.unet.clone(),
            hypernet: self.hyper.as_ref().map(|h| h.config().clone()),
            training_range: self.config.range.clone(),
            stored: if self.hyper.is_some() { StoredParams::Beta } else { StoredParams::Eta },
            iterations: self.step,
            seed: self.config.seed,
            params: self.params.clone(),
        }
    }
}

/// One logged row of `loss.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub spacing: Spacing,
}

pub const LOSS_CSV: &str = "loss.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const STATE_FILE: &str = "train_state.bin";

fn csv_row(row: &LossRow) -> String {
    let r: Vec<String> = row.spacing.as_slice().iter().map(|v| format!("{v:.6}")).collect();
    format!("{},{:.8},{}\n", row.step, row.loss, r.join("x"))
}

/// Runs the regime's loop for `config.iterations` steps.
///
/// With `out`, writes `loss.csv`, the final `checkpoint.bin` and, every
/// `state_every` steps, `train_state.bin`; an existing state file for the
/// same configuration is resumed. `progress` sees every step.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    out: Option<&Path>,
    progress: &mut dyn FnMut(usize, &StepStats, &Spacing),
) -> Result<(Checkpoint, Vec<LossRow>)> {
    config.validate()?;
    if let Some(k) = dataset.num_classes() {
        if k != config.unet.num_classes {
            return Err(Error::Config(format!(
                "dataset has {k} classes, network predicts {}",
                config.unet.num_classes
            )));
        }
    }
    let mut trainer = Trainer::new(config.clone())?;
    let mut rows = Vec::new();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let state_path = dir.join(STATE_FILE);
        if state_path.exists() {
            let state = TrainState::load(&state_path)?;
            if state.config == *config && state.step <= config.iterations {
                trainer = Trainer::from_state(state)?;
                rows = read_loss_csv(&dir.join(LOSS_CSV))?
                    .into_iter()
                    .filter(|r| r.step <= trainer.step)
                    .collect();
            }
        }
        let mut f = fs::File::create(dir.join(LOSS_CSV))?;
        f.write_all(b"step,loss,r\n")?;
        for r in &rows {
            f.write_all(csv_row(r).as_bytes())?;
        }
    }
    let mut csv = match out {
        Some(dir) => Some(fs::OpenOptions::new().append(true).open(dir.join(LOSS_CSV))?),
        None => None,
    };
    while trainer.step < config.iterations {
        let (stats, r) = trainer.step(dataset)?;
        let step = trainer.step;
        progress(step, &stats, &r);
        if step % config.log_every == 0 {
            let row = LossRow {
                step,
                loss: stats.loss,
                spacing: r,
            };
            if let Some(f) = csv.as_mut() {
                f.write_all(csv_row(&row).as_bytes())?;
                f.flush()?;
            }
            rows.push(row);
        }
        if let Some(dir) = out {
            if config.state_every > 0 && step % config.state_every == 0 && step < config.iterations {
                trainer.state().save(&dir.join(STATE_FILE))?;
            }
        }
    }
    let ckpt = trainer.checkpoint();
    if let Some(dir) = out {
        ckpt.save(&dir.join(CHECKPOINT_FILE))?;
        let state_path = dir.join(STATE_FILE);
        if state_path.exists() {
            fs::remove_file(state_path)?;
        }
    }
    Ok((ckpt, rows))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let mut it = line.split(',');
        let parse_err = || Error::Config(format!("malformed loss row {line:?}"));
        let step = it.next().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
        let loss = it.next().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
        let r: Vec<f64> = it
            .next()
            .ok_or_else(parse_err)?
            .split('x')
            .map(|v| v.parse().map_err(|_| parse_err()))
            .collect::<Result<_>>()?;
        rows.push(LossRow {
            step,
            loss,
            spacing: Spacing::new(r)?,
        });
    }
    Ok(rows)
}
