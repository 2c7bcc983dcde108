//! Binary checkpoints: magic, JSON header, little-endian f32 payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypernet::HyperNetConfig;
use crate::segnet::{param_count, UNetConfig};
use crate::synthdata::SpacingRange;
use crate::training::{Regime, TrainConfig};

const CHECKPOINT_MAGIC: &[u8; 8] = b"HSCKPT01";
const STATE_MAGIC: &[u8; 8] = b"HSSTATE1";

/// Which parameter vector the payload holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoredParams {
    /// Hypernetwork parameters; U-Net weights are generated per spacing.
    Beta,
    /// A directly trained U-Net weight vector.
    Eta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    regime: Regime,
    unet: UNetConfig,
    hypernet: Option<HyperNetConfig>,
    training_range: SpacingRange,
    params: StoredParams,
    count: usize,
    iterations: usize,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub regime: Regime,
    pub unet: UNetConfig,
    pub hypernet: Option<HyperNetConfig>,
    pub training_range: SpacingRange,
    pub stored: StoredParams,
    pub iterations: usize,
    pub seed: u64,
    pub params: Vec<f32>,
}

impl Checkpoint {
    /// Checks that the payload kind and length match the regime and configs.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Checkpoint(m));
        let expected = match (&self.regime, self.stored, &self.hypernet) {
            (Regime::Hs, StoredParams::Beta, Some(h)) => {
                if h.output_dim != param_count(&self.unet) {
                    return bad(format!(
                        "hypernetwork output {} does not match U-Net parameter count {}",
                        h.output_dim,
                        param_count(&self.unet)
                    ));
                }
                h.param_count()
            }
            (Regime::Hs, ..) => return bad("HS checkpoint must store beta with a hypernetwork config".into()),
            (_, StoredParams::Eta, None) => param_count(&self.unet),
            (r, ..) => return bad(format!("{r} checkpoint must store eta only")),
        };
        if self.params.len() != expected {
            return bad(format!("payload has {} values, expected {expected}", self.params.len()));
        }
        if self.params.iter().any(|v| !v.is_finite()) {
            return bad("payload contains non-finite values".into());
        }
        Ok(())
    }

    /// Same model reinterpreted under another regime with identical training
    /// (FS and FSNR share weights).
    pub fn with_regime(mut self, regime: Regime) -> Result<Self> {
        if self.regime.training_key() != regime.training_key() || self.regime.fixed_spacing() != regime.fixed_spacing() {
            return Err(Error::RegimeMismatch {
                expected: regime.to_string(),
                found: self.regime.to_string(),
            });
        }
        self.regime = regime;
        Ok(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let header = CheckpointHeader {
            regime: self.regime.clone(),
            unet: self.unet.clone(),
            hypernet: self.hypernet.clone(),
            training_range: self.training_range.clone(),
            params: self.stored,
            count: self.params.len(),
            iterations: self.iterations,
            seed: self.seed,
        };
        write_blob(path, CHECKPOINT_MAGIC, &header, &[&self.params])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, mut arrays): (CheckpointHeader, _) = read_blob(path, CHECKPOINT_MAGIC, 1)?;
        let params = arrays.pop().expect("one array");
        if params.len() != h.count {
            return Err(Error::Checkpoint(format!("header count {} but payload {}", h.count, params.len())));
        }
        let c = Self {
            regime: h.regime,
            unet: h.unet,
            hypernet: h.hypernet,
            training_range: h.training_range,
            stored: h.params,
            iterations: h.iterations,
            seed: h.seed,
            params,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Everything needed to continue an interrupted run bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: usize,
    pub adam_t: u64,
    pub params: Vec<f32>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    config: TrainConfig,
    step: usize,
    adam_t: u64,
    count: usize,
}

impl TrainState {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = StateHeader {
            config: self.config.clone(),
            step: self.step,
            adam_t: self.adam_t,
            count: self.params.len(),
        };
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        write_blob(&tmp, STATE_MAGIC, &header, &[&self.params, &self.m, &self.v])?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, mut a): (StateHeader, _) = read_blob(path, STATE_MAGIC, 3)?;
        let v = a.pop().expect("three arrays");
        let m = a.pop().expect("three arrays");
        let params = a.pop().expect("three arrays");
        if [params.len(), m.len(), v.len()].iter().any(|&n| n != h.count) {
            return Err(Error::Checkpoint("train state arrays disagree with header".into()));
        }
        Ok(Self {
            config: h.config,
            step: h.step,
            adam_t: h.adam_t,
            params,
            m,
            v,
        })
    }
}

fn write_blob<H: Serialize>(path: &Path, magic: &[u8; 8], header: &H, arrays: &[&[f32]]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + json.len() + arrays.iter().map(|a| 8 + 4 * a.len()).sum::<usize>());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for a in arrays {
        out.extend_from_slice(&(a.len() as u64).to_le_bytes());
        for v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

fn read_blob<H: DeserializeOwned>(path: &Path, magic: &[u8; 8], arrays: usize) -> Result<(H, Vec<Vec<f32>>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
        match end {
            Some(e) => {
                let s = &bytes[*pos..e];
                *pos = e;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!("{} is truncated", path.display()))),
        }
    };
    if take(&mut pos, 8)? != magic {
        return Err(Error::Checkpoint(format!("{} has the wrong file signature", path.display())));
    }
    let u64_at = |pos: &mut usize| -> Result<usize> {
        Ok(u64::from_le_bytes(take(pos, 8)?.try_into().expect("8 bytes")) as usize)
    };
    let hlen = u64_at(&mut pos)?;
    let header = serde_json::from_slice(take(&mut pos, hlen)?)?;
    let mut out = Vec::with_capacity(arrays);
    for _ in 0..arrays {
        let n = u64_at(&mut pos)?;
        let raw = take(&mut pos, n.checked_mul(4).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        out.push(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect());
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} has trailing bytes", path.display())));
    }
    Ok((header, out))
}
