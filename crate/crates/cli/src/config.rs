use std::fs;
use std::path::Path;

use hyperspace::cka::CkaProtocolConfig;
use hyperspace::segnet::{param_count, UNetConfig};
use hyperspace::synthdata::{check_above_reference, PhantomSpec, SpacingRange};
use hyperspace::training::{AdamConfig, HyperSettings, LossWeights, Regime, TrainConfig};
use hyperspace::volume::Spacing;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything one experiment needs, in one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Default output directory when `--out` is not given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    #[serde(default)]
    pub phantom: PhantomSpec,
    pub train_cases: usize,
    pub test_cases: usize,
    pub unet: UNetConfig,
    #[serde(default)]
    pub hypernet: HyperSettings,
    pub training: TrainingSection,
    pub evaluation: EvalSpec,
    #[serde(default)]
    pub cka: CkaSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub range: SpacingRange,
    /// Isotropic spacing of the FS / FSNR network, in mm.
    pub r_fixed: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub patch_size_mm: f64,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub state_every: usize,
}

fn default_log_every() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub intervals: Vec<IntervalSpec>,
    /// Interval whose summary lands in the top-level summary.csv.
    pub primary: String,
    #[serde(default)]
    pub segments: Vec<SegmentSpec>,
    #[serde(default)]
    pub bench: BenchSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntervalSpec {
    pub name: String,
    pub range: SpacingRange,
    pub draws: usize,
    /// Predictor labels: FS, FSNR, AS, HS, HS-snap, oracle.
    #[serde(default = "default_predictors")]
    pub predictors: Vec<String>,
}

fn default_predictors() -> Vec<String> {
    ["FS", "FSNR", "AS", "HS"].map(String::from).to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub name: String,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub steps: usize,
    #[serde(default = "default_predictors")]
    pub predictors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    /// Isotropic native spacings, in mm.
    pub spacings: Vec<f64>,
    pub regimes: Vec<String>,
    pub warmups: usize,
    pub runs: usize,
    /// Test phantom used as the benchmark image.
    #[serde(default)]
    pub case: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            spacings: vec![1.0, 2.0, 3.0],
            regimes: vec!["HS".into(), "FS".into()],
            warmups: 2,
            runs: 5,
            case: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CkaSection {
    #[serde(default)]
    pub protocol: CkaProtocolConfig,
    /// Seed of a second HS training run for the cross-hypernetwork map.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-reference checks; all failures are configuration errors.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.phantom.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.unet.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.phantom.dim != self.unet.dim {
            return bad(format!("phantom dim {} != unet dim {}", self.phantom.dim, self.unet.dim));
        }
        if self.phantom.num_classes != self.unet.num_classes {
            return bad(format!(
                "phantom num_classes {} != unet num_classes {}",
                self.phantom.num_classes, self.unet.num_classes
            ));
        }
        let p = param_count(&self.unet);
        if let Some(d) = self.hypernet.output_dim {
            if d != p {
                return bad(format!("hypernet output_dim {d} != U-Net parameter count {p}"));
            }
        }
        if self.train_cases == 0 || self.test_cases == 0 {
            return bad("train_cases and test_cases must be positive".into());
        }
        let reference = self.phantom.reference();
        let check = |what: &str, r: &SpacingRange| {
            check_above_reference(r, &reference).map_err(|e| CliError::Config(format!("{what}: {e}")))
        };
        check("training.range", &self.training.range)?;
        if !(self.training.r_fixed >= self.phantom.reference_spacing) {
            return bad(format!(
                "r_fixed {} lies below the reference spacing {}",
                self.training.r_fixed, self.phantom.reference_spacing
            ));
        }
        for regime in ["FS", "AS", "HS"] {
            self.train_config(&self.regime(regime)?, self.seed)
                .validate()
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        if !self.evaluation.intervals.iter().any(|i| i.name == self.evaluation.primary) {
            return bad(format!("primary interval {:?} is not defined", self.evaluation.primary));
        }
        for iv in &self.evaluation.intervals {
            check(&format!("interval {}", iv.name), &iv.range)?;
            if iv.draws == 0 {
                return bad(format!("interval {} has zero draws", iv.name));
            }
            for p in &iv.predictors {
                check_predictor(p)?;
            }
        }
        for s in &self.evaluation.segments {
            if s.start.len() != self.unet.dim || s.end.len() != self.unet.dim || s.steps < 2 {
                return bad(format!("segment {} needs {}-d endpoints and ≥ 2 steps", s.name, self.unet.dim));
            }
            if s.start.iter().chain(&s.end).any(|&v| v < self.phantom.reference_spacing) {
                return bad(format!("segment {} reaches below the reference spacing", s.name));
            }
            for p in &s.predictors {
                check_predictor(p)?;
            }
        }
        let b = &self.evaluation.bench;
        if b.spacings.iter().any(|&s| s < self.phantom.reference_spacing) {
            return bad("bench spacing below the reference spacing".into());
        }
        for r in &b.regimes {
            check_predictor(r)?;
        }
        if b.case >= self.test_cases {
            return bad(format!("bench case {} but only {} test cases", b.case, self.test_cases));
        }
        Ok(())
    }

    pub fn fixed_spacing(&self) -> Spacing {
        Spacing::isotropic(self.training.r_fixed, self.unet.dim).expect("validated positive spacing")
    }

    pub fn regime(&self, name: &str) -> Result<Regime, CliError> {
        Regime::parse(name, Some(self.fixed_spacing())).map_err(|e| CliError::Usage(e.to_string()))
    }

    /// Training configuration for one regime. FSNR trains exactly like FS.
    pub fn train_config(&self, regime: &Regime, seed: u64) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            regime: regime.clone(),
            range: t.range.clone(),
            unet: self.unet.clone(),
            hypernet: self.hypernet.clone(),
            iterations: t.iterations,
            batch_size: t.batch_size,
            patch_size_mm: t.patch_size_mm,
            optimizer: t.optimizer.clone(),
            loss_weights: t.loss_weights,
            seed,
            log_every: t.log_every,
            state_every: t.state_every,
        }
        .training_identity()
    }

    /// Smallest configuration that still exercises every stage.
    pub fn fast() -> Self {
        serde_json::from_str(FAST_CONFIG).expect("embedded config parses")
    }
}

fn check_predictor(name: &str) -> Result<(), CliError> {
    match name {
        "FS" | "FSNR" | "AS" | "HS" | "HS-snap" | "oracle" => Ok(()),
        other => Err(CliError::Config(format!("unknown predictor {other:?}"))),
    }
}

pub const FAST_CONFIG: &str = include_str!("../configs/fast.json");
pub const DESK_CONFIG: &str = include_str!("../configs/desk.json");
