//! Stages of the desk experiment. Each stage writes into its own directory
//! under the run directory and skips itself when a `stamp.json` shows it
//! already ran with the same inputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use hyperspace::cka::{run_cka_protocol, CkaBundle, CkaProtocolConfig};
use hyperspace::evaluation::{
    bench_csv, benchmark, dense_sweep, evaluate_mc, results_csv, summarize, summary_csv, sweep_csv, BenchResult,
    EvalRow, Model, ModelPredictor, OraclePredictor, Predictor, Segment, Summary, SweepRow,
};
use hyperspace::segnet::Stage;
use hyperspace::synthdata::{generate_indexed, PhantomSpec, SpacingRange};
use hyperspace::training::{train, Dataset, Regime, TrainConfig, CHECKPOINT_FILE};
use hyperspace::volume::{load_labels, load_volume, resample_image, save_labels, save_volume, LabelMap, Spacing, Volume};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{plot, CliError, CliResult};

const STAMP: &str = "stamp.json";

fn fresh<S: Serialize>(dir: &Path, stamp: &S) -> bool {
    let Ok(text) = fs::read_to_string(dir.join(STAMP)) else {
        return false;
    };
    match (serde_json::from_str::<serde_json::Value>(&text), serde_json::to_value(stamp)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

fn mark<S: Serialize>(dir: &Path, stamp: &S) -> CliResult<()> {
    fs::write(dir.join(STAMP), serde_json::to_string_pretty(stamp)?)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn fnv(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn note(msg: impl AsRef<str>) {
    eprintln!("[hyperspace] {}", msg.as_ref());
}

// ---------------------------------------------------------------- data

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub image: String,
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub reference_spacing: Vec<f64>,
    pub range: SpacingRange,
    pub phantom: PhantomSpec,
    pub train: Vec<PairEntry>,
    pub test: Vec<PairEntry>,
    /// Extra unlabeled-use phantoms for the CKA protocol.
    #[serde(default)]
    pub cka: Vec<PairEntry>,
}

pub const MANIFEST: &str = "manifest.json";

pub fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

/// Phantom indices: train first, then test, then the CKA images, so the
/// splits never share a phantom.
pub fn synth(cfg: &RunConfig, out: &Path) -> CliResult<Manifest> {
    let dir = data_dir(out);
    let n_cka = cfg.cka.protocol.n_images;
    let stamp = (&cfg.phantom, cfg.train_cases, cfg.test_cases, n_cka, &cfg.training.range);
    if fresh(&dir, &stamp) {
        return read_json(&dir.join(MANIFEST));
    }
    fs::create_dir_all(&dir)?;
    let t0 = Instant::now();
    let mut next = 0u64;
    let mut split = |name: &str, n: usize| -> CliResult<Vec<PairEntry>> {
        fs::create_dir_all(dir.join(name))?;
        let mut v = Vec::with_capacity(n);
        for i in 0..n {
            let (img, lab) = generate_indexed(&cfg.phantom, next)?;
            next += 1;
            let e = PairEntry {
                image: format!("{name}/case_{i:03}_image.raw"),
                labels: format!("{name}/case_{i:03}_labels.raw"),
            };
            save_volume(&img, &dir.join(&e.image))?;
            save_labels(&lab, &dir.join(&e.labels))?;
            v.push(e);
        }
        Ok(v)
    };
    let train = split("train", cfg.train_cases)?;
    let test = split("test", cfg.test_cases)?;
    let cka = split("cka", n_cka)?;
    let manifest = Manifest {
        reference_spacing: cfg.phantom.reference().as_slice().to_vec(),
        range: cfg.training.range.clone(),
        phantom: cfg.phantom.clone(),
        train,
        test,
        cka,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    mark(&dir, &stamp)?;
    note(format!(
        "synthesised {} phantoms in {:.1}s",
        next,
        t0.elapsed().as_secs_f64()
    ));
    Ok(manifest)
}

pub fn load_pairs(manifest_dir: &Path, entries: &[PairEntry]) -> CliResult<Vec<(Volume, LabelMap)>> {
    entries
        .iter()
        .map(|e| {
            Ok((
                load_volume(&manifest_dir.join(&e.image))?,
                load_labels(&manifest_dir.join(&e.labels))?,
            ))
        })
        .collect()
}

// ---------------------------------------------------------------- training

pub fn train_dir(out: &Path, cfg: &TrainConfig) -> PathBuf {
    out.join("train").join(format!("{}-seed{}", cfg.regime.training_key(), cfg.seed))
}

/// Trains (or reuses) the checkpoint for `regime`; FS and FSNR share one.
pub fn train_regime(cfg: &RunConfig, out: &Path, regime: &Regime, seed: u64) -> CliResult<PathBuf> {
    let tc = cfg.train_config(regime, seed);
    let dir = train_dir(out, &tc);
    let ckpt = dir.join(CHECKPOINT_FILE);
    if ckpt.exists() && fresh(&dir, &tc) {
        note(format!("{}: reusing {}", regime.name(), ckpt.display()));
        return Ok(ckpt);
    }
    let manifest = synth(cfg, out)?;
    let pairs = load_pairs(&data_dir(out), &manifest.train)?;
    fs::create_dir_all(&dir)?;
    let _lock = RunLock::acquire(&dir)?;
    write_json(&dir.join("config.json"), &tc)?;
    let t0 = Instant::now();
    let label = format!("{} seed {}", tc.regime.training_key(), seed);
    let every = (tc.iterations / 20).max(1);
    let mut progress = |step: usize, s: &hyperspace::training::StepStats, r: &Spacing| {
        if step % every == 0 || step == tc.iterations {
            note(format!(
                "train {label}: step {step}/{} loss {:.4} |g| {:.3} r {:?} ({:.0}s)",
                tc.iterations,
                s.loss,
                s.grad_norm,
                r.as_slice(),
                t0.elapsed().as_secs_f64()
            ));
        }
    };
    train(&tc, &Dataset::new(pairs), Some(&dir), &mut progress)?;
    mark(&dir, &tc)?;
    Ok(ckpt)
}

/// Keeps two processes from training into the same directory. A lock left
/// by a process that no longer exists is taken over.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> CliResult<Self> {
        let path = dir.join("train.lock");
        if let Ok(pid) = fs::read_to_string(&path) {
            let pid = pid.trim();
            if pid != std::process::id().to_string() && Path::new("/proc").join(pid).exists() {
                return Err(CliError::Runtime(anyhow!(
                    "{} is being trained by process {pid}",
                    dir.display()
                )));
            }
        }
        fs::write(&path, std::process::id().to_string())?;
        Ok(Self(path))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

// ---------------------------------------------------------------- models

pub struct Models {
    pub fs: Model,
    pub fsnr: Model,
    pub as_: Model,
    pub hs: Model,
}

impl Models {
    pub fn train_or_load(cfg: &RunConfig, out: &Path) -> CliResult<Self> {
        let fixed = cfg.regime("fs")?;
        let fs = Model::load(&train_regime(cfg, out, &fixed, cfg.seed)?)?;
        let fsnr = fs.as_regime(cfg.regime("fsnr")?)?;
        let as_ = Model::load(&train_regime(cfg, out, &Regime::As, cfg.seed)?)?;
        let hs = Model::load(&train_regime(cfg, out, &Regime::Hs, cfg.seed)?)?;
        Ok(Self { fs, fsnr, as_, hs })
    }

    pub fn predictor(&self, label: &str) -> Box<dyn Predictor + '_> {
        let (model, snap) = match label {
            "FS" => (&self.fs, false),
            "FSNR" => (&self.fsnr, false),
            "AS" => (&self.as_, false),
            "HS" => (&self.hs, false),
            "HS-snap" => (&self.hs, true),
            _ => return Box::new(OraclePredictor),
        };
        Box::new(ModelPredictor {
            label: label.to_string(),
            model,
            snap,
        })
    }

    pub fn model(&self, label: &str) -> &Model {
        match label {
            "FS" => &self.fs,
            "FSNR" => &self.fsnr,
            "AS" => &self.as_,
            _ => &self.hs,
        }
    }
}

// ---------------------------------------------------------------- evaluation

/// Inputs that decide every result downstream of training.
fn model_stamp(cfg: &RunConfig) -> serde_json::Value {
    serde_json::json!({
        "seed": cfg.seed,
        "phantom": cfg.phantom,
        "train_cases": cfg.train_cases,
        "test_cases": cfg.test_cases,
        "unet": cfg.unet,
        "hypernet": cfg.hypernet,
        "training": cfg.training,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalResult {
    pub name: String,
    pub range: SpacingRange,
    pub summary: Vec<Summary>,
}

impl IntervalResult {
    pub fn mean(&self, label: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.regime == label).map(|s| s.mean)
    }
}

pub fn eval(cfg: &RunConfig, out: &Path, models: &Models) -> CliResult<Vec<IntervalResult>> {
    let manifest = synth(cfg, out)?;
    let test = load_pairs(&data_dir(out), &manifest.test)?;
    let mut results = Vec::new();
    for iv in &cfg.evaluation.intervals {
        let dir = out.join("eval").join(&iv.name);
        let stamp = serde_json::json!({ "models": model_stamp(cfg), "interval": iv });
        let summary_path = dir.join("summary.json");
        let summary: Vec<Summary> = if fresh(&dir, &stamp) {
            read_json(&summary_path)?
        } else {
            fs::create_dir_all(&dir)?;
            let t0 = Instant::now();
            let preds: Vec<Box<dyn Predictor + '_>> = iv.predictors.iter().map(|p| models.predictor(p)).collect();
            let refs: Vec<&dyn Predictor> = preds.iter().map(|b| b.as_ref()).collect();
            let rows: Vec<EvalRow> = evaluate_mc(&refs, &test, &iv.range, iv.draws, cfg.seed ^ fnv(&iv.name))?;
            let summary = summarize(&rows);
            fs::write(dir.join("results.csv"), results_csv(&rows))?;
            fs::write(dir.join("summary.csv"), summary_csv(&summary))?;
            write_json(&summary_path, &summary)?;
            mark(&dir, &stamp)?;
            note(format!(
                "eval {} ({} rows, {:.0}s): {}",
                iv.name,
                rows.len(),
                t0.elapsed().as_secs_f64(),
                summary.iter().map(|s| format!("{} {}", s.regime, s.cell())).collect::<Vec<_>>().join(", ")
            ));
            summary
        };
        results.push(IntervalResult {
            name: iv.name.clone(),
            range: iv.range.clone(),
            summary,
        });
    }
    let primary = results
        .iter()
        .find(|r| r.name == cfg.evaluation.primary)
        .ok_or_else(|| CliError::Config(format!("primary interval {:?} missing", cfg.evaluation.primary)))?;
    fs::write(out.join("summary.csv"), summary_csv(&primary.summary))?;
    fs::write(out.join("table.csv"), table_csv(&results))?;
    Ok(results)
}

/// Intervals as rows, predictors as columns, "mean (std)" cells.
pub fn table_csv(results: &[IntervalResult]) -> String {
    let mut cols: Vec<String> = Vec::new();
    for r in results {
        for s in &r.summary {
            if !cols.contains(&s.regime) {
                cols.push(s.regime.clone());
            }
        }
    }
    let mut s = format!("interval,range,{}\n", cols.join(","));
    for r in results {
        let cells: Vec<String> = cols
            .iter()
            .map(|c| {
                r.summary
                    .iter()
                    .find(|x| &x.regime == c)
                    .map(|x| x.cell())
                    .unwrap_or_default()
            })
            .collect();
        s.push_str(&format!("{},{},{}\n", r.name, r.range.to_string().replace(',', ";"), cells.join(",")));
    }
    s
}

// ---------------------------------------------------------------- sweep

pub fn sweep(cfg: &RunConfig, out: &Path, models: &Models) -> CliResult<Vec<(String, Vec<SweepRow>)>> {
    let manifest = synth(cfg, out)?;
    let test = load_pairs(&data_dir(out), &manifest.test)?;
    let dir = out.join("sweep");
    fs::create_dir_all(&dir)?;
    let mut all = Vec::new();
    for seg in &cfg.evaluation.segments {
        let stamp = serde_json::json!({ "models": model_stamp(cfg), "segment": seg });
        let sub = dir.join(&seg.name);
        let json = sub.join("sweep.json");
        let rows: Vec<SweepRow> = if fresh(&sub, &stamp) {
            read_json(&json)?
        } else {
            fs::create_dir_all(&sub)?;
            let segment = Segment {
                start: Spacing::new(seg.start.clone())?,
                end: Spacing::new(seg.end.clone())?,
                steps: seg.steps,
            };
            let preds: Vec<Box<dyn Predictor + '_>> = seg.predictors.iter().map(|p| models.predictor(p)).collect();
            let refs: Vec<&dyn Predictor> = preds.iter().map(|b| b.as_ref()).collect();
            let t0 = Instant::now();
            let rows = dense_sweep(&refs, &test, &segment, &cfg.training.range)?;
            fs::write(sub.join("sweep.csv"), sweep_csv(&rows))?;
            write_json(&json, &rows)?;
            mark(&sub, &stamp)?;
            note(format!("sweep {} done in {:.0}s", seg.name, t0.elapsed().as_secs_f64()));
            rows
        };
        plot::sweep_svg(&rows, &cfg.training.range, &seg.name, &sub.join("sweep.svg"))?;
        all.push((seg.name.clone(), rows));
    }
    Ok(all)
}

// ---------------------------------------------------------------- bench

pub fn bench(cfg: &RunConfig, out: &Path, models: &Models) -> CliResult<Vec<BenchResult>> {
    let manifest = synth(cfg, out)?;
    let b = &cfg.evaluation.bench;
    let dir = out.join("bench");
    let stamp = serde_json::json!({ "models": model_stamp(cfg), "bench": b });
    if fresh(&dir, &stamp) {
        return read_json(&dir.join("bench.json"));
    }
    fs::create_dir_all(&dir)?;
    let pair = load_pairs(&data_dir(out), &manifest.test[b.case..=b.case])?;
    let image = &pair[0].0;
    let mut rows = Vec::new();
    for label in &b.regimes {
        let model = models.model(label);
        for &mm in &b.spacings {
            let native = resample_image(image, &Spacing::isotropic(mm, image.dim())?)?;
            let mut r = benchmark(model, &native, label == "HS-snap", b.warmups, b.runs)?;
            r.regime = label.clone();
            note(format!(
                "bench {label} at {mm} mm: {:.3}s median (hypernet {:.4}s), peak {} bytes [{}]",
                r.median_s, r.hypernet_median_s, r.peak_bytes, r.mem_source
            ));
            rows.push(r);
        }
    }
    fs::write(dir.join("bench.csv"), bench_csv(&rows))?;
    write_json(&dir.join("bench.json"), &rows)?;
    mark(&dir, &stamp)?;
    Ok(rows)
}

// ---------------------------------------------------------------- CKA

/// Numbers the CKA acceptance check needs, kept next to the map CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaStats {
    pub spacings: Vec<f64>,
    pub reference_spacing: f64,
    pub map_count: usize,
    pub intra_maps: usize,
    pub inter_maps: usize,
    pub has_cross_seed: bool,
    /// Largest |diag − 1| over all intra maps, dead layers included.
    pub intra_diag_error: f64,
    pub min_entry: f64,
    pub max_entry: f64,
    pub inter_minima: Vec<String>,
    pub inter_minima_stages: Vec<Stage>,
    pub bottleneck_minima: usize,
    pub dead_layers: Vec<String>,
    pub elapsed_s: f64,
}

impl CkaStats {
    pub fn from_bundle(b: &CkaBundle, elapsed_s: f64) -> Self {
        let maps = b.intra.iter().chain(&b.inter).chain(b.cross_seed.iter());
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for m in maps {
            for v in m.values.iter().flatten() {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        let diag_err = b
            .intra
            .iter()
            .flat_map(|m| {
                m.diagonal().into_iter().map(|d| (d - 1.0).abs())
            })
            .fold(0.0, f64::max);
        let mut dead: Vec<String> = b.intra.iter().flat_map(|m| m.dead_layers.clone()).collect();
        dead.sort();
        dead.dedup();
        let minima = b.inter_minima();
        Self {
            spacings: b.spacings.clone(),
            reference_spacing: b.spacings[b.reference_index],
            map_count: b.map_count(),
            intra_maps: b.intra.len(),
            inter_maps: b.inter.len(),
            has_cross_seed: b.cross_seed.is_some(),
            intra_diag_error: diag_err,
            min_entry: lo,
            max_entry: hi,
            inter_minima: minima.iter().map(|l| l.name.clone()).collect(),
            inter_minima_stages: minima.iter().map(|l| l.stage).collect(),
            bottleneck_minima: b.bottleneck_minima(),
            dead_layers: dead,
            elapsed_s,
        }
    }
}

/// The protocol itself: writes the bundle, heat maps and `stats.json`.
pub fn cka_run(
    model: &Model,
    second: Option<&Model>,
    images: &[Volume],
    protocol: &CkaProtocolConfig,
    dir: &Path,
) -> CliResult<CkaStats> {
    fs::create_dir_all(dir)?;
    let t0 = Instant::now();
    let mut progress = |m: &str| note(format!("cka: {m} ({:.0}s)", t0.elapsed().as_secs_f64()));
    let bundle = run_cka_protocol(model, second, images, protocol, &mut progress)?;
    bundle.write(dir)?;
    let stats = CkaStats::from_bundle(&bundle, t0.elapsed().as_secs_f64());
    write_json(&dir.join("stats.json"), &stats)?;
    plot::cka_figures(dir)?;
    Ok(stats)
}

pub fn cka(cfg: &RunConfig, out: &Path, models: &Models) -> CliResult<CkaStats> {
    let dir = out.join("cka");
    let stamp = serde_json::json!({ "models": model_stamp(cfg), "cka": cfg.cka });
    if fresh(&dir, &stamp) {
        return read_json(&dir.join("stats.json"));
    }
    let second = match cfg.cka.second_seed {
        Some(seed) => Some(Model::load(&train_regime(cfg, out, &Regime::Hs, seed)?)?),
        None => None,
    };
    let manifest = synth(cfg, out)?;
    let images = cka_images(&data_dir(out), &manifest, cfg.cka.protocol.n_images)?;
    let stats = cka_run(&models.hs, second.as_ref(), &images, &cfg.cka.protocol, &dir)?;
    mark(&dir, &stamp)?;
    Ok(stats)
}

/// The dedicated CKA split, topped up from test and train when short.
pub fn cka_images(dir: &Path, manifest: &Manifest, n: usize) -> CliResult<Vec<Volume>> {
    let entries: Vec<PairEntry> = manifest
        .cka
        .iter()
        .chain(&manifest.test)
        .chain(&manifest.train)
        .take(n)
        .cloned()
        .collect();
    if entries.is_empty() {
        return Err(CliError::Runtime(anyhow!("manifest lists no images")));
    }
    entries
        .iter()
        .map(|e| Ok(load_volume(&dir.join(&e.image))?))
        .collect()
}

// ---------------------------------------------------------------- reproduce

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub intervals: Vec<IntervalResult>,
    pub sweeps: Vec<(String, Vec<SweepRow>)>,
    pub bench: Vec<BenchResult>,
    pub cka: CkaStats,
}

/// Whole pipeline; returns the report and writes `report/` under `out`.
pub fn reproduce(cfg: &RunConfig, out: &Path) -> CliResult<Report> {
    let t0 = Instant::now();
    fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), cfg)?;
    synth(cfg, out)?;
    let models = Models::train_or_load(cfg, out)?;
    let intervals = eval(cfg, out, &models)?;
    let sweeps = sweep(cfg, out, &models)?;
    let bench = bench(cfg, out, &models)?;
    let cka = cka(cfg, out, &models)?;
    let report = Report {
        intervals,
        sweeps,
        bench,
        cka,
    };
    write_report(cfg, out, &report)?;
    note(format!("reproduce finished in {:.0}s", t0.elapsed().as_secs_f64()));
    Ok(report)
}

/// Report directory laid out like the three result displays: the Dice
/// table, the cost/sweep figure and the CKA figure.
pub fn write_report(cfg: &RunConfig, out: &Path, report: &Report) -> CliResult<()> {
    let dir = out.join("report");
    let (table, fig2, fig3) = (dir.join("table2"), dir.join("fig2"), dir.join("fig3"));
    for d in [&table, &fig2, &fig3] {
        fs::create_dir_all(d)?;
    }
    fs::write(table.join("table.csv"), table_csv(&report.intervals))?;
    fs::copy(out.join("summary.csv"), table.join("summary.csv"))?;
    for (name, rows) in &report.sweeps {
        fs::write(fig2.join(format!("sweep_{name}.csv")), sweep_csv(rows))?;
        plot::sweep_svg(rows, &cfg.training.range, name, &fig2.join(format!("sweep_{name}.svg")))?;
    }
    fs::write(fig2.join("bench.csv"), bench_csv(&report.bench))?;
    plot::bench_svg(&report.bench, &fig2.join("bench.svg"))?;
    let cka_dir = out.join("cka");
    for entry in fs::read_dir(&cka_dir)? {
        let p = entry?.path();
        if matches!(p.extension().and_then(|e| e.to_str()), Some("svg" | "csv" | "json")) {
            fs::copy(&p, fig3.join(p.file_name().expect("file entry")))?;
        }
    }
    plot::loss_figures(out, &dir.join("loss.svg"))?;
    write_json(&dir.join("report.json"), report)?;
    Ok(())
}
