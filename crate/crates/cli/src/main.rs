use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hyperspace::evaluation::Model;
use hyperspace::memprobe::CountingAlloc;
use hyperspace_cli::pipeline::{self, read_json, Manifest, Models};
use hyperspace_cli::{plot, CliError, CliResult, RunConfig};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

/// Spacing-conditioned segmentation experiments on synthetic phantoms.
#[derive(Parser, Debug)]
#[command(name = "hyperspace", version)]
struct Cli {
    /// Compute device; only `cpu` is available in this build.
    #[arg(long, env = "HYPERSPACE_DEVICE", default_value = "cpu", global = true)]
    device: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run directory; defaults to the config's `out` field.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/test/CKA phantoms and their manifest.
    Synth(Common),
    /// Train one regime (fs, fsnr, as, hs); fs and fsnr share a checkpoint.
    Train {
        #[arg(long)]
        regime: String,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Monte-Carlo Dice evaluation over the configured intervals.
    Eval(Common),
    /// Dice along the configured spacing segments.
    Sweep(Common),
    /// Inference time and peak memory at the configured native spacings.
    Bench(Common),
    /// CKA maps of a hypernetwork checkpoint over the spacing grid.
    Cka {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second hypernetwork (different seed) for the cross-seed map.
        #[arg(long)]
        checkpoint2: Option<PathBuf>,
        /// Data manifest written by `synth`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Take protocol settings from this run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Re-render all figures of a run directory.
    Plot {
        #[arg(long)]
        out: PathBuf,
    },
    /// Whole pipeline: synth, train, eval, sweep, bench, CKA, report.
    Reproduce {
        #[arg(long, required_unless_present = "fast")]
        config: Option<PathBuf>,
        /// Use the smallest built-in configuration.
        #[arg(long)]
        fast: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(cfg: &RunConfig, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs/default"))
}

fn setup(common: Common) -> CliResult<(RunConfig, PathBuf)> {
    let cfg = RunConfig::load(&common.config)?;
    let out = out_dir(&cfg, common.out);
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    Ok((cfg, out))
}

fn run(cli: Cli) -> CliResult<()> {
    if !cli.device.eq_ignore_ascii_case("cpu") {
        return Err(CliError::Usage(format!(
            "device {:?} unavailable; this build runs on cpu only",
            cli.device
        )));
    }
    match cli.command {
        Command::Synth(c) => {
            let (cfg, out) = setup(c)?;
            let m = pipeline::synth(&cfg, &out)?;
            println!(
                "{} train, {} test, {} CKA phantoms in {}",
                m.train.len(),
                m.test.len(),
                m.cka.len(),
                pipeline::data_dir(&out).display()
            );
        }
        Command::Train { regime, seed, common } => {
            let (cfg, out) = setup(common)?;
            let regime = cfg.regime(&regime)?;
            let path = pipeline::train_regime(&cfg, &out, &regime, seed.unwrap_or(cfg.seed))?;
            println!("{}", path.display());
        }
        Command::Eval(c) => {
            let (cfg, out) = setup(c)?;
            let models = Models::train_or_load(&cfg, &out)?;
            pipeline::eval(&cfg, &out, &models)?;
            print!("{}", std::fs::read_to_string(out.join("table.csv"))?);
        }
        Command::Sweep(c) => {
            let (cfg, out) = setup(c)?;
            let models = Models::train_or_load(&cfg, &out)?;
            for (name, rows) in pipeline::sweep(&cfg, &out, &models)? {
                println!("{name}: {} rows", rows.len());
            }
        }
        Command::Bench(c) => {
            let (cfg, out) = setup(c)?;
            let models = Models::train_or_load(&cfg, &out)?;
            let rows = pipeline::bench(&cfg, &out, &models)?;
            print!("{}", hyperspace::evaluation::bench_csv(&rows));
        }
        Command::Cka {
            checkpoint,
            checkpoint2,
            data,
            out,
            config,
        } => {
            let protocol = match config {
                Some(p) => RunConfig::load(&p)?.cka.protocol,
                None => Default::default(),
            };
            let manifest: Manifest = read_json(&data)?;
            let base = data.parent().unwrap_or(Path::new("."));
            let images = pipeline::cka_images(base, &manifest, protocol.n_images)?;
            let model = Model::load(&checkpoint)?;
            let second = checkpoint2.map(|p| Model::load(&p)).transpose()?;
            let stats = pipeline::cka_run(&model, second.as_ref(), &images, &protocol, &out)?;
            println!(
                "{} maps; inter-network minima at bottleneck in {}/{}",
                stats.map_count, stats.bottleneck_minima, stats.inter_maps
            );
        }
        Command::Plot { out } => {
            let cfg: RunConfig = read_json(&out.join("config.json"))?;
            let sweep_dir = out.join("sweep");
            for s in &cfg.evaluation.segments {
                let json = sweep_dir.join(&s.name).join("sweep.json");
                if json.exists() {
                    let rows: Vec<hyperspace::evaluation::SweepRow> = read_json(&json)?;
                    plot::sweep_svg(&rows, &cfg.training.range, &s.name, &json.with_extension("svg"))?;
                }
            }
            let bench = out.join("bench").join("bench.json");
            if bench.exists() {
                plot::bench_svg(&read_json::<Vec<_>>(&bench)?, &bench.with_extension("svg"))?;
            }
            if out.join("cka").is_dir() {
                plot::cka_figures(&out.join("cka"))?;
            }
            plot::loss_figures(&out, &out.join("loss.svg"))?;
            println!("figures written under {}", out.display());
        }
        Command::Reproduce { config, fast, out } => {
            let cfg = match (config, fast) {
                (_, true) => RunConfig::fast(),
                (Some(p), false) => RunConfig::load(&p)?,
                (None, false) => return Err(CliError::Usage("reproduce needs --config or --fast".into())),
            };
            let out = out_dir(&cfg, out);
            pipeline::reproduce(&cfg, &out)?;
            print!("{}", std::fs::read_to_string(out.join("report").join("table2").join("table.csv"))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            if code == 0 {
                let _ = e.print();
            } else {
                // keep the diagnostic to one line
                let msg = e.to_string();
                let first = msg.lines().next().unwrap_or("invalid arguments");
                eprintln!("usage error: {}", first.trim_start_matches("error: "));
            }
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
