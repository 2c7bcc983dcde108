use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hyperspace_cli::config::{DESK_CONFIG, FAST_CONFIG};
use hyperspace_cli::RunConfig;

fn hyperspace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperspace"))
        .args(args)
        .env_remove("HYPERSPACE_DEVICE")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, edit: impl FnOnce(&mut serde_json::Value)) -> String {
    let mut v: serde_json::Value = serde_json::from_str(FAST_CONFIG).unwrap();
    edit(&mut v);
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn embedded_configs_validate() {
    RunConfig::fast().validate().unwrap();
    let desk: RunConfig = serde_json::from_str(DESK_CONFIG).unwrap();
    desk.validate().unwrap();
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = hyperspace(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o).trim().lines().count(), 1, "{}", stderr(&o));
}

#[test]
fn help_exits_zero() {
    let o = hyperspace(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("reproduce"));
}

#[test]
fn mismatched_output_dim_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |v| v["hypernet"]["output_dim"] = 1234.into());
    let out = dir.path().join("run");
    let o = hyperspace(&["synth", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    let expected = hyperspace::segnet::param_count(&RunConfig::fast().unet).to_string();
    assert!(msg.contains("1234") && msg.contains(&expected), "{msg}");
}

#[test]
fn class_count_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |v| v["unet"]["num_classes"] = 3.into());
    let o = hyperspace(&["synth", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = hyperspace(&[
        "cka",
        "--checkpoint",
        dir.path().join("none.bin").to_str().unwrap(),
        "--data",
        dir.path().join("manifest.json").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn unsupported_device_is_rejected() {
    let o = Command::new(env!("CARGO_BIN_EXE_hyperspace"))
        .args(["reproduce", "--fast"])
        .env("HYPERSPACE_DEVICE", "cuda:0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn reproduce_fast_writes_four_regime_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = hyperspace(&["reproduce", "--fast", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let regimes: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(regimes, ["FS", "FSNR", "AS", "HS"]);
    for f in [
        "report/table2/table.csv",
        "report/fig2/bench.csv",
        "report/fig2/sweep_isotropic.svg",
        "report/fig3/layers.json",
        "report/report.json",
        "train/hs-seed7/loss.csv",
        "data/manifest.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let results = fs::read_to_string(out.join("eval/train/results.csv")).unwrap();
    assert!(results.starts_with("case,draw,regime,spacing,dice_1"));
}

/// Same config and seed give the same CSVs, wall-time columns aside.
#[test]
fn reruns_reproduce_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |_| {});
    let strip = |text: String| -> Vec<String> {
        text.lines()
            .map(|l| {
                let cells: Vec<&str> = l.split(',').collect();
                // drop wall_s, peak_bytes, mem_source
                cells[..cells.len() - 3].join(",")
            })
            .collect()
    };
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = hyperspace(&["eval", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        runs.push((
            strip(fs::read_to_string(out.join("eval/train/results.csv")).unwrap()),
            fs::read_to_string(out.join("summary.csv")).unwrap(),
            fs::read_to_string(out.join("train/hs-seed7/loss.csv")).unwrap(),
        ));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn plot_rerenders_figures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(hyperspace(&["reproduce", "--fast", "--out", out.to_str().unwrap()]).status.code(), Some(0));
    fs::remove_file(out.join("cka/intra_1.000.svg")).unwrap();
    let o = hyperspace(&["plot", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("cka/intra_1.000.svg").exists());
    assert!(out.join("loss.svg").exists());
}

#[test]
fn standalone_cka_reads_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), |_| {});
    assert_eq!(hyperspace(&["reproduce", "--config", &cfg, "--out", out.to_str().unwrap()]).status.code(), Some(0));
    let maps = dir.path().join("maps");
    let o = hyperspace(&[
        "cka",
        "--checkpoint",
        out.join("train/hs-seed7/checkpoint.bin").to_str().unwrap(),
        "--checkpoint2",
        out.join("train/hs-seed7/checkpoint.bin").to_str().unwrap(),
        "--data",
        out.join("data/manifest.json").to_str().unwrap(),
        "--config",
        &cfg,
        "--out",
        maps.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    // identical networks: the cross-seed map is all ones on the diagonal
    let text = fs::read_to_string(maps.join("cross_seed.csv")).unwrap();
    let (layers, values) = hyperspace_cli::plot::read_map_csv(&text).unwrap();
    for i in 0..layers.len() {
        assert!((values[i][i] - 1.0).abs() < 1e-6);
    }
    assert!(maps.join("layers.json").exists() && maps.join("cross_seed.svg").exists());
}
