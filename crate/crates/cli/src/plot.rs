//! SVG figures: Dice-vs-spacing sweeps, benchmark curves, loss curves and
//! CKA heat maps.

use std::fs;
use std::path::Path;

use anyhow::anyhow;
use hyperspace::evaluation::{BenchResult, SweepRow};
use hyperspace::synthdata::SpacingRange;
use hyperspace::training::{read_loss_csv, LOSS_CSV};
use plotters::prelude::*;

use crate::CliResult;

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow!("plotting: {e}")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Mean Dice along a spacing segment, one line per predictor; the part of
/// the segment inside the training range is shaded.
pub fn sweep_svg(rows: &[SweepRow], range: &SpacingRange, title: &str, path: &Path) -> CliResult<()> {
    let x = |r: &SweepRow| mean(r.spacing.as_slice());
    let (x0, x1) = bounds(rows.iter().map(x));
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("Dice vs spacing ({title})"), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, 0.0..1.0)
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_desc("mean spacing [mm]")
        .y_desc("mean Dice")
        .draw()
        .map_err(err)?;
    let inside: Vec<f64> = rows.iter().filter(|r| r.in_range).map(x).collect();
    if !inside.is_empty() {
        let (a, b) = bounds(inside.into_iter());
        chart
            .draw_series(std::iter::once(Rectangle::new(
                [(a, 0.0), (b, 1.0)],
                RGBColor(200, 200, 200).mix(0.35).filled(),
            )))
            .map_err(err)?
            .label(format!("training range {range}"))
            .legend(|(x, y)| Rectangle::new([(x, y - 5), (x + 15, y + 5)], RGBColor(200, 200, 200).filled()));
    }
    let mut regimes: Vec<&str> = Vec::new();
    for r in rows {
        if !regimes.contains(&r.regime.as_str()) {
            regimes.push(&r.regime);
        }
    }
    for (i, name) in regimes.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.regime == *name).map(|r| (x(r), r.mean_dice)).collect();
        chart
            .draw_series(LineSeries::new(pts, c.stroke_width(2)))
            .map_err(err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 15, y)], c.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerLeft)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

/// Median inference time against native spacing, one line per predictor.
pub fn bench_svg(rows: &[BenchResult], path: &Path) -> CliResult<()> {
    let x = |r: &BenchResult| mean(r.spacing.as_slice());
    let (x0, x1) = bounds(rows.iter().map(x));
    let (_, t1) = bounds(rows.iter().map(|r| r.median_s));
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Inference time vs native spacing", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, 0.0..t1 * 1.1)
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_desc("native spacing [mm]")
        .y_desc("median wall time [s]")
        .draw()
        .map_err(err)?;
    let mut regimes: Vec<&str> = Vec::new();
    for r in rows {
        if !regimes.contains(&r.regime.as_str()) {
            regimes.push(&r.regime);
        }
    }
    for (i, name) in regimes.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.regime == *name).map(|r| (x(r), r.median_s)).collect();
        chart
            .draw_series(LineSeries::new(pts, c.stroke_width(2)))
            .map_err(err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 15, y)], c.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

/// Training loss of every run under `out/train/`, if any.
pub fn loss_figures(out: &Path, path: &Path) -> CliResult<()> {
    let train = out.join("train");
    let mut runs = Vec::new();
    if train.is_dir() {
        let mut dirs: Vec<_> = fs::read_dir(&train)?.filter_map(|e| e.ok()).map(|e| e.path()).collect();
        dirs.sort();
        for d in dirs {
            let rows = read_loss_csv(&d.join(LOSS_CSV))?;
            if !rows.is_empty() {
                let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                runs.push((name, rows));
            }
        }
    }
    if runs.is_empty() {
        return Ok(());
    }
    let steps = runs.iter().flat_map(|(_, r)| r.iter().map(|x| x.step as f64));
    let (_, s1) = bounds(steps);
    let (_, l1) = bounds(runs.iter().flat_map(|(_, r)| r.iter().map(|x| x.loss)));
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Training loss", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..s1, 0.0..l1.min(3.0))
        .map_err(err)?;
    chart.configure_mesh().x_desc("step").y_desc("loss").draw().map_err(err)?;
    for (i, (name, rows)) in runs.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        // a light moving average keeps the curves readable
        let w = 10usize;
        let pts: Vec<(f64, f64)> = (0..rows.len())
            .map(|k| {
                let lo = k.saturating_sub(w - 1);
                let avg = rows[lo..=k].iter().map(|r| r.loss).sum::<f64>() / (k - lo + 1) as f64;
                (rows[k].step as f64, avg.min(3.0))
            })
            .collect();
        chart
            .draw_series(LineSeries::new(pts, c.stroke_width(1)))
            .map_err(err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 15, y)], c.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

/// Parses a map CSV (header `layer,<names>`, rows `<name>,<values>`).
pub fn read_map_csv(text: &str) -> CliResult<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| anyhow!("empty map CSV"))?;
    let cols: Vec<String> = header.split(',').skip(1).map(String::from).collect();
    let mut values = Vec::new();
    for line in lines {
        let row: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|e| anyhow!("bad map value {v:?}: {e}")))
            .collect::<Result<_, _>>()?;
        if row.len() != cols.len() {
            return Err(anyhow!("ragged map row").into());
        }
        values.push(row);
    }
    Ok((cols, values))
}

/// Heat map of a square layer-by-layer map; `signed` switches to a
/// diverging scale for slope maps.
pub fn heatmap_svg(layers: &[String], values: &[Vec<f64>], title: &str, signed: bool, path: &Path) -> CliResult<()> {
    let n = layers.len();
    let root = SVGBackend::new(path, (720, 720)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(30)
        .build_cartesian_2d(0..n, 0..n)
        .map_err(err)?;
    chart
        .configure_mesh()
        .disable_mesh()
        .x_desc("layer (b)")
        .y_desc("layer (a)")
        .x_labels(n.min(12))
        .y_labels(n.min(12))
        .draw()
        .map_err(err)?;
    let scale = if signed {
        values.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12)
    } else {
        1.0
    };
    let color = |v: f64| -> RGBColor {
        if signed {
            let t = (v / scale).clamp(-1.0, 1.0);
            let k = (255.0 * (1.0 - t.abs())) as u8;
            if t >= 0.0 {
                RGBColor(255, k, k)
            } else {
                RGBColor(k, k, 255)
            }
        } else {
            let t = v.clamp(0.0, 1.0);
            let k = (255.0 * (1.0 - t)) as u8;
            RGBColor(k, k, 255u8.saturating_sub((t * 80.0) as u8))
        }
    };
    chart
        .draw_series(values.iter().enumerate().flat_map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(move |(j, &v)| Rectangle::new([(j, i), (j + 1, i + 1)], color(v).filled()))
        }))
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

/// Renders every map CSV in a CKA bundle directory to an SVG next to it.
pub fn cka_figures(dir: &Path) -> CliResult<()> {
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    for f in files {
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let (layers, values) = read_map_csv(&fs::read_to_string(&f)?)?;
        let signed = stem.starts_with("slope");
        heatmap_svg(&layers, &values, &stem, signed, &f.with_extension("svg"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_csv_round_trip() {
        let text = "layer,a,b\na,1.00000000,0.25000000\nb,0.25000000,1.00000000\n";
        let (l, v) = read_map_csv(text).unwrap();
        assert_eq!(l, vec!["a", "b"]);
        assert_eq!(v, vec![vec![1.0, 0.25], vec![0.25, 1.0]]);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(read_map_csv("layer,a,b\na,1.0\n").is_err());
    }

    #[test]
    fn heatmap_writes_svg() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.svg");
        let layers = vec!["a".to_string(), "b".to_string()];
        heatmap_svg(&layers, &[vec![1.0, 0.5], vec![0.5, 1.0]], "m", false, &p).unwrap();
        assert!(fs::read_to_string(&p).unwrap().contains("<svg"));
    }
}
