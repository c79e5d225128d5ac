use std::fs;
use std::path::{Path, PathBuf};

use asagan::trainer::TrainLogRecord;
use plotters::prelude::*;

use crate::CliError;

const SIZE: (u32, u32) = (800, 500);

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub fn read_log(path: &Path) -> Result<Vec<TrainLogRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line)
            .map_err(|e| CliError::Runtime(format!("{}:{}: {e}", path.display(), i + 1)))?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(CliError::Runtime(format!("{}: no records", path.display())));
    }
    Ok(records)
}

fn draw(path: &Path, title: &str, y_label: &str, series: &[Series]) -> Result<(), CliError> {
    let err = |e: &dyn std::fmt::Display| CliError::Runtime(format!("{}: {e}", path.display()));
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|p| p.1.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-9);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc(y_label)
        .draw()
        .map_err(|e| err(&e))?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.points.iter().copied().filter(|p| p.1.is_finite()), color.stroke_width(2)))
            .map_err(|e| err(&e))?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))
}

fn run_label(path: &Path) -> String {
    let name = path.parent().and_then(|p| p.file_name()).or_else(|| path.file_stem());
    name.map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

/// Writes `convergence.svg` (evaluation distance against step, one line per
/// log) and `losses.svg` (discriminator and generator losses).
pub fn plot(logs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut convergence = Vec::new();
    let mut losses = Vec::new();
    for path in logs {
        let recs = read_log(path)?;
        let label = run_label(path);
        convergence.push(Series {
            label: label.clone(),
            points: recs.iter().filter_map(|r| r.eval.as_ref().map(|e| (r.step as f64, e.fd_proxy))).collect(),
        });
        losses.push(Series {
            label: format!("{label} D"),
            points: recs.iter().map(|r| (r.step as f64, r.loss_d)).collect(),
        });
        losses.push(Series {
            label: format!("{label} G"),
            points: recs.iter().map(|r| (r.step as f64, r.loss_g)).collect(),
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| CliError::Runtime(format!("{}: {e}", out_dir.display())))?;
    let conv = out_dir.join("convergence.svg");
    let loss = out_dir.join("losses.svg");
    draw(&conv, "Frechet distance", "distance", &convergence)?;
    draw(&loss, "Losses", "loss", &losses)?;
    for p in [&conv, &loss] {
        println!("{}", p.display());
    }
    Ok(vec![conv, loss])
}
