//! Run summaries: a markdown table over every metrics.json found under a
//! directory, plus one loss-curve PNG per run.

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use image::{Rgb, RgbImage};
use std::path::{Path, PathBuf};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 420;
const MARGIN: u32 = 40;

const SERIES_COLORS: [(&str, Rgb<u8>); 4] = [
    ("total", Rgb([20, 20, 20])),
    ("mse", Rgb([40, 90, 220])),
    ("at", Rgb([210, 60, 50])),
    ("ld", Rgb([40, 160, 70])),
];

fn series_values(report: &MetricsReport, name: &str) -> Vec<f64> {
    report
        .epoch_losses
        .iter()
        .map(|e| match name {
            "total" => e.total,
            "mse" => e.mse,
            "at" => e.at,
            _ => e.ld,
        })
        .collect()
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = (a.0 - b.0).abs().max((a.1 - b.1).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Loss components over epochs as a PNG. Flat-zero components other than
/// the total are left out to keep the plot readable.
pub fn plot_loss_curves(report: &MetricsReport, path: &Path) -> Result<()> {
    if report.epoch_losses.is_empty() {
        return Err(Error::config("no epoch losses to plot"));
    }
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let axis = Rgb([120, 120, 120]);
    let (x0, y0) = (MARGIN as f64, (HEIGHT - MARGIN) as f64);
    let (x1, y1) = ((WIDTH - MARGIN) as f64, MARGIN as f64);
    draw_line(&mut img, (x0, y0), (x1, y0), axis);
    draw_line(&mut img, (x0, y0), (x0, y1), axis);

    let active: Vec<(&str, Rgb<u8>, Vec<f64>)> = SERIES_COLORS
        .iter()
        .map(|(name, color)| (*name, *color, series_values(report, name)))
        .filter(|(name, _, vals)| *name == "total" || vals.iter().any(|v| *v != 0.0))
        .collect();
    let mut max_v = f64::MIN;
    let mut min_v = f64::MAX;
    for (_, _, vals) in &active {
        for v in vals {
            max_v = max_v.max(*v);
            min_v = min_v.min(*v);
        }
    }
    min_v = min_v.min(0.0);
    if !(max_v > min_v) {
        max_v = min_v + 1.0;
    }
    let n = report.epoch_losses.len();
    let to_px = |epoch: usize, v: f64| {
        let fx = if n == 1 { 0.5 } else { epoch as f64 / (n - 1) as f64 };
        let fy = (v - min_v) / (max_v - min_v);
        (x0 + fx * (x1 - x0), y0 + fy * (y1 - y0))
    };
    for (tick, &frac) in [0.0f64, 0.25, 0.5, 0.75, 1.0].iter().enumerate() {
        let _ = tick;
        let y = y0 + frac * (y1 - y0);
        draw_line(&mut img, (x0 - 4.0, y), (x0, y), axis);
    }
    for (slot, (_, color, vals)) in active.iter().enumerate() {
        for i in 1..n {
            draw_line(&mut img, to_px(i - 1, vals[i - 1]), to_px(i, vals[i]), *color);
        }
        // Legend swatch, one square per series.
        let lx = (x1 - 70.0) as u32;
        let ly = MARGIN + 14 * slot as u32;
        for dy in 0..8 {
            for dx in 0..8 {
                img.put_pixel(lx + dx, ly + dy, *color);
            }
        }
    }
    img.save(path).map_err(|e| Error::format(e.to_string()))?;
    Ok(())
}

/// Runs found under `runs_dir`, shallow scan for `*/metrics.json`.
pub fn collect_reports(runs_dir: &Path) -> Result<Vec<(PathBuf, MetricsReport)>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(runs_dir)? {
        let dir = entry?.path();
        let candidate = dir.join("metrics.json");
        if candidate.is_file() {
            let text = std::fs::read_to_string(&candidate)?;
            let report: MetricsReport = serde_json::from_str(&text)
                .map_err(|e| Error::format(format!("{}: {e}", candidate.display())))?;
            found.push((dir, report));
        }
    }
    found.sort_by(|a, b| a.1.run_id.cmp(&b.1.run_id));
    Ok(found)
}

/// Writes summary.md plus one `<run>-losses.png` per run into `out_dir`
/// and returns the markdown text.
pub fn generate_report(runs_dir: &Path, out_dir: &Path) -> Result<String> {
    let reports = collect_reports(runs_dir)?;
    if reports.is_empty() {
        return Err(Error::config(format!(
            "no metrics.json found under {}",
            runs_dir.display()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut md = String::from("# Run summary\n\n");
    md.push_str("| run | seed | epochs | final loss | mIoU | pixel acc |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    for (_, report) in &reports {
        let final_loss = report
            .epoch_losses
            .last()
            .map_or("-".to_string(), |e| format!("{:.6}", e.total));
        let fmt_opt =
            |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            report.run_id,
            report.seed,
            report.epoch_losses.len(),
            final_loss,
            fmt_opt(report.final_metrics.miou),
            fmt_opt(report.final_metrics.pixel_accuracy),
        ));
        if !report.epoch_losses.is_empty() {
            let png = out_dir.join(format!("{}-losses.png", report.run_id));
            plot_loss_curves(report, &png)?;
        }
    }
    std::fs::write(out_dir.join("summary.md"), &md)?;
    Ok(md)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::EpochLoss;

    fn toy_report(run_id: &str, with_miou: bool) -> MetricsReport {
        let mut r = MetricsReport::new(run_id, 7, serde_json::json!({}));
        for epoch in 0..5 {
            let decay = (-(epoch as f64)).exp();
            r.epoch_losses.push(EpochLoss {
                epoch,
                total: 2.0 * decay,
                mse: 1.5 * decay,
                at: 0.05 * decay,
                ld: 0.0,
            });
        }
        if with_miou {
            r.final_metrics.miou = Some(41.5);
            r.final_metrics.pixel_accuracy = Some(88.0);
        }
        r
    }

    #[test]
    fn report_summarizes_runs_and_plots() {
        let dir = tempfile::tempdir().unwrap();
        for (id, miou) in [("a-run", true), ("b-run", false)] {
            let run_dir = dir.path().join(id);
            std::fs::create_dir_all(&run_dir).unwrap();
            std::fs::write(run_dir.join("metrics.json"), toy_report(id, miou).to_json())
                .unwrap();
        }
        let out = dir.path().join("report");
        let md = generate_report(dir.path(), &out).unwrap();
        assert!(md.contains("a-run") && md.contains("b-run"));
        assert!(md.contains("41.50"));
        assert!(out.join("summary.md").is_file());
        let png = out.join("a-run-losses.png");
        let decoded = image::open(&png).unwrap();
        assert_eq!(decoded.width(), WIDTH);
        let empty = generate_report(&out.join("nothing"), &out);
        assert!(empty.is_err());
    }
}
