//! SVG training curves from a metrics file.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::runner::{read_metrics, MetricsRow};

pub const EMA_FACTOR: f64 = 0.9;

/// Exponential moving average `s_t = f·s_{t−1} + (1−f)·x_t`, seeded with the
/// first value.
pub fn ema(xs: &[f64], factor: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut s = None;
    for &x in xs {
        let v = match s {
            None => x,
            Some(prev) => factor * prev + (1.0 - factor) * x,
        };
        s = Some(v);
        out.push(v);
    }
    out
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn range(series: &[&[f64]]) -> (f64, f64) {
    let (lo, hi) = series
        .iter()
        .flat_map(|s| s.iter())
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn line_chart(path: &Path, title: &str, x: &[f64], series: &[(&str, &[f64], RGBColor)]) -> Result<()> {
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let (x0, x1) = range(&[x]);
    let ys: Vec<&[f64]> = series.iter().map(|s| s.1).collect();
    let (y0, y1) = range(&ys);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (name, ys, color) in series {
        chart
            .draw_series(LineSeries::new(x.iter().copied().zip(ys.iter().copied()), color))
            .map_err(|e| plot_err(path, e))?
            .label(*name)
            .legend(move |(a, b)| PathElement::new(vec![(a, b), (a + 16, b)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

fn raster(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let root = SVGBackend::new(path, (800, 220)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let n = rows.len().max(1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption("feedback (lower) and gradient switch (upper)", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(28)
        .y_label_area_size(40)
        .build_cartesian_2d(0.0..n, 0.0..2.0)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .disable_y_mesh()
        .x_desc("iteration")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    let cells = rows.iter().enumerate().flat_map(|(i, r)| {
        let x = i as f64;
        let mut v = Vec::new();
        if r.feedback {
            v.push(Rectangle::new([(x, 0.1), (x + 1.0, 0.9)], BLUE.filled()));
        }
        if r.switch == 1 {
            v.push(Rectangle::new([(x, 1.1), (x + 1.0, 1.9)], RED.filled()));
        }
        v
    });
    chart.draw_series(cells).map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Writes `curves.svg` (outer loss and train accuracy with EMA overlays),
/// `feedback.svg` and `inversion.svg` into `out_dir`.
pub fn emit_plots(metrics_csv: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(metrics_csv).map_err(|e| Error::io(metrics_csv, e))?;
    let rows = read_metrics(&text)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let x: Vec<f64> = rows.iter().map(|r| r.iteration as f64).collect();
    let loss: Vec<f64> = rows.iter().map(|r| r.batch_outer_loss).collect();
    let acc: Vec<f64> = rows.iter().map(|r| r.batch_train_acc).collect();
    let inv: Vec<f64> = rows.iter().map(|r| r.inv_loss).collect();
    let (loss_s, acc_s, inv_s) = (ema(&loss, EMA_FACTOR), ema(&acc, EMA_FACTOR), ema(&inv, EMA_FACTOR));
    let curves = out_dir.join("curves.svg");
    let faint = |c: RGBColor| {
        RGBColor(
            ((c.0 as u16 + 2 * 255) / 3) as u8,
            ((c.1 as u16 + 2 * 255) / 3) as u8,
            ((c.2 as u16 + 2 * 255) / 3) as u8,
        )
    };
    line_chart(
        &curves,
        "episode-batch outer loss and query accuracy",
        &x,
        &[
            ("outer loss", &loss, faint(RED)),
            ("outer loss (EMA)", &loss_s, RED),
            ("train acc", &acc, faint(BLUE)),
            ("train acc (EMA)", &acc_s, BLUE),
        ],
    )?;
    let feedback = out_dir.join("feedback.svg");
    raster(&feedback, &rows)?;
    let inversion = out_dir.join("inversion.svg");
    line_chart(
        &inversion,
        "inversion loss",
        &x,
        &[
            ("inversion loss", &inv, faint(GREEN)),
            ("inversion loss (EMA)", &inv_s, GREEN),
        ],
    )?;
    Ok(vec![curves, feedback, inversion])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::METRICS_HEADER;

    #[test]
    fn ema_of_constant_is_constant() {
        assert!(ema(&[2.5; 20], 0.9).iter().all(|&v| v == 2.5));
        let s = ema(&[0.0, 1.0], 0.9);
        assert!((s[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn ten_rows_give_three_deterministic_files() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("m.csv");
        let mut text = format!("{METRICS_HEADER}\n");
        for i in 0..10 {
            text.push_str(&format!(
                "{i},{},{},{},{},1,{},0\n",
                5.0 - i as f64 * 0.1,
                0.7,
                i as f64 / 10.0,
                i % 2,
                i % 3 / 2
            ));
        }
        std::fs::write(&csv, text).unwrap();
        let a = emit_plots(&csv, &dir.path().join("a")).unwrap();
        let b = emit_plots(&csv, &dir.path().join("b")).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            let bx = std::fs::read(x).unwrap();
            assert!(!bx.is_empty());
            assert_eq!(bx, std::fs::read(y).unwrap());
        }
    }

    #[test]
    fn malformed_csv_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("m.csv");
        std::fs::write(&csv, format!("{METRICS_HEADER}\n0,1,2,3,0,0,0,0\n1,2\n")).unwrap();
        assert!(matches!(
            emit_plots(&csv, dir.path()),
            Err(Error::Parse { line: 3, .. })
        ));
    }
}
