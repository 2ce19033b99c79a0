//! Deterministic PNG plots for the report command. Text rendering needs a
//! registered TrueType font; when none is found the plots still render,
//! just without captions or axis labels.

use std::path::Path;
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::register_font;

use tide_core::{Result, TideError};

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial Unicode.ttf",
];

static FONT_OK: OnceLock<bool> = OnceLock::new();

fn has_font() -> bool {
    *FONT_OK.get_or_init(|| {
        for path in FONT_CANDIDATES {
            if let Ok(bytes) = std::fs::read(path) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if register_font("sans-serif", FontStyle::Normal, leaked).is_ok() {
                    return true;
                }
            }
        }
        eprintln!("warning: no TrueType font found; plots will omit text");
        false
    })
}

fn perr<E: std::fmt::Display>(e: E) -> TideError {
    TideError::data(format!("plot rendering failed: {e}"))
}

/// Grouped bar chart: one group per category, one bar per series entry.
/// `None` values are skipped (absent metrics leave a gap).
pub fn grouped_bars(
    path: &Path,
    title: &str,
    categories: &[String],
    series: &[(String, Vec<Option<f64>>)],
) -> Result<()> {
    if categories.is_empty() || series.is_empty() {
        return Ok(());
    }
    let y_max = series
        .iter()
        .flat_map(|(_, vs)| vs.iter().flatten())
        .fold(0.0f64, |a, &b| a.max(b));
    let y_max = if y_max > 0.0 { y_max * 1.15 } else { 1.0 };

    let root = BitMapBackend::new(path, (900, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(perr)?;
    let mut builder = ChartBuilder::on(&root);
    builder
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60);
    if has_font() {
        builder.caption(title, ("sans-serif", 24));
    }
    let x_max = categories.len() as f64 - 0.5;
    let mut chart = builder
        .build_cartesian_2d(-0.5f64..x_max, 0f64..y_max)
        .map_err(perr)?;
    if has_font() {
        let cats = categories.to_vec();
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(categories.len())
            .x_label_formatter(&move |x: &f64| {
                let i = x.round();
                if (x - i).abs() > 0.25 || i < 0.0 {
                    return String::new();
                }
                cats.get(i as usize).cloned().unwrap_or_default()
            })
            .y_desc("value")
            .draw()
            .map_err(perr)?;
    }
    let width = 0.8 / series.len() as f64;
    for (si, (name, vals)) in series.iter().enumerate() {
        let color = Palette99::pick(si);
        let fill = color.filled();
        chart
            .draw_series(vals.iter().enumerate().filter_map(|(ci, v)| {
                v.map(|v| {
                    let x0 = ci as f64 - 0.4 + si as f64 * width;
                    Rectangle::new([(x0, 0.0), (x0 + width * 0.9, v)], fill)
                })
            }))
            .map_err(perr)?
            .label(name.clone())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], fill));
    }
    if has_font() {
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.85))
            .draw()
            .map_err(perr)?;
    }
    root.present().map_err(perr)?;
    Ok(())
}

/// One slack-versus-world line per teacher family.
pub fn sweep_curves(
    path: &Path,
    title: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    if series.iter().all(|(_, pts)| pts.is_empty()) {
        return Ok(());
    }
    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if finite.is_empty() {
        return Ok(());
    }
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (0.0f64, f64::NEG_INFINITY);
    for &(x, y) in &finite {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if x_max <= x_min {
        x_max = x_min + 1.0;
    }
    let pad = (y_max - y_min).max(1e-6) * 0.1;
    let (y_lo, y_hi) = (y_min - pad, y_max + pad);

    let root = BitMapBackend::new(path, (900, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(perr)?;
    let mut builder = ChartBuilder::on(&root);
    builder
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(70);
    if has_font() {
        builder.caption(title, ("sans-serif", 24));
    }
    let mut chart = builder
        .build_cartesian_2d(x_min..x_max, y_lo..y_hi)
        .map_err(perr)?;
    if has_font() {
        chart
            .configure_mesh()
            .x_desc("world")
            .y_desc("slack")
            .draw()
            .map_err(perr)?;
    }
    for (si, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(si);
        let stroke = color.stroke_width(2);
        let pts: Vec<(f64, f64)> = pts
            .iter()
            .copied()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .collect();
        chart
            .draw_series(LineSeries::new(pts, stroke))
            .map_err(perr)?
            .label(name.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 16, y)], stroke)
            });
    }
    if has_font() {
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.85))
            .draw()
            .map_err(perr)?;
    }
    root.present().map_err(perr)?;
    Ok(())
}

/// 2D scatter with one color per integer label.
pub fn scatter_2d(path: &Path, title: &str, points: &[(f64, f64, usize)]) -> Result<()> {
    let finite: Vec<(f64, f64, usize)> = points
        .iter()
        .copied()
        .filter(|(x, y, _)| x.is_finite() && y.is_finite())
        .collect();
    if finite.is_empty() {
        return Ok(());
    }
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y, _) in &finite {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    let x_pad = (x_max - x_min).max(1e-6) * 0.08;
    let y_pad = (y_max - y_min).max(1e-6) * 0.08;

    let root = BitMapBackend::new(path, (800, 800)).into_drawing_area();
    root.fill(&WHITE).map_err(perr)?;
    let mut builder = ChartBuilder::on(&root);
    builder
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60);
    if has_font() {
        builder.caption(title, ("sans-serif", 24));
    }
    let mut chart = builder
        .build_cartesian_2d(x_min - x_pad..x_max + x_pad, y_min - y_pad..y_max + y_pad)
        .map_err(perr)?;
    if has_font() {
        chart
            .configure_mesh()
            .x_desc("pc1")
            .y_desc("pc2")
            .draw()
            .map_err(perr)?;
    }
    chart
        .draw_series(finite.iter().map(|&(x, y, label)| {
            Circle::new((x, y), 4, Palette99::pick(label).filled())
        }))
        .map_err(perr)?;
    root.present().map_err(perr)?;
    Ok(())
}
