//! Deterministic SVG export of report CSVs.

use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    /// Every column against `t`.
    Trajectory,
    /// `log10` of the relative ledger residual against `t`.
    Ledger,
    /// `log10 mismatch` against `log10 eps`.
    Slope,
    /// `log10 |residual|` against `log10 h`.
    Residual,
}

/// One named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotData {
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

struct Columns {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Columns {
    fn read(path: &Path) -> Result<Self, CliError> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let header: Vec<String> = r
            .headers()
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<Result<Vec<Vec<String>>, _>>()
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self { header, rows })
    }

    fn index(&self, name: &str) -> Result<usize, CliError> {
        self.header.iter().position(|h| h == name).ok_or_else(|| CliError::UnknownColumn(name.to_string()))
    }

    fn values(&self, k: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.get(k).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)).collect()
    }
}

fn pairs(x: &[f64], y: &[f64], fx: fn(f64) -> f64, fy: fn(f64) -> f64) -> Vec<(f64, f64)> {
    x.iter()
        .zip(y)
        .map(|(a, b)| (fx(*a), fy(*b)))
        .filter(|(a, b)| a.is_finite() && b.is_finite())
        .collect()
}

fn log10_abs(v: f64) -> f64 {
    v.abs().log10()
}

fn ident(v: f64) -> f64 {
    v
}

/// Extracts the series a plot of `kind` draws from a report CSV.
pub fn plot_data(path: &Path, kind: PlotKind) -> Result<PlotData, CliError> {
    let cols = Columns::read(path)?;
    let data = match kind {
        PlotKind::Trajectory => {
            let t = cols.index("t")?;
            let x = cols.values(t);
            let series: Vec<Series> = (0..cols.header.len())
                .filter(|&k| k != t)
                .map(|k| Series { name: cols.header[k].clone(), points: pairs(&x, &cols.values(k), ident, ident) })
                .collect();
            if series.is_empty() {
                return Err(CliError::UnknownColumn("no quantity columns besides t".into()));
            }
            PlotData { x_label: "t".into(), y_label: "value".into(), series }
        }
        PlotKind::Ledger => {
            let x = cols.values(cols.index("t")?);
            let y = cols.values(cols.index("relative")?);
            PlotData {
                x_label: "t".into(),
                y_label: "log10 relative residual".into(),
                series: vec![Series { name: "ledger".into(), points: pairs(&x, &y, ident, log10_abs) }],
            }
        }
        PlotKind::Slope => {
            let x = cols.values(cols.index("eps")?);
            let y = cols.values(cols.index("mismatch")?);
            PlotData {
                x_label: "log10 eps".into(),
                y_label: "log10 mismatch".into(),
                series: vec![Series { name: "mismatch".into(), points: pairs(&x, &y, log10_abs, log10_abs) }],
            }
        }
        PlotKind::Residual => {
            let h = cols.values(cols.index("h")?);
            let re = cols.values(cols.index("residual_re")?);
            let im = cols.values(cols.index("residual_im")?);
            let mag: Vec<f64> = re.iter().zip(&im).map(|(a, b)| a.hypot(*b)).collect();
            PlotData {
                x_label: "log10 h".into(),
                y_label: "log10 |residual|".into(),
                series: vec![Series { name: "residual".into(), points: pairs(&h, &mag, log10_abs, log10_abs) }],
            }
        }
    };
    Ok(data)
}

fn bounds(it: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * lo.abs().max(1.0) {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Renders `data` as SVG text.
pub fn render_svg(data: &PlotData) -> Result<String, CliError> {
    let draw = |e: &dyn std::fmt::Display| CliError::Io(format!("plot: {e}"));
    let pts = || data.series.iter().flat_map(|s| s.points.iter().copied());
    let (x0, x1) = bounds(pts().map(|p| p.0));
    let (y0, y1) = bounds(pts().map(|p| p.1));
    let mut buf = String::new();
    {
        let root = SVGBackend::with_string(&mut buf, (800, 500)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| draw(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .margin(20)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(|e| draw(&e))?;
        chart
            .configure_mesh()
            .x_desc(data.x_label.as_str())
            .y_desc(data.y_label.as_str())
            .draw()
            .map_err(|e| draw(&e))?;
        for (k, s) in data.series.iter().enumerate() {
            let color = Palette99::pick(k).to_rgba();
            chart
                .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
                .map_err(|e| draw(&e))?
                .label(s.name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        if data.series.len() > 1 {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(|e| draw(&e))?;
        }
        root.present().map_err(|e| draw(&e))?;
    }
    Ok(buf)
}

/// Reads `csv`, renders `kind`, writes the SVG to `out`.
pub fn plot(csv: &Path, kind: PlotKind, out: &Path) -> Result<(), CliError> {
    let data = plot_data(csv, kind)?;
    let svg = render_svg(&data)?;
    std::fs::write(out, svg).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))
}
