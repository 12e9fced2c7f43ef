//! File artifacts: CSV tables, JSON reports, SVG log-log plots.
//!
//! Everything written here is a pure function of its inputs, so reruns
//! with the same configuration produce byte-identical files. Floats go
//! through the shortest-roundtrip formatter.

use crate::covering::AdmissibleCover;
use crate::exponents::{ExponentChain, WeightFamily};
use crate::fields::GridSection;
use crate::geometry::AdmissibleRadiusField;
use crate::grid::Grid;
use crate::C64;
use serde::Serialize;
use std::fs::File;
use std::io::{BufWriter, Write as IoWrite};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("malformed table: {0}")]
    Parse(String),
}

fn coord_headers(grid: &Grid) -> Vec<String> {
    (0..grid.ndim()).map(|a| format!("x{a}")).collect()
}

/// CSV with one row per node: coordinates, then the radius value.
pub fn write_radius_csv(
    path: &Path,
    grid: &Grid,
    field: &AdmissibleRadiusField,
) -> Result<(), ExportError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = coord_headers(grid);
    header.push("radius".into());
    w.write_record(&header)?;
    for node in grid.nodes() {
        let mut row: Vec<String> = grid.coords(node).iter().map(|c| c.to_string()).collect();
        row.push(field.values[node].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the radius column back; rows must follow node order.
pub fn read_radius_csv(path: &Path, grid: &Grid) -> Result<Vec<f64>, ExportError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut values = Vec::with_capacity(grid.len());
    for rec in r.records() {
        let rec = rec?;
        let last = rec
            .get(rec.len() - 1)
            .ok_or_else(|| ExportError::Parse("empty row".into()))?;
        values.push(
            last.parse::<f64>()
                .map_err(|e| ExportError::Parse(format!("bad radius value {last:?}: {e}")))?,
        );
    }
    if values.len() != grid.len() {
        return Err(ExportError::Parse(format!(
            "{} rows for a grid of {} nodes",
            values.len(),
            grid.len()
        )));
    }
    Ok(values)
}

/// CSV with one row per node: coordinates, then re/im per component.
pub fn write_section_csv(path: &Path, section: &GridSection) -> Result<(), ExportError> {
    let grid = section.grid();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = coord_headers(grid);
    for c in 0..section.rank() {
        header.push(format!("re{c}"));
        header.push(format!("im{c}"));
    }
    w.write_record(&header)?;
    for node in grid.nodes() {
        let mut row: Vec<String> = grid.coords(node).iter().map(|c| c.to_string()).collect();
        for c in 0..section.rank() {
            let v = section.value(node, c);
            row.push(v.re.to_string());
            row.push(v.im.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a section written by `write_section_csv` onto the given grid.
pub fn read_section_csv(path: &Path, grid: &Grid, rank: usize) -> Result<GridSection, ExportError> {
    let mut r = csv::Reader::from_path(path)?;
    let ncoord = grid.ndim();
    let mut section = GridSection::zeros(grid.clone(), rank);
    let mut node = 0usize;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != ncoord + 2 * rank {
            return Err(ExportError::Parse(format!(
                "row {node} has {} fields, expected {}",
                rec.len(),
                ncoord + 2 * rank
            )));
        }
        if node >= grid.len() {
            return Err(ExportError::Parse("more rows than grid nodes".into()));
        }
        let parse = |s: &str| -> Result<f64, ExportError> {
            s.parse::<f64>()
                .map_err(|e| ExportError::Parse(format!("bad number {s:?}: {e}")))
        };
        for (a, want) in grid.coords(node).iter().enumerate() {
            let got = parse(rec.get(a).unwrap())?;
            if (got - want).abs() > 1e-9 * want.abs().max(1.0) {
                return Err(ExportError::Parse(format!(
                    "row {node} coordinate {a} is {got}, grid has {want}"
                )));
            }
        }
        for c in 0..rank {
            let re = parse(rec.get(ncoord + 2 * c).unwrap())?;
            let im = parse(rec.get(ncoord + 2 * c + 1).unwrap())?;
            section.data_mut()[node * rank + c] = C64::new(re, im);
        }
        node += 1;
    }
    if node != grid.len() {
        return Err(ExportError::Parse(format!(
            "{} rows for a grid of {} nodes",
            node,
            grid.len()
        )));
    }
    Ok(section)
}

/// CSV of selected cover balls: index, center node, center coordinates,
/// seed and inflated radii.
pub fn write_cover_csv(path: &Path, grid: &Grid, cover: &AdmissibleCover) -> Result<(), ExportError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["index".to_string(), "center".to_string()];
    header.extend(coord_headers(grid));
    header.push("seed_radius".into());
    header.push("inflated_radius".into());
    w.write_record(&header)?;
    for ball in &cover.balls {
        let mut row = vec![ball.index.to_string(), ball.center.to_string()];
        row.extend(grid.coords(ball.center).iter().map(|c| c.to_string()));
        row.push(ball.seed_radius.to_string());
        row.push(ball.inflated_radius.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// CSV table of the exponent chain and its weight family.
pub fn write_exponent_csv(
    path: &Path,
    chain: &ExponentChain,
    weights: &WeightFamily,
) -> Result<(), ExportError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["kind", "name", "value", "norm", "binding"])?;
    for (j, t) in chain.chain.iter().enumerate() {
        w.write_record(["chain", &format!("t_{j}"), &t.to_string(), "", ""])?;
    }
    w.write_record(["chain", "l", &chain.l.to_string(), "", ""])?;
    let mut spec_row = |s: &crate::exponents::WeightSpec| -> Result<(), ExportError> {
        w.write_record([
            "weight",
            &s.name,
            &s.exponent.to_string(),
            &s.norm.to_string(),
            &format!("{:?}", s.binding),
        ])?;
        Ok(())
    };
    spec_row(&weights.w_l)?;
    for wj in &weights.w_j {
        spec_row(wj)?;
    }
    spec_row(&weights.v_r)?;
    spec_row(&weights.v_r_prime)?;
    spec_row(&weights.v_r_ball)?;
    w.flush()?;
    Ok(())
}

/// Two-column iteration trace (solver residuals, series h-norms).
pub fn write_trace_csv(
    path: &Path,
    value_name: &str,
    values: &[f64],
) -> Result<(), ExportError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", value_name])?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([&i.to_string(), &v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty-printed JSON for any serializable report.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExportError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// One named series of positive points for the log-log plot.
#[derive(Debug, Clone)]
pub struct PlotSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const SVG_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Hand-rolled log-log scatter/line plot; no display dependencies.
/// Points must be strictly positive on both axes.
pub fn write_loglog_svg(
    path: &Path,
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[PlotSeries],
) -> Result<(), ExportError> {
    let (width, height) = (640.0, 480.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 40.0, 50.0);
    let mut pts = Vec::new();
    for s in series {
        for &(x, y) in &s.points {
            if !(x > 0.0 && y > 0.0) {
                return Err(ExportError::Parse(format!(
                    "log-log plot needs positive points, got ({x}, {y})"
                )));
            }
            pts.push((x.log10(), y.log10()));
        }
    }
    if pts.is_empty() {
        return Err(ExportError::Parse("nothing to plot".into()));
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    // At least one decade of margin-free span keeps ticks sane.
    if x1 - x0 < 1e-9 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-9 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * (width - ml - mr);
    let sy = |y: f64| height - mb - (y - y0) / (y1 - y0) * (height - mt - mb);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
        width / 2.0,
        xml_escape(title)
    ));
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        height - mb,
        width - mr,
        height - mb
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        height - mb
    ));
    // Decade ticks.
    for d in (x0.floor() as i64)..=(x1.ceil() as i64) {
        let x = d as f64;
        if x < x0 - 1e-9 || x > x1 + 1e-9 {
            continue;
        }
        let px = sx(x);
        svg.push_str(&format!(
            "<line x1=\"{px}\" y1=\"{}\" x2=\"{px}\" y2=\"{}\" stroke=\"black\"/>\n",
            height - mb,
            height - mb + 6.0
        ));
        svg.push_str(&format!(
            "<text x=\"{px}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">1e{d}</text>\n",
            height - mb + 20.0
        ));
    }
    for d in (y0.floor() as i64)..=(y1.ceil() as i64) {
        let y = d as f64;
        if y < y0 - 1e-9 || y > y1 + 1e-9 {
            continue;
        }
        let py = sy(y);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{py}\" x2=\"{ml}\" y2=\"{py}\" stroke=\"black\"/>\n",
            ml - 6.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">1e{d}</text>\n",
            ml - 10.0,
            py + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n",
        (ml + width - mr) / 2.0,
        height - 8.0,
        xml_escape(xlabel)
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        (mt + height - mb) / 2.0,
        (mt + height - mb) / 2.0,
        xml_escape(ylabel)
    ));
    for (si, s) in series.iter().enumerate() {
        let color = SVG_COLORS[si % SVG_COLORS.len()];
        let path_pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x.log10()), sy(y.log10())))
            .collect();
        if path_pts.len() > 1 {
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                path_pts.join(" ")
            ));
        }
        for p in &path_pts {
            let (px, py) = p.split_once(',').unwrap();
            svg.push_str(&format!(
                "<circle cx=\"{px}\" cy=\"{py}\" r=\"3\" fill=\"{color}\"/>\n"
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            width - mr - 150.0,
            mt + 16.0 * si as f64 + 4.0,
            xml_escape(&s.label)
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
