//! Static figures for a run directory: self-contained SVG files, each with a
//! CSV of the plotted values next to it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use streamgate::controller::ControlRecord;
use streamgate::error::{Error, Result};

use crate::config::RunSpec;

// ── geometry ────────────────────────────────────────────────────────────────

const W: f64 = 720.0;
const H: f64 = 440.0;
const ML: f64 = 76.0; // left margin, room for tick labels
const MR: f64 = 20.0;
const MT: f64 = 42.0;
const MB: f64 = 52.0;
const PALETTE: [&str; 6] =
    ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: &str, points: Vec<(f64, f64)>) -> Series {
        Series { name: name.to_string(), points }
    }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn from_series(series: &[Series]) -> Frame {
        let mut x0 = f64::INFINITY;
        let mut x1 = f64::NEG_INFINITY;
        let mut y0 = f64::INFINITY;
        let mut y1 = f64::NEG_INFINITY;
        for s in series {
            for &(x, y) in &s.points {
                if x.is_finite() && y.is_finite() {
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                }
            }
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        // widen degenerate ranges so a flat series still renders mid-plot
        if x1 - x0 < 1e-300 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 < 1e-300 {
            let pad = 0.5 * y0.abs().max(1.0);
            y0 -= pad;
            y1 += pad;
        }
        Frame { x0, x1, y0, y1 }
    }

    fn sx(&self, x: f64) -> f64 {
        ML + (x - self.x0) / (self.x1 - self.x0) * (W - ML - MR)
    }

    fn sy(&self, y: f64) -> f64 {
        H - MB - (y - self.y0) / (self.y1 - self.y0) * (H - MT - MB)
    }
}

fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 {
        "0".to_string()
    } else if (1e-3..1e5).contains(&a) {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_open(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        xml_escape(title)
    );
}

fn svg_axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let _ = write!(
        out,
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>\n",
        W - ML - MR,
        H - MT - MB
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = f.x0 + t * (f.x1 - f.x0);
        let yv = f.y0 + t * (f.y1 - f.y0);
        let _ = write!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"#444\">{}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" fill=\"#444\">{}</text>\n",
            f.sx(xv),
            H - MB + 16.0,
            fmt_tick(xv),
            ML - 6.0,
            f.sy(yv) + 4.0,
            fmt_tick(yv)
        );
    }
    let _ = write!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"#222\">{}</text>\n\
         <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"#222\" \
         transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
        (ML + W - MR) / 2.0,
        H - 14.0,
        xml_escape(x_label),
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0,
        xml_escape(y_label)
    );
}

fn svg_legend(out: &mut String, series: &[Series]) {
    for (i, s) in series.iter().enumerate() {
        let y = MT + 14.0 + 16.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        let _ = write!(
            out,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" fill=\"#222\">{}</text>\n",
            ML + 8.0,
            y - 9.0,
            ML + 24.0,
            y,
            xml_escape(&s.name)
        );
    }
}

fn write_series_csv(path: &Path, series: &[Series]) -> Result<()> {
    let mut text = String::from("series,x,y\n");
    for s in series {
        for &(x, y) in &s.points {
            let _ = writeln!(text, "{},{x:.17e},{y:.17e}", s.name);
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

// ── chart kinds ─────────────────────────────────────────────────────────────

/// Polyline chart; writes `<stem>.svg` and `<stem>.csv`.
pub fn line_chart(
    svg_path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<Vec<PathBuf>> {
    let f = Frame::from_series(series);
    let mut out = String::new();
    svg_open(&mut out, title);
    svg_axes(&mut out, &f, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", f.sx(x), f.sy(y)))
            .collect();
        let _ = write!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        );
    }
    svg_legend(&mut out, series);
    out.push_str("</svg>\n");
    std::fs::write(svg_path, out)?;
    let csv = svg_path.with_extension("csv");
    write_series_csv(&csv, series)?;
    Ok(vec![svg_path.to_path_buf(), csv])
}

/// Scatter chart; writes `<stem>.svg` and `<stem>.csv`.
pub fn scatter_chart(
    svg_path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<Vec<PathBuf>> {
    let f = Frame::from_series(series);
    let mut out = String::new();
    svg_open(&mut out, title);
    svg_axes(&mut out, &f, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for &(x, y) in s.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let _ = write!(
                out,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.2\" fill=\"{color}\" fill-opacity=\"0.55\"/>\n",
                f.sx(x),
                f.sy(y)
            );
        }
    }
    svg_legend(&mut out, series);
    out.push_str("</svg>\n");
    std::fs::write(svg_path, out)?;
    let csv = svg_path.with_extension("csv");
    write_series_csv(&csv, series)?;
    Ok(vec![svg_path.to_path_buf(), csv])
}

/// Row-major heatmap; writes `<stem>.svg` and `<stem>.csv`.
pub fn heatmap_chart(
    svg_path: &Path,
    title: &str,
    row_label: &str,
    col_label: &str,
    rows: usize,
    cols: usize,
    values: &[f64],
) -> Result<Vec<PathBuf>> {
    if values.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(Error::contract("heatmap dimensions do not match the values"));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi - lo > 1e-300 { hi - lo } else { 1.0 };
    let cw = (W - ML - MR) / cols as f64;
    let ch = (H - MT - MB) / rows as f64;
    let mut out = String::new();
    svg_open(&mut out, title);
    for r in 0..rows {
        for c in 0..cols {
            let t = (values[r * cols + c] - lo) / span;
            // white → deep blue ramp
            let red = (255.0 - t * 224.0) as u8;
            let green = (255.0 - t * 177.0) as u8;
            let blue = (255.0 - t * 134.0) as u8;
            let _ = write!(
                out,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" \
                 fill=\"rgb({red},{green},{blue})\" stroke=\"#ddd\"/>\n",
                ML + c as f64 * cw,
                MT + r as f64 * ch,
                cw,
                ch
            );
        }
    }
    for r in 0..rows {
        let _ = write!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" fill=\"#222\">{r}</text>\n",
            ML - 6.0,
            MT + (r as f64 + 0.5) * ch + 4.0
        );
    }
    for c in 0..cols {
        let _ = write!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"#222\">{c}</text>\n",
            ML + (c as f64 + 0.5) * cw,
            H - MB + 16.0
        );
    }
    let _ = write!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"#222\">{}</text>\n\
         <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"#222\" \
         transform=\"rotate(-90 16 {:.1})\">{}</text>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" fill=\"#444\">min {} max {}</text>\n",
        (ML + W - MR) / 2.0,
        H - 14.0,
        xml_escape(col_label),
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0,
        xml_escape(row_label),
        W - MR,
        H - 14.0,
        fmt_tick(lo),
        fmt_tick(hi)
    );
    out.push_str("</svg>\n");
    std::fs::write(svg_path, out)?;
    let csv = svg_path.with_extension("csv");
    let mut text = String::from("row,col,value\n");
    for r in 0..rows {
        for c in 0..cols {
            let _ = writeln!(text, "{r},{c},{:.17e}", values[r * cols + c]);
        }
    }
    std::fs::write(&csv, text)?;
    Ok(vec![svg_path.to_path_buf(), csv])
}

// ── run-directory assembly ──────────────────────────────────────────────────

fn read_control(path: &Path) -> Result<Vec<ControlRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ControlRecord = serde_json::from_str(line).map_err(|e| {
            Error::config(format!("{}:{}: bad control record: {e}", path.display(), i + 1))
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Parses a sample-cloud CSV back into (c0, c1) points.
fn read_cloud_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut pts = Vec::new();
    for line in text.lines().skip(1) {
        let mut cells = line.split(',');
        let x: f64 = cells
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::config(format!("{}: bad csv row", path.display())))?;
        let y: f64 = cells.next().and_then(|v| v.parse().ok()).unwrap_or(0.0);
        pts.push((x, y));
    }
    Ok(pts)
}

fn control_plots(dir: &Path, plots: &Path, written: &mut Vec<PathBuf>) -> Result<()> {
    let control = dir.join("control.jsonl");
    if !control.exists() {
        return Ok(());
    }
    let records = read_control(&control)?;
    if records.is_empty() {
        return Ok(());
    }
    let spec = RunSpec::load(Some(&dir.join("config.json")))?;

    let lambda: Vec<(f64, f64)> =
        records.iter().map(|r| (r.step as f64, r.lambda)).collect();
    let mut lambda_series = vec![Series::new("lambda", lambda)];
    let stars: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| r.lambda_star.map(|v| (r.step as f64, v)))
        .collect();
    if !stars.is_empty() {
        lambda_series.push(Series::new("lambda_star", stars));
    }
    written.extend(line_chart(
        &plots.join("lambda.svg"),
        "controller multiplier",
        "step",
        "lambda",
        &lambda_series,
    )?);

    let l_er: Vec<(f64, f64)> = records.iter().map(|r| (r.step as f64, r.l_er)).collect();
    let l_pr: Vec<(f64, f64)> = records.iter().map(|r| (r.step as f64, r.l_pr)).collect();
    written.extend(line_chart(
        &plots.join("losses.svg"),
        "erasure and preservation losses",
        "step",
        "loss",
        &[Series::new("l_er", l_er), Series::new("l_pr", l_pr)],
    )?);

    // preservation drift against the linear budget t * epsilon * alpha
    let base = records[0].l_pr;
    let drift: Vec<(f64, f64)> =
        records.iter().map(|r| (r.step as f64, r.l_pr - base)).collect();
    let budget: Vec<(f64, f64)> = records
        .iter()
        .map(|r| {
            let t = r.step as f64;
            (t, t * spec.erase.epsilon * spec.erase.alpha)
        })
        .collect();
    written.extend(line_chart(
        &plots.join("drift.svg"),
        "preservation drift vs linear budget",
        "step",
        "l_pr(t) - l_pr(0)",
        &[Series::new("drift", drift), Series::new("t*eps*alpha", budget)],
    )?);
    Ok(())
}

fn sample_plots(dir: &Path, plots: &Path, written: &mut Vec<PathBuf>) -> Result<()> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("samples_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Ok(());
    }
    let mut series = Vec::new();
    for f in &files {
        let stem = f
            .file_stem()
            .and_then(|n| n.to_str())
            .unwrap_or("samples")
            .trim_start_matches("samples_")
            .to_string();
        series.push(Series { name: stem, points: read_cloud_csv(f)? });
    }
    written.extend(scatter_chart(
        &plots.join("samples.svg"),
        "generated token clouds",
        "c0",
        "c1",
        &series,
    )?);
    Ok(())
}

fn localize_plot(dir: &Path, plots: &Path, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join("localize.tsv");
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(&path)?;
    let mut cells: Vec<(usize, usize, f64)> = Vec::new();
    for line in text.lines().skip(1) {
        let mut it = line.split('\t');
        let (Some(l), Some(h), Some(m)) = (it.next(), it.next(), it.next()) else {
            continue;
        };
        let (Ok(l), Ok(h), Ok(m)) = (l.parse(), h.parse(), m.parse()) else {
            return Err(Error::config(format!("{}: bad profile row", path.display())));
        };
        cells.push((l, h, m));
    }
    if cells.is_empty() {
        return Ok(());
    }
    let rows = cells.iter().map(|c| c.0).max().unwrap() + 1;
    let cols = cells.iter().map(|c| c.1).max().unwrap() + 1;
    let mut values = vec![0.0; rows * cols];
    for (l, h, m) in cells {
        values[l * cols + h] = m;
    }
    written.extend(heatmap_chart(
        &plots.join("localize.svg"),
        "concept attention mass by layer and head",
        "layer",
        "head",
        rows,
        cols,
        &values,
    )?);
    Ok(())
}

/// Renders every figure the run directory has data for. Errors if the
/// directory holds nothing plottable.
pub fn plot_run(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::config(format!("{} is not a run directory", dir.display())));
    }
    let plots = dir.join("plots");
    std::fs::create_dir_all(&plots)?;
    let mut written = Vec::new();
    control_plots(dir, &plots, &mut written)?;
    sample_plots(dir, &plots, &mut written)?;
    localize_plot(dir, &plots, &mut written)?;
    if written.is_empty() {
        return Err(Error::config(format!(
            "{} has no control.jsonl, samples_*.csv, or localize.tsv to plot",
            dir.display()
        )));
    }
    Ok(written)
}
