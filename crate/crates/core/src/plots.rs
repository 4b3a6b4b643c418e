//! Standalone SVG charts rendered from the report CSVs of a run directory:
//! the DVAE loss curve, ROC curves and permutation histograms.
//!
//! Series are drawn in data coordinates inside a transformed group, so the
//! numbers in each `points` attribute are the plotted values themselves.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pipeline::{LOSS_FILE, ROC_FILE};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 130.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 60.0;
const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: (f64, f64), ys: (f64, f64)) -> Frame {
        let widen = |(a, b): (f64, f64)| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
        let (x0, x1) = widen(xs);
        let (y0, y1) = widen(ys);
        Frame { x0, x1, y0, y1 }
    }

    fn plot_w() -> f64 {
        WIDTH - MARGIN_L - MARGIN_R
    }

    fn plot_h() -> f64 {
        HEIGHT - MARGIN_T - MARGIN_B
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x0) / (self.x1 - self.x0) * Frame::plot_w()
    }

    fn py(&self, y: f64) -> f64 {
        MARGIN_T + (self.y1 - y) / (self.y1 - self.y0) * Frame::plot_h()
    }

    /// Maps data coordinates to pixels.
    fn transform(&self) -> String {
        let sx = Frame::plot_w() / (self.x1 - self.x0);
        let sy = Frame::plot_h() / (self.y1 - self.y0);
        format!(
            "translate({} {}) scale({} {}) translate({} {})",
            MARGIN_L,
            MARGIN_T + Frame::plot_h(),
            sx,
            -sy,
            -self.x0,
            -self.y0
        )
    }
}

fn ticks(a: f64, b: f64) -> Vec<f64> {
    let raw = (b - a) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (a / step - 1e-9).ceil() as i64;
    let last = (b / step + 1e-9).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open_chart(f: &Frame, title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        MARGIN_L + Frame::plot_w() / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        Frame::plot_w(),
        Frame::plot_h()
    );
    let bottom = MARGIN_T + Frame::plot_h();
    for t in ticks(f.x0, f.x1) {
        let x = f.px(t);
        let _ = writeln!(s, r#"<line x1="{x}" y1="{bottom}" x2="{x}" y2="{}" stroke="black"/>"#, bottom + 5.0);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, bottom + 18.0, fmt_tick(t));
    }
    for t in ticks(f.y0, f.y1) {
        let y = f.py(t);
        let _ = writeln!(s, r#"<line x1="{}" y1="{y}" x2="{MARGIN_L}" y2="{y}" stroke="black"/>"#, MARGIN_L - 5.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            MARGIN_L - 8.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        MARGIN_L + Frame::plot_w() / 2.0,
        HEIGHT - 18.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        MARGIN_T + Frame::plot_h() / 2.0,
        escape(ylabel)
    );
    s
}

fn fmt_tick(t: f64) -> String {
    let s = format!("{t:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn polyline(f: &Frame, pts: &[(f64, f64)], color: &str, dashed: bool) -> String {
    let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x},{y}")).collect();
    format!(
        r#"<polyline transform="{}" points="{}" fill="none" stroke="{color}" stroke-width="2" vector-effect="non-scaling-stroke"{}/>"#,
        f.transform(),
        coords.join(" "),
        if dashed { r#" stroke-dasharray="5 4""# } else { "" }
    )
}

fn legend(names: &[String]) -> String {
    let mut s = String::new();
    let x = WIDTH - MARGIN_R + 12.0;
    for (i, n) in names.iter().enumerate() {
        let y = MARGIN_T + 12.0 + 20.0 * i as f64;
        let c = COLORS[i % COLORS.len()];
        let _ = writeln!(s, r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{c}" stroke-width="2"/>"#, x + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, x + 26.0, y + 4.0, escape(n));
    }
    s
}

fn extent(v: impl Iterator<Item = f64>) -> (f64, f64) {
    v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)))
}

/// Loss components against epoch.
pub fn loss_svg(epochs: &[f64], series: &[(String, Vec<f64>)]) -> String {
    let xs = extent(epochs.iter().copied());
    let (lo, hi) = extent(series.iter().flat_map(|(_, v)| v.iter().copied()));
    let f = Frame::new(xs, (lo.min(0.0), hi));
    let mut s = open_chart(&f, "DVAE training loss", "epoch", "loss per sample");
    for (i, (_, v)) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = epochs.iter().copied().zip(v.iter().copied()).collect();
        s.push_str(&polyline(&f, &pts, COLORS[i % COLORS.len()], false));
        s.push('\n');
    }
    s.push_str(&legend(&series.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>()));
    s.push_str("</svg>\n");
    s
}

/// ROC curves on the unit square with the chance diagonal.
pub fn roc_svg(curves: &[(String, Vec<(f64, f64)>)]) -> String {
    let f = Frame::new((0.0, 1.0), (0.0, 1.0));
    let mut s = open_chart(&f, "ROC", "false positive rate", "true positive rate");
    s.push_str(&polyline(&f, &[(0.0, 0.0), (1.0, 1.0)], "#999999", true));
    s.push('\n');
    for (i, (_, pts)) in curves.iter().enumerate() {
        s.push_str(&polyline(&f, pts, COLORS[i % COLORS.len()], false));
        s.push('\n');
    }
    s.push_str(&legend(&curves.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>()));
    s.push_str("</svg>\n");
    s
}

/// Histogram of permuted statistics with the observed value marked.
pub fn histogram_svg(title: &str, permuted: &[f64], observed: f64, bins: usize) -> String {
    let (mut lo, mut hi) = extent(permuted.iter().copied().chain([observed]));
    if hi <= lo {
        lo -= 0.05;
        hi += 0.05;
    }
    let bins = bins.max(1);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in permuted {
        counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let f = Frame::new((lo, hi), (0.0, top * 1.1));
    let mut s = open_chart(&f, title, "metric value", "count");
    for (b, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let x = f.px(lo + b as f64 * width);
        let w = f.px(lo + (b + 1) as f64 * width) - x;
        let y = f.py(c as f64);
        let _ = writeln!(
            s,
            r##"<rect x="{x}" y="{y}" width="{w}" height="{}" fill="#1f77b4" stroke="white"/>"##,
            f.py(0.0) - y
        );
    }
    s.push_str(&polyline(&f, &[(observed, 0.0), (observed, top * 1.1)], "#d62728", false));
    s.push('\n');
    s.push_str(&legend(&["permuted".to_string(), format!("observed {observed:.3}")]));
    s.push_str("</svg>\n");
    s
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let header = r
        .headers()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = r
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    Ok((header, rows))
}

fn field(path: &Path, row: &csv::StringRecord, i: usize) -> Result<f64> {
    row.get(i)
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::data(format!("{}: bad numeric field in row {:?}", path.display(), row)))
}

fn render_loss(path: &Path) -> Result<String> {
    let (header, rows) = read_csv(path)?;
    let epochs = rows.iter().map(|r| field(path, r, 0)).collect::<Result<Vec<_>>>()?;
    let mut series = Vec::new();
    for (i, name) in header.iter().enumerate().skip(1) {
        series.push((name.clone(), rows.iter().map(|r| field(path, r, i)).collect::<Result<Vec<_>>>()?));
    }
    Ok(loss_svg(&epochs, &series))
}

fn render_roc(path: &Path) -> Result<String> {
    let (_, rows) = read_csv(path)?;
    let mut curves: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for r in &rows {
        let model = r.get(0).unwrap_or("").to_string();
        let pt = (field(path, r, 1)?, field(path, r, 2)?);
        match curves.last_mut() {
            Some((m, pts)) if *m == model => pts.push(pt),
            _ => curves.push((model, vec![pt])),
        }
    }
    Ok(roc_svg(&curves))
}

fn render_histogram(path: &Path, model: &str) -> Result<String> {
    let (_, rows) = read_csv(path)?;
    let mut permuted = Vec::new();
    let mut observed = None;
    for r in &rows {
        let v = field(path, r, 1)?;
        if r.get(0) == Some("observed") {
            observed = Some(v);
        } else {
            permuted.push(v);
        }
    }
    let observed = observed.ok_or_else(|| Error::data(format!("{}: no observed row", path.display())))?;
    let bins = ((permuted.len() as f64).sqrt().ceil() as usize).clamp(5, 40);
    Ok(histogram_svg(&format!("Permutation test ({model})"), &permuted, observed, bins))
}

/// Renders every chart whose CSV exists in `dir`; missing inputs are skipped
/// with a warning. Returns the SVG files written.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut jobs: Vec<(PathBuf, PathBuf, Option<String>)> = vec![
        (dir.join(LOSS_FILE), dir.join("loss_curve.svg"), None),
        (dir.join(ROC_FILE), dir.join("roc.svg"), None),
    ];
    let mut perms: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("permutation_") && n.ends_with(".csv"))
        })
        .collect();
    perms.sort();
    if perms.is_empty() {
        log::warn!("no permutation_<model>.csv in {}; skipping histograms", dir.display());
    }
    for p in perms {
        let model = p.file_stem().and_then(|s| s.to_str()).unwrap_or("").trim_start_matches("permutation_").to_string();
        jobs.push((p.clone(), p.with_extension("svg"), Some(model)));
    }

    let mut written = Vec::new();
    for (input, output, model) in jobs {
        if !input.exists() {
            log::warn!("{} not found; skipping its chart", input.display());
            continue;
        }
        let svg = match &model {
            Some(m) => render_histogram(&input, m)?,
            None if input.ends_with(LOSS_FILE) => render_loss(&input)?,
            None => render_roc(&input)?,
        };
        fs::write(&output, svg)?;
        written.push(output);
    }
    Ok(written)
}
