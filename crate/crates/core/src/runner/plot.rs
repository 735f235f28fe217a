//! Line charts of `metrics.csv` as standalone SVG 1.1 files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Columns of a parsed metrics file, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub headers: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl MetricsTable {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.headers
            .iter()
            .position(|h| h == name)
            .map(|i| &self.columns[i][..])
    }

    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }
}

const REQUIRED: [&str; 11] = [
    "epoch",
    "l_cls",
    "l_trans",
    "l_h",
    "cos_gh",
    "kurt_f",
    "kurt_g",
    "kurt_gap",
    "head_pair_cos",
    "probe_acc_g",
    "probe_acc_h",
];

pub fn read_metrics(path: &Path) -> Result<MetricsTable> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    for col in REQUIRED {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::MissingColumn {
                path: path.to_path_buf(),
                column: col.into(),
            });
        }
    }
    if !headers.iter().any(|h| h.starts_with("h_range_")) {
        return Err(Error::MissingColumn {
            path: path.to_path_buf(),
            column: "h_range_1".into(),
        });
    }
    let mut columns = vec![Vec::new(); headers.len()];
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", headers.len(), rec.len()),
            ));
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("`{field}` in column `{}` is not a number", headers[j])))?;
            columns[j].push(v);
        }
    }
    if columns[0].is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    Ok(MetricsTable { headers, columns })
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

// Finite range padded a little; a flat series gets a unit window.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Renders one chart. `NaN` points are skipped.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, x: &[f64], series: &[(&str, &[f64])]) -> String {
    let (x0, x1) = range(x.iter().copied());
    let (y0, y1) = range(series.iter().flat_map(|(_, s)| s.iter().copied()));
    let pw = WIDTH - MARGIN_L - MARGIN_R;
    let ph = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |v: f64| MARGIN_L + (v - x0) / (x1 - x0) * pw;
    let sy = |v: f64| MARGIN_T + (1.0 - (v - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\" standalone=\"no\"?>\n");
    s.push_str(
        "<!DOCTYPE svg PUBLIC \"-//W3C//DTD SVG 1.1//EN\" \"http://www.w3.org/Graphics/SVG/1.1/DTD/svg11.dtd\">\n",
    );
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(
        s,
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>"
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>",
        MARGIN_L + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>"
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            sx(xv),
            MARGIN_T + ph + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>",
            MARGIN_L - 6.0,
            sy(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{}</text>",
        MARGIN_L + pw / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{}</text>",
        MARGIN_T + ph / 2.0,
        MARGIN_T + ph / 2.0,
        escape(y_label)
    );
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64)> = x
            .iter()
            .zip(ys.iter())
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|(&a, &b)| (sx(a), sy(b)))
            .collect();
        if pts.len() > 1 {
            let path: Vec<String> = pts.iter().map(|(a, b)| format!("{a:.2},{b:.2}")).collect();
            let _ = writeln!(
                s,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
                path.join(" ")
            );
        }
        for (a, b) in &pts {
            let _ = writeln!(s, "<circle cx=\"{a:.2}\" cy=\"{b:.2}\" r=\"2.5\" fill=\"{color}\"/>");
        }
        let ly = MARGIN_T + 14.0 + 18.0 * k as f64;
        let lx = WIDTH - MARGIN_R + 12.0;
        let _ = writeln!(
            s,
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            lx + 18.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
            lx + 24.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Writes `losses.svg`, `cosine.svg`, `kurtosis.svg`, `heuristic_ranges.svg`
/// and `probes.svg` and returns their paths.
pub fn plot_metrics(metrics: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let t = read_metrics(metrics)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let col = |n: &str| t.column(n).expect("checked on read");
    let epoch = col("epoch");
    let ranges: Vec<(&str, &[f64])> = t
        .headers
        .iter()
        .zip(&t.columns)
        .filter(|(h, _)| h.starts_with("h_range_"))
        .map(|(h, c)| (h.as_str(), &c[..]))
        .collect();
    let charts = [
        (
            "losses.svg",
            line_chart(
                "Training losses",
                "epoch",
                "loss",
                epoch,
                &[
                    ("l_cls", col("l_cls")),
                    ("l_trans", col("l_trans")),
                    ("l_h", col("l_h")),
                ],
            ),
        ),
        (
            "cosine.svg",
            line_chart(
                "Cosine similarity of G and H",
                "epoch",
                "cosine",
                epoch,
                &[("cos_gh", col("cos_gh")), ("head_pair_cos", col("head_pair_cos"))],
            ),
        ),
        (
            "kurtosis.svg",
            line_chart(
                "Nongaussianity",
                "epoch",
                "excess kurtosis",
                epoch,
                &[
                    ("kurt_f", col("kurt_f")),
                    ("kurt_g", col("kurt_g")),
                    ("kurt_gap", col("kurt_gap")),
                ],
            ),
        ),
        (
            "heuristic_ranges.svg",
            line_chart("Heuristic head ranges", "epoch", "mean |H^k(x)|", epoch, &ranges),
        ),
        (
            "probes.svg",
            line_chart(
                "Domain probe accuracy",
                "epoch",
                "accuracy",
                epoch,
                &[("probe_acc_g", col("probe_acc_g")), ("probe_acc_h", col("probe_acc_h"))],
            ),
        ),
    ];
    let mut written = Vec::new();
    for (name, svg) in charts {
        let p = out_dir.join(name);
        fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
        written.push(p);
    }
    Ok(written)
}
