//! Comparison and training-size sweep tables over finished runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use itlsca::dataset::{ensure_dir, read_json};
use itlsca::keyrank::RankReport;

use crate::CliError;

pub const COMPARISON_COLUMNS: [&str; 4] = ["Method", "Average MTD", "Worst MTD", "Average Rank"];

/// One evaluated run.
#[derive(Clone, Debug)]
pub struct Run {
    pub dir: PathBuf,
    pub report: RankReport,
}

pub fn load_runs(dirs: &[PathBuf]) -> Result<Vec<Run>, CliError> {
    dirs.iter()
        .map(|d| {
            let file = if d.is_dir() { d.join("report.json") } else { d.clone() };
            Ok(Run {
                dir: d.clone(),
                report: read_json(&file)?,
            })
        })
        .collect()
}

pub fn fmt_mtd(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.1}"),
        None => "N/A".into(),
    }
}

/// Row labels: the method, qualified by the training size when a method
/// appears more than once.
fn labels(runs: &[Run]) -> Vec<String> {
    let mut count: BTreeMap<&str, usize> = BTreeMap::new();
    for r in runs {
        *count.entry(r.report.method.as_str()).or_default() += 1;
    }
    runs.iter()
        .map(|r| {
            let m = &r.report.method;
            match (count[m.as_str()], r.report.n_train) {
                (1, _) | (_, None) => m.clone(),
                (_, Some(n)) => format!("{m} (n={n})"),
            }
        })
        .collect()
}

pub struct Tables {
    pub comparison_md: String,
    pub comparison_csv: String,
    pub sweep_md: String,
    pub sweep_csv: String,
    pub sweep_svg: String,
}

pub fn build(runs: &[Run]) -> Tables {
    let labels = labels(runs);
    let mut comparison_md = format!("| {} |\n|---|---:|---:|---:|\n", COMPARISON_COLUMNS.join(" | "));
    let mut comparison_csv = format!("{}\n", COMPARISON_COLUMNS.join(","));
    for (run, label) in runs.iter().zip(&labels) {
        let r = &run.report.result;
        let cells = [
            label.clone(),
            fmt_mtd(r.average_mtd),
            fmt_mtd(r.worst_mtd),
            format!("{:.2}", r.average_rank),
        ];
        writeln!(comparison_md, "| {} |", cells.join(" | ")).expect("string write");
        writeln!(
            comparison_csv,
            "{}",
            cells.iter().map(|c| csv_cell(c)).collect::<Vec<_>>().join(",")
        )
        .expect("string write");
    }

    // method -> n_train -> average MTD; later runs win on duplicates
    let mut sweep: BTreeMap<String, BTreeMap<usize, Option<f64>>> = BTreeMap::new();
    let mut sizes = BTreeSet::new();
    for run in runs {
        if let Some(n) = run.report.n_train {
            sizes.insert(n);
            sweep
                .entry(run.report.method.clone())
                .or_default()
                .insert(n, run.report.result.average_mtd);
        }
    }
    let sizes: Vec<usize> = sizes.into_iter().collect();
    let mut sweep_md = String::from("| Method |");
    for n in &sizes {
        write!(sweep_md, " {n} |").expect("string write");
    }
    sweep_md.push_str("\n|---|");
    sweep_md.push_str(&"---:|".repeat(sizes.len()));
    sweep_md.push('\n');
    let mut sweep_csv = String::from("method,n_train,average_mtd\n");
    for (method, by_n) in &sweep {
        write!(sweep_md, "| {method} |").expect("string write");
        for n in &sizes {
            let cell = match by_n.get(n) {
                Some(v) => fmt_mtd(*v),
                None => "-".into(),
            };
            write!(sweep_md, " {cell} |").expect("string write");
        }
        sweep_md.push('\n');
        for (n, v) in by_n {
            writeln!(
                sweep_csv,
                "{},{n},{}",
                csv_cell(method),
                v.map(|x| x.to_string()).unwrap_or_default()
            )
            .expect("string write");
        }
    }
    let sweep_svg = sweep_plot(&sweep, &sizes);
    Tables {
        comparison_md,
        comparison_csv,
        sweep_md,
        sweep_csv,
        sweep_svg,
    }
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Average MTD against training size, one polyline per method. N/A points
/// are left out.
fn sweep_plot(sweep: &BTreeMap<String, BTreeMap<usize, Option<f64>>>, sizes: &[usize]) -> String {
    let (w, h, pad) = (640.0, 400.0, 60.0);
    let ymax = sweep
        .values()
        .flat_map(|m| m.values().flatten())
        .fold(0.0f64, |a, &b| a.max(b))
        .max(1.0)
        * 1.1;
    let x = |i: usize| {
        if sizes.len() <= 1 {
            w / 2.0
        } else {
            pad + (w - 2.0 * pad) * i as f64 / (sizes.len() - 1) as f64
        }
    };
    let y = |v: f64| h - pad - (h - 2.0 * pad) * v / ymax;
    let mut s =
        format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n");
    writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>").expect("string write");
    writeln!(
        s,
        "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/><line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>",
        h - pad,
        w - pad,
        h - pad,
        h - pad
    )
    .expect("string write");
    for (i, n) in sizes.iter().enumerate() {
        writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{n}</text>",
            x(i),
            h - pad + 18.0
        )
        .expect("string write");
    }
    for k in 0..=4 {
        let v = ymax * k as f64 / 4.0;
        writeln!(
            s,
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.0}</text>",
            pad - 6.0,
            y(v) + 4.0
        )
        .expect("string write");
    }
    writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">training traces</text>",
        w / 2.0,
        h - 15.0
    )
    .expect("string write");
    writeln!(
        s,
        "<text x=\"15\" y=\"{}\" transform=\"rotate(-90 15 {})\" text-anchor=\"middle\">average MTD</text>",
        h / 2.0,
        h / 2.0
    )
    .expect("string write");
    for (li, (method, by_n)) in sweep.iter().enumerate() {
        let color = PALETTE[li % PALETTE.len()];
        let pts: Vec<String> = sizes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| by_n.get(n).copied().flatten().map(|v| format!("{:.1},{:.1}", x(i), y(v))))
            .collect();
        if !pts.is_empty() {
            writeln!(
                s,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
                pts.join(" ")
            )
            .expect("string write");
            for p in &pts {
                let (px, py) = p.split_once(',').expect("point");
                writeln!(s, "<circle cx=\"{px}\" cy=\"{py}\" r=\"3\" fill=\"{color}\"/>").expect("string write");
            }
        }
        let ly = pad + 16.0 * li as f64;
        writeln!(
            s,
            "<text x=\"{}\" y=\"{ly:.1}\" fill=\"{color}\">{}</text>",
            w - pad - 120.0,
            xml_escape(method)
        )
        .expect("string write");
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `report.md`, `comparison.csv`, `sweep.csv` and `sweep.svg`.
pub fn write(out: &Path, runs: &[Run]) -> Result<Tables, CliError> {
    if runs.is_empty() {
        return Err(CliError::Config("report needs at least one run directory".into()));
    }
    let t = build(runs);
    ensure_dir(out)?;
    let md = format!(
        "## Comparison\n\n{}\n## Training-size sweep (average MTD)\n\n{}",
        t.comparison_md, t.sweep_md
    );
    for (name, body) in [
        ("report.md", md.as_str()),
        ("comparison.csv", t.comparison_csv.as_str()),
        ("sweep.csv", t.sweep_csv.as_str()),
        ("sweep.svg", t.sweep_svg.as_str()),
    ] {
        let path = out.join(name);
        std::fs::write(&path, body).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(t)
}
