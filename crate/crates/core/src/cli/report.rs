//! SVG charts and a Markdown summary built only from evaluation CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::manifest::ManifestBuilder;
use super::{CliResult, ReportArgs};
use crate::error::{Error, Result};
use crate::metrics::EvalResult;

const EXPLICIT_SHADES: [&str; 4] = ["#1f77b4", "#6baed6", "#08519c", "#9ecae1"];
const IMPLICIT_SHADES: [&str; 4] = ["#ff7f0e", "#fdae6b", "#a63603", "#fdd0a2"];
const LINE_COLORS: [&str; 6] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"];

/// Parsed contents of one run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunData {
    pub name: String,
    /// `(predicate, recall@100, is_implicit)` in file order.
    pub per_class: Vec<(String, f64, bool)>,
    /// Header cell to value text, from metrics.csv.
    pub metrics: Vec<(String, String)>,
    /// `(iteration, mR@50)` from train_log.csv, when present.
    pub curve: Vec<(f64, f64)>,
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path, required: &[&str]) -> Result<Table> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Dataset(format!("reading {}: {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    for col in required {
        if !header.iter().any(|h| h == col) {
            return Err(Error::Dataset(format!("{}: missing column {col:?}", path.display())));
        }
    }
    let rows = reader
        .records()
        .map(|r| {
            r.map(|rec| rec.iter().map(str::to_string).collect())
                .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
        })
        .collect::<Result<_>>()?;
    Ok(Table { header, rows })
}

impl Table {
    fn col(&self, name: &str) -> usize {
        self.header.iter().position(|h| h == name).expect("checked column")
    }
}

fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Dataset(format!("{}: {s:?} is not a number", path.display())))
}

impl RunData {
    pub fn load(dir: &Path) -> Result<Self> {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());

        let pc_path = dir.join("per_class.csv");
        let pc = read_table(&pc_path, &["predicate", "recall@100", "is_implicit"])?;
        let (p, r, i) = (pc.col("predicate"), pc.col("recall@100"), pc.col("is_implicit"));
        let per_class = pc
            .rows
            .iter()
            .map(|row| Ok((row[p].clone(), parse_f64(&pc_path, &row[r])?, row[i] == "true")))
            .collect::<Result<_>>()?;

        let m_path = dir.join("metrics.csv");
        let required: Vec<&str> = EvalResult::CSV_HEADER.split(',').collect();
        let m = read_table(&m_path, &required)?;
        let row = m
            .rows
            .first()
            .ok_or_else(|| Error::Dataset(format!("{}: no data row", m_path.display())))?;
        let metrics = required
            .iter()
            .map(|c| (c.to_string(), row[m.col(c)].clone()))
            .collect();

        let log_path = dir.join("train_log.csv");
        let curve = if log_path.exists() {
            let log = read_table(&log_path, &["iteration", "mR@50"])?;
            let (it, mr) = (log.col("iteration"), log.col("mR@50"));
            log.rows
                .iter()
                .map(|row| Ok((parse_f64(&log_path, &row[it])?, parse_f64(&log_path, &row[mr])?)))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(RunData {
            name,
            per_class,
            metrics,
            curve,
        })
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn svg_open(width: f64, height: f64) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn y_axis(out: &mut String, left: f64, top: f64, plot_h: f64, right: f64, max: f64) {
    for step in 0..=4 {
        let v = max * step as f64 / 4.0;
        let y = top + plot_h - plot_h * step as f64 / 4.0;
        let _ = writeln!(
            out,
            "<line x1=\"{left:.1}\" y1=\"{y:.1}\" x2=\"{right:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>",
            left - 4.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        "<line x1=\"{left:.1}\" y1=\"{top:.1}\" x2=\"{left:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
        top + plot_h
    );
}

/// Grouped bars of per-class Recall@100: one group per observed predicate,
/// one bar per run, blue shades for explicit and orange shades for implicit.
pub fn render_per_class_chart(runs: &[RunData]) -> String {
    let mut classes: Vec<(String, bool)> = Vec::new();
    for run in runs {
        for (name, _, implicit) in &run.per_class {
            if !classes.iter().any(|(c, _)| c == name) {
                classes.push((name.clone(), *implicit));
            }
        }
    }
    let bar_w = 10.0;
    let group_w = bar_w * runs.len() as f64 + 6.0;
    let (left, top, plot_h) = (50.0, 40.0, 240.0);
    let legend_h = 16.0 * runs.len() as f64 + 10.0;
    let width = left + group_w * classes.len() as f64 + 20.0;
    let height = top + plot_h + 110.0 + legend_h;
    let mut out = svg_open(width.max(320.0), height);
    let _ = writeln!(out, "<text x=\"{left:.1}\" y=\"20\" font-size=\"14\">Per-class Recall@100</text>");
    y_axis(&mut out, left, top, plot_h, left + group_w * classes.len() as f64, 1.0);

    let lookup: Vec<BTreeMap<&str, f64>> = runs
        .iter()
        .map(|r| r.per_class.iter().map(|(n, v, _)| (n.as_str(), *v)).collect())
        .collect();
    for (ci, (class, implicit)) in classes.iter().enumerate() {
        let gx = left + group_w * ci as f64 + 3.0;
        for (ri, values) in lookup.iter().enumerate() {
            let Some(&v) = values.get(class.as_str()) else { continue };
            let shade = if *implicit { IMPLICIT_SHADES } else { EXPLICIT_SHADES }[ri % 4];
            let h = plot_h * v.clamp(0.0, 1.0);
            let _ = writeln!(
                out,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bar_w:.1}\" height=\"{h:.1}\" fill=\"{shade}\"><title>{}: {} {v:.4}</title></rect>",
                gx + bar_w * ri as f64,
                top + plot_h - h,
                xml_escape(&runs[ri].name),
                xml_escape(class)
            );
        }
        let lx = gx + bar_w * runs.len() as f64 / 2.0;
        let ly = top + plot_h + 8.0;
        let _ = writeln!(
            out,
            "<text x=\"{lx:.1}\" y=\"{ly:.1}\" text-anchor=\"end\" transform=\"rotate(-60 {lx:.1} {ly:.1})\">{}</text>",
            xml_escape(class)
        );
    }
    let base = top + plot_h;
    let _ = writeln!(
        out,
        "<line x1=\"{left:.1}\" y1=\"{base:.1}\" x2=\"{:.1}\" y2=\"{base:.1}\" stroke=\"black\"/>",
        left + group_w * classes.len() as f64
    );
    let legend_top = top + plot_h + 105.0;
    for (ri, run) in runs.iter().enumerate() {
        let y = legend_top + 16.0 * ri as f64;
        let _ = writeln!(
            out,
            "<rect x=\"{left:.1}\" y=\"{y:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><rect x=\"{:.1}\" y=\"{y:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\">{} (explicit / implicit)</text>",
            EXPLICIT_SHADES[ri % 4],
            left + 12.0,
            IMPLICIT_SHADES[ri % 4],
            left + 28.0,
            y + 9.0,
            xml_escape(&run.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Validation mR@50 against iteration, one line per run with a log.
pub fn render_mr_curve(runs: &[RunData]) -> String {
    let (left, top, plot_w, plot_h) = (60.0, 40.0, 480.0, 240.0);
    let max_x = runs
        .iter()
        .flat_map(|r| r.curve.iter().map(|p| p.0))
        .fold(1.0_f64, f64::max);
    let max_y = runs
        .iter()
        .flat_map(|r| r.curve.iter().map(|p| p.1))
        .fold(0.0_f64, f64::max)
        .max(0.05);
    let max_y = (max_y * 10.0).ceil() / 10.0;
    let legend_h = 16.0 * runs.len() as f64;
    let mut out = svg_open(left + plot_w + 30.0, top + plot_h + 50.0 + legend_h);
    let _ = writeln!(out, "<text x=\"{left:.1}\" y=\"20\" font-size=\"14\">Validation mR@50 by iteration</text>");
    y_axis(&mut out, left, top, plot_h, left + plot_w, max_y);
    let base = top + plot_h;
    let _ = writeln!(
        out,
        "<line x1=\"{left:.1}\" y1=\"{base:.1}\" x2=\"{:.1}\" y2=\"{base:.1}\" stroke=\"black\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{max_x:.0}</text>\n<text x=\"{left:.1}\" y=\"{:.1}\">0</text>",
        left + plot_w,
        left + plot_w,
        base + 16.0,
        base + 16.0
    );
    for (ri, run) in runs.iter().enumerate() {
        let color = LINE_COLORS[ri % LINE_COLORS.len()];
        if !run.curve.is_empty() {
            let points: Vec<String> = run
                .curve
                .iter()
                .map(|(x, y)| format!("{:.1},{:.1}", left + plot_w * x / max_x, base - plot_h * y / max_y))
                .collect();
            let _ = writeln!(
                out,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
                points.join(" ")
            );
        }
        let y = base + 30.0 + 16.0 * ri as f64;
        let _ = writeln!(
            out,
            "<rect x=\"{left:.1}\" y=\"{y:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            left + 16.0,
            y + 9.0,
            xml_escape(&run.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

pub fn render_summary(runs: &[RunData]) -> String {
    let mut out = String::from("# Evaluation summary\n\n");
    out.push_str(
        "Predicate classification with ground-truth boxes and classes. Candidates are every \
         (annotated pair, predicate) combination of an image, ranked by classifier probability; \
         a pair may contribute several predicates to the top K. mR@K averages per-predicate recall \
         over predicates with ground truth. `—` marks an undefined zero-shot recall.\n\n",
    );
    let header: Vec<&str> = EvalResult::CSV_HEADER.split(',').collect();
    let _ = writeln!(out, "| run | {} |", header.join(" | "));
    let _ = writeln!(out, "|---|{}", "---|".repeat(header.len()));
    for run in runs {
        let cells: Vec<&str> = run.metrics.iter().map(|(_, v)| v.as_str()).collect();
        let _ = writeln!(out, "| {} | {} |", run.name.replace('|', "\\|"), cells.join(" | "));
    }
    out
}

pub(super) fn run(args: &ReportArgs, argv: Vec<String>) -> CliResult<()> {
    let runs = args
        .runs
        .iter()
        .map(|d| RunData::load(d))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(format!("creating {}", args.out.display()), e))?;
    let mut manifest = ManifestBuilder::new("report", argv, None);
    let mut files = vec![
        ("per_class_recall.svg", render_per_class_chart(&runs)),
        ("summary.md", render_summary(&runs)),
    ];
    if runs.iter().any(|r| !r.curve.is_empty()) {
        files.push(("mr_curve.svg", render_mr_curve(&runs)));
    }
    for (name, text) in files {
        let path = args.out.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        manifest.artifact(&path);
    }
    manifest.manifest.config = serde_json::json!({
        "runs": args.runs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>()
    });
    manifest.finish(&args.out)?;
    println!("wrote report for {} run(s) to {}", runs.len(), args.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(name: &str, classes: &[(&str, f64, bool)]) -> RunData {
        RunData {
            name: name.into(),
            per_class: classes.iter().map(|(n, v, i)| (n.to_string(), *v, *i)).collect(),
            metrics: EvalResult::CSV_HEADER.split(',').map(|h| (h.to_string(), "0.5".into())).collect(),
            curve: vec![(500.0, 0.1), (1000.0, 0.2)],
        }
    }

    #[test]
    fn bar_counts() {
        let a = run("a", &[("on", 0.5, false), ("riding", 0.25, true)]);
        let b = run("b", &[("on", 0.75, false), ("eating", 1.0, true)]);
        assert_eq!(render_per_class_chart(&[a.clone()]).matches("<title>").count(), 2);
        let two = render_per_class_chart(&[a, b]);
        assert_eq!(two.matches("<title>").count(), 4);
        assert!(two.contains(EXPLICIT_SHADES[1]) && two.contains(IMPLICIT_SHADES[0]));
    }

    #[test]
    fn summary_table_shape() {
        let md = render_summary(&[run("x", &[])]);
        assert!(md.contains("| x | 0.5 |"));
        assert!(render_mr_curve(&[run("x", &[])]).contains("<polyline"));
    }
}
