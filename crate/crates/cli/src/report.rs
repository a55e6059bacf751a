//! Report emission: accuracy-vs-epsilon line charts as standalone SVG, the
//! attack-free group statistics table, and a markdown summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{io_error, CliError};
use crate::stages::{Context, ACCURACY_CSV, CERTIFY_CSV, GROUP_STATS_CSV, LAYERED_CSV};

pub const CHART_FILE: &str = "report/accuracy.svg";
pub const REPORT_FILE: &str = "report/report.md";

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 9] =
    ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf"];

/// One chart line. `None` accuracies leave a gap.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, Option<f64>)>,
}

/// Rows of a CSV file keyed by header name.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str) -> Table {
        let mut lines = text.lines().filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().map(|h| h.split(',').map(str::to_string).collect()).unwrap_or_default();
        let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
        Table { header, rows }
    }

    fn column(&self, name: &str) -> Result<usize, CliError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Failed(format!("CSV has no column \"{name}\"")))
    }

    fn get<'a>(&self, row: &'a [String], name: &str) -> Result<&'a str, CliError> {
        let i = self.column(name)?;
        row.get(i).map(String::as_str).ok_or_else(|| CliError::Failed(format!("short CSV row for column \"{name}\"")))
    }

    fn float(&self, row: &[String], name: &str) -> Result<f64, CliError> {
        let v = self.get(row, name)?;
        v.parse().map_err(|_| CliError::Failed(format!("column \"{name}\": {v:?} is not a number")))
    }
}

/// Groups sweep rows into one series per method over the union of budgets,
/// with `expected` methods and budgets filled in as gaps when absent. The
/// returned warnings name every gap.
pub fn build_series(sweep: &Table, expected_methods: &[String], expected_eps: &[f64]) -> Result<(Vec<Series>, Vec<String>), CliError> {
    let mut values: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut order: Vec<String> = expected_methods.to_vec();
    let mut grid: Vec<f64> = expected_eps.to_vec();
    for row in &sweep.rows {
        let method = sweep.get(row, "method")?.to_string();
        let eps = sweep.float(row, "epsilon")?;
        let acc = sweep.float(row, "accuracy")?;
        if !order.contains(&method) {
            order.push(method.clone());
        }
        if !grid.contains(&eps) {
            grid.push(eps);
        }
        values.entry(method).or_default().push((eps, acc));
    }
    grid.sort_by(f64::total_cmp);
    let mut warnings = Vec::new();
    let series = order
        .into_iter()
        .map(|name| {
            let found = values.get(&name).map(Vec::as_slice).unwrap_or(&[]);
            if found.is_empty() {
                warnings.push(format!("no accuracy rows for method {name}"));
            }
            let points = grid
                .iter()
                .map(|&e| {
                    let acc = found.iter().find(|(x, _)| *x == e).map(|p| p.1);
                    if acc.is_none() && !found.is_empty() {
                        warnings.push(format!("method {name} has no accuracy at epsilon {e}"));
                    }
                    (e, acc)
                })
                .collect();
            Series { name, points }
        })
        .collect();
    Ok((series, warnings))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0');
    s.trim_end_matches('.').to_string()
}

/// Standalone SVG line chart of accuracy against the attack budget. Axes
/// are drawn even when there is nothing to plot.
pub fn render_chart(series: &[Series], title: &str) -> String {
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let (mut x0, mut x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if xs.is_empty() {
        (x0, x1) = (0.0, 0.2);
    } else if x1 <= x0 {
        x1 = x0 + 0.1;
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + (1.0 - y) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, LEFT + pw / 2.0, escape(title));
    let _ = writeln!(s, r#"<g class="axes" stroke="black" fill="none">"#);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}"/>"#, TOP + ph, LEFT + pw, TOP + ph);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}"/>"#, TOP + ph);
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g class="ticks">"#);
    for i in 0..=5 {
        let x = x0 + (x1 - x0) * f64::from(i) / 5.0;
        let _ = writeln!(s, r#"<line x1="{0:.2}" y1="{1}" x2="{0:.2}" y2="{2}" stroke="black"/>"#, px(x), TOP + ph, TOP + ph + 5.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#, px(x), TOP + ph + 18.0, tick_label(x));
    }
    for i in 0..=4 {
        let y = f64::from(i) / 4.0;
        let _ = writeln!(s, r#"<line x1="{}" y1="{1:.2}" x2="{LEFT}" y2="{1:.2}" stroke="black"/>"#, LEFT - 5.0, py(y));
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{0:.2}" x2="{1}" y2="{0:.2}" stroke="#dddddd"/>"##, py(y), LEFT + pw);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 8.0, py(y) + 4.0, tick_label(y));
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epsilon</text>"#, LEFT + pw / 2.0, HEIGHT - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">accuracy</text>"#,
        TOP + ph / 2.0
    );

    for (k, series) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let name = escape(&series.name);
        let _ = writeln!(s, r#"<g class="series" data-method="{name}" stroke="{color}" fill="{color}">"#);
        // Consecutive known points form one polyline; a missing value splits it.
        let mut run: Vec<(f64, f64)> = Vec::new();
        let flush = |run: &mut Vec<(f64, f64)>, s: &mut String| {
            if run.len() > 1 {
                let pts: Vec<String> = run.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
                let _ = writeln!(s, r#"<polyline fill="none" stroke-width="2" points="{}"/>"#, pts.join(" "));
            }
            run.clear();
        };
        for &(x, y) in &series.points {
            match y {
                Some(y) => {
                    let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3"/>"#, px(x), py(y));
                    run.push((x, y));
                }
                None => flush(&mut run, &mut s),
            }
        }
        flush(&mut run, &mut s);
        let _ = writeln!(s, "</g>");
    }

    let _ = writeln!(s, r#"<g class="legend">"#);
    for (k, series) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let y = TOP + 10.0 + 20.0 * k as f64;
        let lx = LEFT + pw + 15.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, y + 4.0, escape(&series.name));
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

/// Markdown table in the layout of the attack-free statistics table.
pub fn group_stats_table(stats: &Table) -> Result<String, CliError> {
    let mut s = String::from("| Method | Inactive Groups | Mean Grp. Acc. | Found Grp. Combs. |\n|---|---|---|---|\n");
    for row in &stats.rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} |",
            stats.get(row, "method")?,
            pct(stats.float(row, "inactive_groups")?),
            pct(stats.float(row, "mean_group_accuracy")?),
            pct(stats.float(row, "found_group_combinations")?)
        );
    }
    Ok(s)
}

fn read(path: &Path) -> Result<Option<String>, CliError> {
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_error(path, e)),
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

/// Writes the chart and `report.md` for the artifacts under `ctx.out`.
pub fn emit(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let mut md = format!("# {} run\n\nseed {}, config hash `{}`\n\n", cfg.experiment.name(), cfg.seed, ctx.hash);
    let mut warnings = Vec::new();

    if cfg.experiment.is_certificate() {
        let rel = if cfg.experiment == crate::config::ExperimentKind::Certify { CERTIFY_CSV } else { LAYERED_CSV };
        let text = read(&ctx.out.join(rel))?.ok_or_else(|| CliError::Failed(format!("{rel} not found (run `certify` first)")))?;
        let t = Table::parse(&text);
        let passed = t.rows.iter().filter(|r| t.get(r, "pass").is_ok_and(|v| v == "true")).count();
        let _ = writeln!(md, "## Certificates\n\n{passed} of {} checks passed ({rel}).\n", t.rows.len());
        if passed < t.rows.len() {
            warnings.push(format!("{} certificate checks failed", t.rows.len() - passed));
        }
    } else {
        let text = read(&ctx.out.join(ACCURACY_CSV))?
            .ok_or_else(|| CliError::Failed(format!("{ACCURACY_CSV} not found (run `attack` first)")))?;
        let sweep = Table::parse(&text);
        let methods: Vec<String> = cfg.methods.iter().map(|m| m.name().to_string()).collect();
        let (series, w) = build_series(&sweep, &methods, &cfg.attack.epsilons)?;
        warnings.extend(w);
        write(&ctx.out.join(CHART_FILE), &render_chart(&series, &format!("I-FGSM accuracy, {}", cfg.experiment.name())))?;

        md.push_str("## Accuracy under attack\n\n![accuracy](accuracy.svg)\n\n| Method |");
        let grid: Vec<f64> = series.first().map(|s| s.points.iter().map(|p| p.0).collect()).unwrap_or_default();
        for e in &grid {
            let _ = write!(md, " {} |", tick_label(*e));
        }
        md.push_str("\n|---|");
        md.push_str(&"---|".repeat(grid.len()));
        md.push('\n');
        for s in &series {
            let _ = write!(md, "| {} |", s.name);
            for p in &s.points {
                let _ = write!(md, " {} |", p.1.map_or("n/a".to_string(), pct));
            }
            md.push('\n');
        }
        md.push('\n');

        match read(&ctx.out.join(GROUP_STATS_CSV))? {
            Some(text) => {
                let _ = writeln!(md, "## Group statistics without attack\n\n{}", group_stats_table(&Table::parse(&text))?);
            }
            None if cfg.experiment.is_synthetic() => warnings.push(format!("{GROUP_STATS_CSV} not found")),
            None => {}
        }
    }

    md.push_str("## Warnings\n\n");
    if warnings.is_empty() {
        md.push_str("none\n");
    }
    for w in &warnings {
        let _ = writeln!(md, "- {w}");
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    write(&ctx.out.join(REPORT_FILE), &md)
}
