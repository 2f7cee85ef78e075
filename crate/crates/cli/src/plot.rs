//! Static SVG line charts of σ and reward traces.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ahl_core::rundir::{read_reward_csv, read_sigma_csv, REWARD_CSV, SIGMA_CSV};
use ahl_core::{Error, Result};

pub const SIGMA_SVG: &str = "sigma_curves.svg";
pub const REWARD_SVG: &str = "reward_curves.svg";

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 52.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const DASHES: [&str; 4] = ["none", "6 4", "2 3", "8 3 2 3"];

/// One line: `(x, y)` points of a landmark in a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub run: usize,
    pub run_label: String,
    pub landmark: usize,
    pub points: Vec<(f64, f64)>,
}

/// Averages values sharing an `(landmark, iteration)` cell, ordered by iteration.
pub fn group(rows: impl IntoIterator<Item = (usize, usize, f64)>) -> BTreeMap<usize, Vec<(f64, f64)>> {
    let mut cells: BTreeMap<usize, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for (t, i, v) in rows {
        let c = cells.entry(i).or_default().entry(t).or_insert((0.0, 0));
        c.0 += v;
        c.1 += 1;
    }
    cells
        .into_iter()
        .map(|(i, m)| (i, m.into_iter().map(|(t, (s, n))| (t as f64, s / n as f64)).collect()))
        .collect()
}

fn label(run: &Path) -> String {
    run.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| run.display().to_string())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

/// Renders traces on shared axes.
pub fn render(title: &str, y_label: &str, traces: &[Trace]) -> String {
    let all = traces.iter().flat_map(|t| t.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y0 -= 1.0;
        y1 += 1.0;
    } else {
        let pad = 0.05 * (y1 - y0);
        y0 -= pad;
        y1 += pad;
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, "<title>{}</title>", escape(title));
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text class="title" x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );

    let _ = writeln!(s, r#"<g class="axes" stroke="black" fill="none">"#);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}"/>"#, TOP + ph, LEFT + pw, TOP + ph);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}"/>"#, TOP + ph);
    s.push_str("</g>\n<g class=\"ticks\" font-size=\"11\">\n");
    for k in 0..=5 {
        let f = k as f64 / 5.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{}" x2="{px:.2}" y2="{}" stroke="black"/><text x="{px:.2}" y="{}" text-anchor="middle">{}</text>"#,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 18.0,
            tick_label(xv)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 5.0,
            LEFT - 8.0,
            py + 4.0,
            tick_label(yv)
        );
    }
    s.push_str("</g>\n");
    let _ = writeln!(
        s,
        r#"<text class="xlabel" x="{}" y="{}" text-anchor="middle">iteration</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text class="ylabel" x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );

    for t in traces {
        let color = PALETTE[t.landmark % PALETTE.len()];
        let dash = DASHES[t.run % DASHES.len()];
        let _ = writeln!(
            s,
            r#"<g class="trace" data-run="{}" data-landmark="{}" stroke="{color}" stroke-dasharray="{dash}" fill="none" stroke-width="1.6">"#,
            t.run, t.landmark
        );
        let pts: Vec<String> = t.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}"/>"#, pts.join(" "));
        s.push_str("</g>\n");
    }
    if traces.is_empty() {
        let _ = writeln!(
            s,
            r#"<text class="empty" x="{}" y="{}" text-anchor="middle">no records</text>"#,
            LEFT + pw / 2.0,
            TOP + ph / 2.0
        );
    }

    s.push_str("<g class=\"legend\">\n");
    let lx = WIDTH - RIGHT + 16.0;
    for (k, t) in traces.iter().enumerate() {
        let y = TOP + 8.0 + 18.0 * k as f64;
        let color = PALETTE[t.landmark % PALETTE.len()];
        let dash = DASHES[t.run % DASHES.len()];
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-dasharray="{dash}" stroke-width="1.6"/><text x="{}" y="{}">{} L{}</text>"#,
            lx + 24.0,
            lx + 30.0,
            y + 4.0,
            escape(&t.run_label),
            t.landmark
        );
    }
    s.push_str("</g>\n</svg>\n");
    s
}

fn written_files(out: &Path) -> [PathBuf; 2] {
    [out.join(SIGMA_SVG), out.join(REWARD_SVG)]
}

/// Reads each run's CSVs and writes both charts into `out`.
pub fn write_plots(runs: &[PathBuf], out: &Path, force: bool) -> Result<Vec<PathBuf>> {
    let mut sigma = Vec::new();
    let mut reward = Vec::new();
    for (r, dir) in runs.iter().enumerate() {
        let name = label(dir);
        let rows = read_sigma_csv(&dir.join(SIGMA_CSV))?;
        for (landmark, points) in group(rows.iter().map(|p| (p.iteration, p.landmark, p.sigma))) {
            sigma.push(Trace {
                run: r,
                run_label: name.clone(),
                landmark,
                points,
            });
        }
        let rows = read_reward_csv(&dir.join(REWARD_CSV))?;
        for (landmark, points) in group(rows.iter().map(|p| (p.iteration, p.landmark, p.reward))) {
            reward.push(Trace {
                run: r,
                run_label: name.clone(),
                landmark,
                points,
            });
        }
    }
    let files = written_files(out);
    for f in &files {
        crate::check_clobber(f, force)?;
    }
    let docs = [
        render("Gaussian \u{3c3} per landmark", "\u{3c3}", &sigma),
        render("Mean reward per landmark", "reward", &reward),
    ];
    for (f, doc) in files.iter().zip(docs) {
        fs::write(f, doc).map_err(|source| Error::Io {
            path: f.clone(),
            source,
        })?;
    }
    Ok(files.to_vec())
}
