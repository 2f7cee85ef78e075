//! Side-by-side test MRE of several runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ahl_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub name: String,
    pub mode: String,
    /// `None` for an aggregate row.
    pub seed: Option<u64>,
    pub mre: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub rows: Vec<RunRow>,
    /// `best[r][c]`: columns are the landmarks followed by the mean.
    pub best: Vec<Vec<bool>>,
}

fn average(rows: &[&RunRow], mode: &str) -> RunRow {
    let n = rows.len() as f64;
    let landmarks = rows[0].mre.len();
    RunRow {
        name: format!("mean({mode})"),
        mode: mode.to_string(),
        seed: None,
        mre: (0..landmarks).map(|i| rows.iter().map(|r| r.mre[i]).sum::<f64>() / n).collect(),
        mean: rows.iter().map(|r| r.mean).sum::<f64>() / n,
        sd: rows.iter().map(|r| r.sd).sum::<f64>() / n,
    }
}

/// Appends one mean row per mode with several runs and marks column minima.
pub fn build(runs: Vec<RunRow>) -> Result<Table> {
    if runs.len() < 2 {
        return Err(Error::Validation("compare needs at least two runs".into()));
    }
    let landmarks = runs[0].mre.len();
    if let Some(r) = runs.iter().find(|r| r.mre.len() != landmarks) {
        return Err(Error::Validation(format!(
            "{} has {} landmarks but {} has {landmarks}",
            r.name,
            r.mre.len(),
            runs[0].name
        )));
    }
    let mut by_mode: BTreeMap<&str, Vec<&RunRow>> = BTreeMap::new();
    for r in &runs {
        by_mode.entry(r.mode.as_str()).or_default().push(r);
    }
    let means: Vec<RunRow> = by_mode
        .iter()
        .filter(|(_, v)| v.len() > 1)
        .map(|(m, v)| average(v, m))
        .collect();
    let mut rows = runs;
    rows.extend(means);
    let cols = landmarks + 1;
    let value = |r: &RunRow, c: usize| if c < landmarks { r.mre[c] } else { r.mean };
    let minima: Vec<f64> = (0..cols)
        .map(|c| rows.iter().map(|r| value(r, c)).fold(f64::INFINITY, f64::min))
        .collect();
    let best = rows
        .iter()
        .map(|r| (0..cols).map(|c| value(r, c) == minima[c]).collect())
        .collect();
    Ok(Table { rows, best })
}

fn mark(b: bool) -> &'static str {
    if b { "*" } else { " " }
}

pub fn render_table(t: &Table) -> String {
    let landmarks = t.rows[0].mre.len();
    let name_w = t.rows.iter().map(|r| r.name.len()).max().unwrap_or(3).max(3);
    let mut s = String::new();
    let _ = write!(s, "{:<name_w$}  {:<8}  {:>5}", "run", "mode", "seed");
    for i in 0..landmarks {
        let _ = write!(s, "  {:>9}", format!("L{i}"));
    }
    let _ = writeln!(s, "  {:>17}", "Mean\u{b1}SD");
    for (r, best) in t.rows.iter().zip(&t.best) {
        let seed = r.seed.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
        let _ = write!(s, "{:<name_w$}  {:<8}  {:>5}", r.name, r.mode, seed);
        for (v, b) in r.mre.iter().zip(best) {
            let _ = write!(s, "  {:>8.4}{}", v, mark(*b));
        }
        let _ = writeln!(s, "  {:>16}{}", format!("{:.4}\u{b1}{:.4}", r.mean, r.sd), mark(best[landmarks]));
    }
    s
}

pub fn render_csv(t: &Table) -> String {
    let landmarks = t.rows[0].mre.len();
    let mut s = String::from("run,mode,seed");
    for i in 0..landmarks {
        let _ = write!(s, ",mre_l{i}");
    }
    s.push_str(",mean,sd\n");
    for r in &t.rows {
        let seed = r.seed.map(|v| v.to_string()).unwrap_or_default();
        let _ = write!(s, "{},{},{seed}", r.name, r.mode);
        for v in &r.mre {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{},{}", r.mean, r.sd);
    }
    s
}
