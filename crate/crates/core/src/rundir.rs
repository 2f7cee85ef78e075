//! Run directory files: CSV traces, JSON summary and config echo, and the
//! readers used by plotting and comparison.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::laoml::{RunArtifacts, SigmaPoint};
use crate::metrics::Summary;

pub const CONFIG_ECHO: &str = "config.echo.json";
pub const SIGMA_CSV: &str = "sigma.csv";
pub const REWARD_CSV: &str = "reward.csv";
pub const EPOCHS_CSV: &str = "epochs.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const TIMING_JSON: &str = "timing.json";
pub const LEARNER_CKPT: &str = "learner.ckpt";
pub const CONTROLLERS_CKPT: &str = "controllers.ckpt";

/// Pretty JSON with object keys sorted, plus a trailing newline.
pub fn to_canonical_json(value: &impl Serialize) -> Result<String> {
    // serde_json's map is ordered by key, so a round trip through Value sorts
    let v = serde_json::to_value(value).map_err(|e| Error::Numerical(format!("cannot serialise: {e}")))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::Numerical(format!("cannot serialise: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, to_canonical_json(value)?).map_err(|e| Error::io(path, e))
}

/// Writes `header` and then one record per serialisable row.
pub(crate) fn write_csv<R: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Records of a CSV file with a known header, each with its byte offset.
pub(crate) fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<(u64, csv::StringRecord)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let at = |e: &csv::Error| e.position().map_or(0, |p| p.byte());
    let got = r.headers().map_err(|e| Error::format(path, at(&e), e.to_string()))?;
    if got.iter().ne(header.iter().copied()) {
        return Err(Error::format(path, 0, format!("expected header {}", header.join(","))));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::format(path, at(&e), e.to_string()))?;
            Ok((rec.position().map_or(0, |p| p.byte()), rec))
        })
        .collect()
}

/// Field `i` of `rec` parsed as `T`, or a format error at the record.
pub(crate) fn field<T: std::str::FromStr>(path: &Path, offset: u64, rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    rec.get(i).and_then(|f| f.parse().ok()).ok_or_else(|| {
        let line = rec.position().map_or(0, |p| p.line());
        Error::format(path, offset, format!("line {line}: bad {name} {:?}", rec.get(i).unwrap_or("")))
    })
}

/// Writes every CSV and JSON artifact of a finished run into `dir`.
pub fn write_artifacts(dir: &Path, a: &RunArtifacts) -> Result<()> {
    write_csv(
        &dir.join(SIGMA_CSV),
        &["iteration", "landmark", "sigma"],
        a.sigma.iter().map(|p| (p.iteration, p.landmark, p.sigma)),
    )?;
    write_csv(
        &dir.join(REWARD_CSV),
        &["iteration", "sample", "landmark", "epsilon", "reward"],
        a.rewards.iter().map(|r| (r.iteration, r.sample, r.landmark, r.epsilon, r.reward)),
    )?;
    write_csv(
        &dir.join(EPOCHS_CSV),
        &["epoch", "landmark", "train_mse", "val_mre"],
        a.epochs.iter().flat_map(|e| {
            e.train_mse
                .iter()
                .zip(&e.val_mre)
                .enumerate()
                .map(move |(i, (m, v))| (e.epoch, i, *m, *v))
        }),
    )?;
    if let Some(summary) = &a.summary {
        write_json(&dir.join(SUMMARY_JSON), summary)?;
    }
    write_json(&dir.join(TIMING_JSON), &a.timing)
}

pub fn read_sigma_csv(path: &Path) -> Result<Vec<SigmaPoint>> {
    read_csv(path, &["iteration", "landmark", "sigma"])?
        .iter()
        .map(|(at, r)| {
            Ok(SigmaPoint {
                iteration: field(path, *at, r, 0, "iteration")?,
                landmark: field(path, *at, r, 1, "landmark")?,
                sigma: field(path, *at, r, 2, "sigma")?,
            })
        })
        .collect()
}

/// One `reward.csv` row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardRow {
    pub iteration: usize,
    pub sample: usize,
    pub landmark: usize,
    pub epsilon: f64,
    pub reward: f64,
}

pub fn read_reward_csv(path: &Path) -> Result<Vec<RewardRow>> {
    read_csv(path, &["iteration", "sample", "landmark", "epsilon", "reward"])?
        .iter()
        .map(|(at, r)| {
            Ok(RewardRow {
                iteration: field(path, *at, r, 0, "iteration")?,
                sample: field(path, *at, r, 1, "sample")?,
                landmark: field(path, *at, r, 2, "landmark")?,
                epsilon: field(path, *at, r, 3, "epsilon")?,
                reward: field(path, *at, r, 4, "reward")?,
            })
        })
        .collect()
}

/// One `epochs.csv` row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub landmark: usize,
    pub train_mse: f64,
    pub val_mre: f64,
}

pub fn read_epochs_csv(path: &Path) -> Result<Vec<EpochRow>> {
    read_csv(path, &["epoch", "landmark", "train_mse", "val_mre"])?
        .iter()
        .map(|(at, r)| {
            Ok(EpochRow {
                epoch: field(path, *at, r, 0, "epoch")?,
                landmark: field(path, *at, r, 1, "landmark")?,
                train_mse: field(path, *at, r, 2, "train_mse")?,
                val_mre: field(path, *at, r, 3, "val_mre")?,
            })
        })
        .collect()
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, 0, e.to_string()))
}

/// `traces[landmark][iteration]` from `(iteration, landmark, value)` rows;
/// values sharing a cell are averaged.
pub fn mean_traces(rows: impl IntoIterator<Item = (usize, usize, f64)>) -> Vec<Vec<f64>> {
    let mut sum: Vec<Vec<f64>> = Vec::new();
    let mut count: Vec<Vec<usize>> = Vec::new();
    for (t, i, v) in rows {
        if sum.len() <= i {
            sum.resize(i + 1, Vec::new());
            count.resize(i + 1, Vec::new());
        }
        if sum[i].len() <= t {
            sum[i].resize(t + 1, 0.0);
            count[i].resize(t + 1, 0);
        }
        sum[i][t] += v;
        count[i][t] += 1;
    }
    sum.into_iter()
        .zip(count)
        .map(|(s, c)| s.into_iter().zip(c).map(|(s, c)| s / c.max(1) as f64).collect())
        .collect()
}
