//! Experiment configuration: a flat JSON object merged from a config file,
//! the `AHL_SEED` environment variable and command-line flags, in that
//! order of increasing precedence.

use std::path::{Path, PathBuf};

use ahl_core::laoml::TrainConfig;
use ahl_core::{Error, Result};
use serde_json::{Map, Value};

/// Keys that belong to the experiment rather than to a single run.
const EXPERIMENT_KEYS: [&str; 5] = ["data", "out", "threads", "seeds", "plot"];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: usize,
    pub seeds: Vec<u64>,
    pub plot: bool,
}

pub fn read_config_file(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Error::Config(format!("{}: config must be a JSON object", path.display()))),
        Err(e) => Err(Error::Format {
            file: path.to_path_buf(),
            offset: 0,
            message: e.to_string(),
        }),
    }
}

/// Merges `layers` left to right (later wins) and splits the result.
pub fn resolve(layers: &[Map<String, Value>]) -> Result<ExperimentConfig> {
    let mut merged = Map::new();
    for layer in layers {
        for (k, v) in layer {
            merged.insert(k.clone(), v.clone());
        }
    }
    let mut take = |k: &str| merged.remove(k);
    let bad = |k: &str, e: serde_json::Error| Error::Config(format!("{k}: {e}"));
    let data = take("data")
        .map(serde_json::from_value::<PathBuf>)
        .transpose()
        .map_err(|e| bad("data", e))?;
    let out = take("out")
        .map(serde_json::from_value::<PathBuf>)
        .transpose()
        .map_err(|e| bad("out", e))?;
    let threads = take("threads")
        .map(serde_json::from_value::<usize>)
        .transpose()
        .map_err(|e| bad("threads", e))?
        .unwrap_or(1);
    let seeds = take("seeds")
        .map(serde_json::from_value::<Vec<u64>>)
        .transpose()
        .map_err(|e| bad("seeds", e))?;
    let plot = take("plot")
        .map(serde_json::from_value::<bool>)
        .transpose()
        .map_err(|e| bad("plot", e))?
        .unwrap_or(false);
    debug_assert!(EXPERIMENT_KEYS.iter().all(|k| !merged.contains_key(*k)));
    let train: TrainConfig =
        serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(e.to_string()))?;
    if threads == 0 {
        return Err(Error::Config("threads must be at least 1".into()));
    }
    let seeds = match seeds {
        Some(s) if s.is_empty() => return Err(Error::Config("seeds must not be empty".into())),
        Some(s) => s,
        None => vec![train.seed],
    };
    Ok(ExperimentConfig {
        train,
        data,
        out,
        threads,
        seeds,
        plot,
    })
}

/// `AHL_SEED` as a config layer; it replaces both the seed and any seed list.
pub fn env_layer() -> Result<Map<String, Value>> {
    let mut m = Map::new();
    if let Ok(s) = std::env::var("AHL_SEED") {
        let seed: u64 = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("AHL_SEED must be an unsigned integer, got {s:?}")))?;
        m.insert("seed".into(), seed.into());
        m.insert("seeds".into(), vec![seed].into());
    }
    Ok(m)
}

/// The per-run config echo: the resolved run config plus the dataset path.
pub fn echo(train: &TrainConfig, data: &Path, plot: bool) -> Value {
    let mut v = serde_json::to_value(train.resolved()).expect("config serialises");
    let m = v.as_object_mut().expect("config is an object");
    m.insert("data".into(), Value::String(data.display().to_string()));
    m.insert("plot".into(), Value::Bool(plot));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn layer(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn later_layers_win() {
        let c = resolve(&[
            layer(json!({"seed": 1, "samples": 3, "data": "d"})),
            layer(json!({"seed": 2})),
            layer(json!({"seed": 3, "threads": 4})),
        ])
        .unwrap();
        assert_eq!(c.train.seed, 3);
        assert_eq!(c.train.samples, 3);
        assert_eq!(c.threads, 4);
        assert_eq!(c.seeds, vec![3]);
        assert_eq!(c.data, Some(PathBuf::from("d")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(resolve(&[layer(json!({"smaples": 3}))]), Err(Error::Config(_))));
        assert!(matches!(resolve(&[layer(json!({"threads": 0}))]), Err(Error::Config(_))));
    }

    #[test]
    fn echo_resolves_to_the_same_config() {
        let t = TrainConfig {
            epochs: 100,
            ..TrainConfig::default()
        };
        let e = echo(&t, Path::new("data/x"), false);
        let back = resolve(&[layer(e)]).unwrap();
        assert_eq!(back.train, t.resolved());
        assert_eq!(back.data, Some(PathBuf::from("data/x")));
    }
}
