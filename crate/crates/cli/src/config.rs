//! Run configuration: an optional JSON file supplies defaults, explicit
//! command-line flags win.

use std::path::PathBuf;

use anyhow::Context;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub delimiter: Option<String>,
    pub columns: Option<String>,
    pub fractions: Option<[f64; 3]>,
    pub min_user_events: Option<usize>,
    pub min_item_events: Option<usize>,
    pub max_cluster_size: Option<usize>,
    pub top_level_max: Option<usize>,
    pub em_restarts: Option<usize>,
    pub em_tol: Option<f64>,
    pub em_max_iters: Option<usize>,
    pub level: Option<u32>,
    pub history: Option<String>,
    pub top: Option<Vec<usize>>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: Option<&PathBuf>) -> anyhow::Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }
}

/// flag > config > default.
pub fn pick<T: Clone>(flag: Option<T>, config: Option<T>, default: T) -> T {
    flag.or(config).unwrap_or(default)
}

/// flag > config, required.
pub fn require<T: Clone>(flag: Option<T>, config: Option<T>, name: &str) -> anyhow::Result<T> {
    flag.or(config)
        .ok_or_else(|| anyhow::anyhow!("missing required setting `{name}` (flag or config file)"))
}
