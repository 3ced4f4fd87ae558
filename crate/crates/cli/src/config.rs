//! `--config` file: every flag has a key of the same name (dashes become
//! underscores). Values given on the command line win over the file, and the
//! file wins over built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub count: Option<usize>,
    pub radius: Option<String>,
    pub dist: Option<String>,
    pub gamma: Option<usize>,
    pub knn: Option<usize>,
    pub knn_interaction: Option<bool>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub dim: Option<usize>,
    pub encoder: Option<String>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub instances: Option<usize>,
    pub sizes: Option<Vec<usize>>,
    pub radius_types: Option<Vec<String>>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub eval_every: Option<usize>,
    pub aug: Option<bool>,
    pub planner: Option<String>,
    pub baselines: Option<Vec<String>>,
    pub model: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub svg: Option<PathBuf>,
    pub solver: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flag, then file, then default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_unknown_keys() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick(None::<i32>, None, 3), 3);
        let cfg: FileConfig = toml::from_str("n = 12\nsizes = [10, 20]\naug = true").unwrap();
        assert_eq!(cfg.n, Some(12));
        assert_eq!(cfg.sizes, Some(vec![10, 20]));
        assert!(toml::from_str::<FileConfig>("bogus = 1").is_err());
    }
}
