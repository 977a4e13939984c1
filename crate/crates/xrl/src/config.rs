//! Flat dotted-key run configuration.
//!
//! The config file is plain text: one `key = value` per line, `#` comments,
//! blank lines ignored. Keys are dotted paths (`train.lambda`,
//! `pgd.epsilon`). Unknown keys are rejected so typos fail loudly rather
//! than silently falling back to defaults. Command-line overrides
//! (`--train.lambda 50000`) use the same key space.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Every key the configuration understands.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "out",
    "dataset.kind",
    "dataset.images",
    "dataset.labels",
    "dataset.paths",
    "dataset.classes",
    "dataset.limit",
    "dataset.test_images",
    "dataset.test_labels",
    "dataset.test_limit",
    "dataset.per_class",
    "dataset.image_side",
    "dataset.noise",
    "model.arch",
    "model.beta",
    "train.regime",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.alpha",
    "train.lambda",
    "train.sigma_zeta",
    "pgd.epsilon",
    "pgd.steps",
    "pgd.step_size",
    "pgd.random_start",
    "pgd.objective",
    "expl.method",
    "expl.ig_steps",
    "attack.epsilon",
    "attack.iterations",
    "attack.learning_rate",
    "attack.gamma_c",
    "eval.k",
    "eval.per_cluster",
    "eval.method_label",
    "landscape.gammas",
    "landscape.directions",
    "landscape.kind",
    "checkpoint",
    "pairs",
    "report.inputs",
];

/// Parsed key/value store with typed accessors.
#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn empty() -> RunConfig {
        RunConfig::default()
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::empty();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown config key '{}'", key)));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required config key '{}'", key)))
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get(key).unwrap_or(default)
    }

    pub fn f64_of(&self, key: &str) -> Result<Option<f64>> {
        self.get(key)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Config(format!("key '{}': '{}' is not a number", key, v)))
            })
            .transpose()
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.f64_of(key)?.unwrap_or(default))
    }

    pub fn usize_of(&self, key: &str) -> Result<Option<usize>> {
        self.get(key)
            .map(|v| {
                v.parse::<usize>().map_err(|_| {
                    Error::Config(format!("key '{}': '{}' is not a nonnegative integer", key, v))
                })
            })
            .transpose()
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.usize_of(key)?.unwrap_or(default))
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        self.get(key)
            .map(|v| {
                v.parse::<u64>()
                    .map_err(|_| Error::Config(format!("key '{}': '{}' is not an integer", key, v)))
            })
            .transpose()
            .map(|o| o.unwrap_or(default))
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(Error::Config(format!(
                "key '{}': '{}' is not true/false",
                key, v
            ))),
        }
    }

    /// Comma-separated list of reals.
    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|s| {
                        s.trim().parse::<f64>().map_err(|_| {
                            Error::Config(format!("key '{}': '{}' is not a number", key, s))
                        })
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn path_of(&self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.require(key)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_defaults_and_types() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(
            &p,
            "# a comment\ntrain.lambda = 50000\npgd.epsilon = 0.3  # inline\npgd.random_start = false\nlandscape.gammas = 0, 0.5, 1.0\n",
        )
        .unwrap();
        let cfg = RunConfig::from_file(&p).unwrap();
        assert_eq!(cfg.f64_or("train.lambda", 0.0).unwrap(), 50000.0);
        assert_eq!(cfg.f64_or("pgd.epsilon", 0.1).unwrap(), 0.3);
        assert!(!cfg.bool_or("pgd.random_start", true).unwrap());
        assert_eq!(
            cfg.f64_list("landscape.gammas").unwrap().unwrap(),
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(cfg.usize_or("train.epochs", 25).unwrap(), 25);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "train.lamda = 5\n").unwrap();
        match RunConfig::from_file(&p) {
            Err(Error::Config(msg)) => assert!(msg.contains("train.lamda"), "{}", msg),
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn missing_required_key_names_the_key() {
        let cfg = RunConfig::empty();
        match cfg.require("checkpoint") {
            Err(Error::Config(msg)) => assert!(msg.contains("checkpoint"), "{}", msg),
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn bad_number_is_rejected_with_key_name() {
        let mut cfg = RunConfig::empty();
        cfg.set("train.lambda", "plenty").unwrap();
        match cfg.f64_or("train.lambda", 0.0) {
            Err(Error::Config(msg)) => assert!(msg.contains("train.lambda"), "{}", msg),
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
    }
}
