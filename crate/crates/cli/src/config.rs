//! Run configuration files. Flags given on the command line override them.

use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};
use cyclecast::pipeline::PrepareOptions;
use cyclecast::synth::WorldSpec;
use cyclecast::trainer::{HyperGrid, HyperParams};
use serde::{Deserialize, Serialize};

/// Every section is optional; missing sections take library defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub prepare: PrepareOptions,
    pub hyperparameters: HyperParams,
    pub grid: Option<HyperGrid>,
}

impl RunConfig {
    /// Reads TOML (`.toml`) or JSON (anything else).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let parsed = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(anyhow::Error::from)
        } else {
            serde_json::from_str(&text).map_err(anyhow::Error::from)
        };
        parsed.with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }
}

/// A problem with how the program was invoked; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Fails with a usage error when two of the named paths coincide.
pub fn distinct_paths(paths: &[(&str, &Path)]) -> Result<()> {
    for (i, (a, pa)) in paths.iter().enumerate() {
        for (b, pb) in &paths[i + 1..] {
            let same = pa == pb || matches!((pa.canonicalize(), pb.canonicalize()), (Ok(x), Ok(y)) if x == y);
            if same {
                return Err(UsageError(format!("--{a} and --{b} must be different paths ({})", pa.display())).into());
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_sections_parse() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("run.toml");
        std::fs::write(&t, "[world]\nn_users = 12\n\n[hyperparameters]\nhidden = 5\n").unwrap();
        let c = RunConfig::load(&t).unwrap();
        assert_eq!(c.world.n_users, 12);
        assert_eq!(c.hyperparameters.hidden, 5);
        assert_eq!(c.hyperparameters.layers, HyperParams::default().layers);
        let j = dir.path().join("run.json");
        std::fs::write(&j, r#"{"prepare": {"split_seed": 9}}"#).unwrap();
        assert_eq!(RunConfig::load(&j).unwrap().prepare.split_seed, 9);
        std::fs::write(&t, "[prepare.qc]\nmin_logs_per_user = 10\n").unwrap();
        assert_eq!(RunConfig::load(&t).unwrap().prepare.qc.min_logs_per_user, 10);
        std::fs::write(&j, r#"{"unknown": 1}"#).unwrap();
        assert!(RunConfig::load(&j).is_err());
    }

    #[test]
    fn identical_paths_are_usage_errors() {
        let p = Path::new("a/b");
        let e = distinct_paths(&[("in", p), ("out", p)]).unwrap_err();
        assert!(e.downcast_ref::<UsageError>().is_some());
        assert!(distinct_paths(&[("in", p), ("out", Path::new("a/c"))]).is_ok());
    }
}
