//! Run manifests: enough provenance next to the CSVs to reproduce them.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::config::{config_hash, ExperimentConfig};
use crate::LabError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub created_unix: u64,
    /// Derived per-run RNG seeds, in run order.
    pub run_seeds: Vec<u64>,
    /// Emitted files, relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig, run_seeds: Vec<u64>, outputs: Vec<String>) -> Self {
        Self {
            config_hash: config_hash(config),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            run_seeds,
            outputs,
        }
    }

    pub fn render(&self) -> String {
        let seeds = self
            .run_seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(", ");
        let mut out = String::new();
        out.push_str(&format!("config_hash = {}\n", self.config_hash));
        out.push_str(&format!("tool_version = {}\n", self.tool_version));
        out.push_str(&format!("created_unix = {}\n", self.created_unix));
        out.push_str(&format!("run_seeds = [{seeds}]\n"));
        for file in &self.outputs {
            out.push_str(&format!("output = {file}\n"));
        }
        out
    }

    /// Writes `manifest.txt` into `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, LabError> {
        let path = dir.join("manifest.txt");
        let mut file = File::create(&path).map_err(|e| LabError::io(&path, e))?;
        file.write_all(self.render().as_bytes())
            .map_err(|e| LabError::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    #[test]
    fn manifest_lists_every_output_and_the_config_hash() {
        let cfg = parse_config("schemes = [dtfixup]\ndepths = [2]\n").unwrap();
        let manifest = RunManifest::new(&cfg, vec![7, 8], vec!["diagnostics.csv".into()]);
        let text = manifest.render();
        assert!(text.contains(&format!("config_hash = {}", config_hash(&cfg))));
        assert!(text.contains("run_seeds = [7, 8]"));
        assert!(text.contains("output = diagnostics.csv"));
    }
}
