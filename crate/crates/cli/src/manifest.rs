use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const TOOL_VERSION: &str = concat!("eaaw ", env!("CARGO_PKG_VERSION"));

/// What one command consumed and produced. Written next to its outputs as
/// `manifest_<command>.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: Vec<(String, PathBuf)>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.to_owned(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            artifacts: Vec::new(),
        }
    }

    pub fn artifact(mut self, name: &str, path: &Path) -> Self {
        self.artifacts.push((name.to_owned(), path.to_path_buf()));
        self
    }

    /// Paths inside `out` are written relative to it.
    pub fn render(&self, out: &Path) -> String {
        let mut s = format!(
            "tool={TOOL_VERSION}\ncommand={}\nconfig_hash={}\nseed={}\n",
            self.command, self.config_hash, self.seed
        );
        for (name, p) in &self.artifacts {
            let shown = p.strip_prefix(out).unwrap_or(p);
            s.push_str(&format!("artifact.{name}={}\n", shown.display()));
        }
        s
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = out.join(format!("manifest_{}.txt", self.command));
        std::fs::write(&path, self.render(out)).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_relative_artifacts() {
        let cfg = ExperimentConfig::default();
        let m = RunManifest::new("train", &cfg)
            .artifact("model", Path::new("/r/out/model.bin"))
            .artifact("data", Path::new("/elsewhere/train.bin"));
        let text = m.render(Path::new("/r/out"));
        assert!(text.contains("artifact.model=model.bin\n"));
        assert!(text.contains("artifact.data=/elsewhere/train.bin\n"));
        assert!(text.contains(&format!("config_hash={}\n", cfg.hash())));
    }
}
