use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use trackcore::Config;

/// Written next to the outputs of every command. Artifact paths are
/// relative to the output directory, so two runs differ only in
/// `wall_clock_seconds`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Inputs as given on the command line.
    pub inputs: Vec<String>,
    pub config: Option<Config>,
    pub seed: Option<u64>,
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
    pub version: &'static str,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config: Option<&Config>, seed: Option<u64>) -> Self {
        Self {
            command: command.into(),
            inputs: Vec::new(),
            config: config.cloned(),
            seed,
            artifacts: Vec::new(),
            wall_clock_seconds: 0.0,
            version: env!("CARGO_PKG_VERSION"),
        }
    }

    pub fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.display().to_string());
        self
    }

    /// Writes `name` into `dir` and records it.
    pub fn write(&mut self, dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> std::io::Result<()> {
        std::fs::write(dir.join(name), contents)?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    pub fn finish(mut self, dir: &Path, started: Instant) -> std::io::Result<()> {
        self.wall_clock_seconds = started.elapsed().as_secs_f64();
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(dir.join("manifest.json"), json + "\n")
    }
}
