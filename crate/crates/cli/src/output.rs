use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::{Common, Failure};

/// A report body with the provenance every output file carries.
#[derive(Debug, Serialize)]
pub struct Stamped<'a, T: Serialize> {
    pub config_hash: &'a str,
    pub seed: u64,
    #[serde(flatten)]
    pub body: T,
}

pub fn out_dir(common: &Common, cfg: Option<&ExperimentConfig>) -> Result<PathBuf, Failure> {
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)
        .map_err(|e| Failure::config(format!("output directory {} is not writable: {e}", dir.display())))?;
    Ok(dir)
}

pub struct Writer {
    dir: PathBuf,
    written: Vec<String>,
}

impl Writer {
    pub fn new(dir: PathBuf) -> Self {
        Writer { dir, written: Vec::new() }
    }

    pub fn text(&mut self, name: &str, text: &str) -> Result<(), Failure> {
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(|e| Failure::runtime(format!("writing {}: {e}", path.display())))?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let mut text =
            serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(format!("serialising {name}: {e}")))?;
        text.push('\n');
        self.text(name, &text)
    }

    /// Run metadata that is allowed to change between identical runs.
    pub fn sidecar(self, command: &str, config_hash: &str, seed: u64) -> Result<(), Failure> {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let meta = serde_json::json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config_hash": config_hash,
            "seed": seed,
            "unix_time": now,
            "outputs": self.written,
        });
        let path = self.dir.join(format!("{command}.meta.json"));
        fs::write(&path, format!("{meta:#}\n")).map_err(|e| Failure::runtime(format!("writing {}: {e}", path.display())))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

pub fn display(p: &Path) -> String {
    p.display().to_string()
}
