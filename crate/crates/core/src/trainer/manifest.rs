use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::RawConfig;
use super::GridRecord;
use crate::error::Result;

/// Reproducibility record for one run directory.
///
/// Grid records are only ever appended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub started_unix_s: f64,
    pub finished_unix_s: Option<f64>,
    pub status: String,
    pub grids: Vec<GridRecord>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn new(command: &str, raw: &RawConfig, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            code_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
            seed,
            config: raw.entries().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            started_unix_s: now(),
            finished_unix_s: None,
            status: "running".to_string(),
            grids: Vec::new(),
        }
    }

    pub fn record_grid(&mut self, rec: GridRecord) {
        self.grids.push(rec);
    }

    pub fn finish(&mut self, status: &str) {
        self.status = status.to_string();
        self.finished_unix_s = Some(now());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.partial");
        fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let raw = RawConfig::default().with("seed", 7).unwrap();
        let mut m = RunManifest::new("train", &raw, 7);
        m.record_grid(GridRecord {
            step: 0,
            segments: 12,
            lambda: 0.64,
            clamp_floor: 3,
            clamp_negative: 1,
            clamp_ceiling: 0,
        });
        m.finish("ok");
        m.write(&path).unwrap();
        let back = RunManifest::read(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.config["seed"], "7");
        assert_eq!(back.config.len(), super::super::config::CONFIG_KEYS.len());
    }
}
