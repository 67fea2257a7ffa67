use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{Checkpoint, LossRecord, TrainConfig};
use crate::error::Result;

/// Record of one invocation. Everything except `created_unix` is a pure
/// function of the inputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: Option<TrainConfig>,
    pub losses: Vec<LossRecord>,
    pub metrics: BTreeMap<String, f64>,
    pub checksums: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub created_unix: u64,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, seed: u64) -> Self {
        let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Self { command: command.into(), seed, created_unix, ..Default::default() }
    }

    pub fn with_checkpoint(mut self, ck: &Checkpoint) -> Self {
        self.config = Some(ck.config.clone());
        self.losses = ck.losses.clone();
        self.checksums = ck.checksums.clone();
        self
    }

    pub fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}
