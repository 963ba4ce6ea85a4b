//! Run configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bench::{FeedbackBenchSettings, SyncBenchSettings};
use super::HarnessError;
use crate::feedback::FeedbackConfig;
use crate::finite_key::SecurityParams;
use crate::link::{ChannelDriftModel, LinkConfig};
use crate::sync::{SyncCodeConfig, SyncParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    pub seed: u64,
    /// Simulated seconds per acquisition block.
    #[serde(default = "default_block")]
    pub block_duration: f64,
    pub total_duration: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Stop after the block in which the Z-basis key count reaches this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_n_z: Option<u64>,
    /// Write every detection to this event dump.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump_events: Option<PathBuf>,
}

fn default_block() -> f64 {
    1.0
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSettings,
    pub link: LinkConfig,
    #[serde(default)]
    pub sync: SyncCodeConfig,
    #[serde(default)]
    pub sync_algorithm: SyncParams,
    #[serde(default)]
    pub feedback: FeedbackConfig,
    #[serde(default)]
    pub security: SecurityParams,
    #[serde(default)]
    pub drift: ChannelDriftModel,
    #[serde(default)]
    pub sync_bench: SyncBenchSettings,
    #[serde(default)]
    pub feedback_bench: FeedbackBenchSettings,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, HarnessError> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config { path: origin.into(), message: e.to_string() })?;
        config.validate(origin)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Checks every section and reports all problems at once, each prefixed
    /// with its field path.
    pub fn validate(&self, origin: &str) -> Result<(), HarnessError> {
        let mut problems = Vec::new();
        let run = &self.run;
        if !(run.block_duration > 0.0 && run.block_duration.is_finite()) {
            problems.push(format!("run.block_duration must be positive, got {}", run.block_duration));
        }
        if !(run.total_duration.is_finite() && run.total_duration >= run.block_duration) {
            problems.push(format!(
                "run.total_duration ({}) must be at least run.block_duration ({})",
                run.total_duration, run.block_duration
            ));
        }
        if let Err(e) = self.link.validate() {
            problems.push(format!("link: {e}"));
        }
        if let Err(e) = self.feedback.validate() {
            problems.push(format!("feedback: {e}"));
        }
        if let Err(e) = self.security.validate() {
            problems.push(format!("security: {e}"));
        }
        if let Err(e) = self.drift.validate() {
            problems.push(format!("drift: {e}"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Schema { path: origin.into(), problems })
        }
    }
}
