//! Configuration, orchestration and reporting.

pub mod bench;
pub mod config;
pub mod keyrate;
pub mod output;
pub mod simulate;

use serde_json::json;
use thiserror::Error;

use crate::feedback::FeedbackError;
use crate::finite_key::FiniteKeyError;
use crate::link::LinkError;
use crate::sync::SyncError;

pub use bench::{
    feedback_bench, run_sync_trial, sync_bench, sync_trials, FeedbackBenchReport, FeedbackBenchSettings,
    SyncBenchRow, SyncBenchSettings, SyncTrial, TrialSpec,
};
pub use config::{RunConfig, RunSettings};
pub use keyrate::{cmd_keyrate, load_counts_file, CountsFile, ExpectedResults, KeyRateOverrides};
pub use simulate::{cmd_simulate, replay, run_simulation, BlockRecord, RunSummary, SyncStatus, Timing};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("{path}: {}", problems.join("; "))]
    Schema { path: String, problems: Vec<String> },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("sync failed in block {block}: {source}")]
    Sync { block: u64, source: SyncError },
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error(transparent)]
    FiniteKey(#[from] FiniteKeyError),
}

impl HarnessError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config { .. } => "config",
            Self::Schema { .. } => "schema",
            Self::Io { .. } => "io",
            Self::Link(_) => "link",
            Self::Sync { .. } => "sync",
            Self::Feedback(_) => "feedback",
            Self::FiniteKey(_) => "finite_key",
        }
    }

    /// Machine-readable form for the command line.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = json!({ "error": self.kind(), "message": self.to_string() });
        match self {
            Self::Schema { path, problems } => {
                v["path"] = json!(path);
                v["problems"] = json!(problems);
            }
            Self::Config { path, .. } | Self::Io { path, .. } => v["path"] = json!(path),
            Self::Sync { block, .. } => v["block"] = json!(block),
            _ => {}
        }
        v
    }

    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Self::Io { path: path.display().to_string(), message: e.to_string() }
    }
}
