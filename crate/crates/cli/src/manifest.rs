use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use w2s_core::enhanced::{ClassifConfig, Setting};
use w2s_core::sweep::{ReplicateOptions, SweepSpec};
use w2s_core::ExperimentConfig;

/// A fully resolved command: replaying it needs nothing but this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Invocation {
    Validate {
        config: ExperimentConfig,
    },
    Theory {
        config: ExperimentConfig,
    },
    Sweep {
        spec: SweepSpec,
    },
    Simulate {
        config: ExperimentConfig,
        options: ReplicateOptions,
        seed: u64,
    },
    Enhance {
        config: ClassifConfig,
        settings: Vec<Setting>,
        /// `None` runs the full grid with its ablations.
        cell: Option<(f64, f64)>,
        seeds: Vec<u64>,
        geometry_seed: u64,
    },
    Selfcheck {
        fault_offset: f64,
    },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Validate { .. } => "validate",
            Invocation::Theory { .. } => "theory",
            Invocation::Sweep { .. } => "sweep",
            Invocation::Simulate { .. } => "simulate",
            Invocation::Enhance { .. } => "enhance",
            Invocation::Selfcheck { .. } => "selfcheck",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub master_seed: u64,
    /// Config snapshot in the key-value file format, when one was read.
    pub config_text: Option<String>,
    pub invocation: Invocation,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<String>,
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn manifest_path(out: &Path) -> std::path::PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    s.into()
}

pub fn write(manifest: &RunManifest, out: &Path) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(std::io::Error::other)?;
    std::fs::write(manifest_path(out), text + "\n")
}

pub fn read(path: &Path) -> std::io::Result<RunManifest> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}
