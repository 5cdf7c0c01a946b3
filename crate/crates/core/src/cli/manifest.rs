//! Machine-readable run manifest written by every subcommand.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::delta::{PairingReport, TargetSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_ranks: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dtype: Option<String>,
}

/// Result for one extracted layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOutcome {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub rank: usize,
    /// Preserved energy at the rank used.
    pub energy: f64,
    pub abs_error: f64,
    pub rel_error: f64,
}

/// Optimality check of one adapter layer against a fresh SVD of its delta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyCheck {
    pub name: String,
    pub rank: usize,
    /// `‖ΔW − BA‖_F²`
    pub residual_sq: f64,
    /// `Σ_{i>r} σᵢ²` from the fresh decomposition.
    pub tail_energy: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub adapter_bytes: u64,
    pub adapter_payload_bytes: u64,
    pub finetuned_bytes: u64,
    /// `finetuned_bytes / adapter_bytes`
    pub compression_ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub inputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_spec: Option<TargetSpec>,
    pub settings: RunSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairing: Option<PairingReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerOutcome>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<VerifyCheck>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub merged_layers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_report: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sizes: Option<SizeReport>,
    pub warnings: Vec<String>,
    /// Wall-clock milliseconds per phase.
    pub timings_ms: BTreeMap<String, f64>,
    pub exit_code: i32,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            ..Self::default()
        }
    }

    pub fn input(&mut self, key: &str, value: impl AsRef<Path>) {
        self.inputs
            .insert(key.to_string(), value.as_ref().display().to_string());
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        log::warn!("{msg}");
        self.warnings.push(msg);
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Accumulates named phase durations.
pub struct PhaseTimer {
    last: Instant,
}

impl PhaseTimer {
    pub fn start() -> Self {
        Self { last: Instant::now() }
    }

    pub fn lap(&mut self, manifest: &mut RunManifest, phase: &str) {
        let now = Instant::now();
        let ms = now.duration_since(self.last).as_secs_f64() * 1e3;
        *manifest.timings_ms.entry(phase.to_string()).or_default() += ms;
        self.last = now;
    }
}
