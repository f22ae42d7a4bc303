//! Run configuration: a single JSON document wiring datasets, the engine,
//! the class-introduction schedule, and the simulator together.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dpvae::engine::{EngineConfig, ScheduleStep};
use dpvae::simulator::{BuildingSpec, DamageScenario};

/// Everything a command might need; unknown fields are rejected so typos in
/// config files fail loudly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset stem: `<stem>.bin` holds the matrix, `<stem>.json` the
    /// descriptor.
    pub dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Master seed; offsets per repeat. Also seeds the engine RNG unless the
    /// engine block overrides it.
    pub seed: u64,
    pub repeats: usize,
    pub engine: EngineConfig,
    /// Class-introduction schedule; empty means a static run over all
    /// classes present in the dataset.
    pub schedule: Vec<ScheduleStep>,
    /// Epoch budget for scheduled runs (defaults to `engine.epochs`).
    pub total_epochs: Option<usize>,
    pub simulate: SimulateConfig,
    /// Concentration values swept by the sensitivity command.
    pub alphas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out_dir: PathBuf::from("out"),
            seed: 1,
            repeats: 1,
            engine: EngineConfig::default(),
            schedule: Vec::new(),
            total_epochs: None,
            simulate: SimulateConfig::default(),
            alphas: vec![0.1, 1.0, 10.0, 50.0, 100.0],
        }
    }
}

/// Dataset generation setup: the structure, the damage scenarios, the
/// excitation, and the feature extraction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub healthy_samples: usize,
    pub damaged_samples: usize,
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub excitation_psd: f64,
    /// One-sided convention scale for the discrete noise variance.
    pub psd_scale: f64,
    pub snr_db: Option<f64>,
    pub segment: usize,
    pub overlap: f64,
    pub band_hz: (f64, f64),
    /// Defaults to the 8-story configuration.
    pub building: Option<BuildingSpec>,
    /// Defaults to the standard eight scenarios at the configured counts.
    pub scenarios: Option<Vec<DamageScenario>>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            healthy_samples: 300,
            damaged_samples: 100,
            duration_s: 60.0,
            sample_rate_hz: 50.0,
            excitation_psd: 0.5,
            psd_scale: 0.5,
            snr_db: Some(20.0),
            segment: 512,
            overlap: 0.5,
            band_hz: (0.5, 16.0),
            building: None,
            scenarios: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text =
            std::fs::read_to_string(path).map_err(|e| format!("cannot read {path:?}: {e}"))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| format!("config {path:?}: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.engine.validate().map_err(|e| e.to_string())?;
        if self.repeats == 0 {
            return Err("repeats must be at least 1".into());
        }
        if !self.schedule.is_empty() {
            if self.schedule[0].epoch != 0 {
                return Err("schedule must start at epoch 0".into());
            }
            if self.schedule.windows(2).any(|w| w[1].epoch <= w[0].epoch) {
                return Err("schedule epochs must be strictly increasing".into());
            }
        }
        if self.alphas.iter().any(|&a| !(a > 0.0)) {
            return Err("alphas must be positive".into());
        }
        Ok(())
    }

    /// Stable fingerprint of the configuration, embedded in every emitted
    /// table. Path fields are excluded so relocating inputs or outputs does
    /// not change the fingerprint.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.dataset = None;
        canonical.out_dir = PathBuf::new();
        let text = serde_json::to_string(&canonical).unwrap_or_default();
        format!("{:08x}", dpvae::engine::crc32(text.as_bytes()))
    }
}
