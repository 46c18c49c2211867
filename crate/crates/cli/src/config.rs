//! TOML run configuration and the settings banner.

use std::fs;
use std::path::{Path, PathBuf};

use hallulab_core::losses::LossConfig;
use hallulab_core::probes::ProbeConfig;
use hallulab_core::trainer::ScheduleConfig;
use hallulab_core::{LabError, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub synth: SynthSection,
    pub gen: GenSection,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainSection,
    pub probe: ProbeConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub pairs: Option<usize>,
    pub dim: Option<usize>,
    pub noise: Option<f64>,
    pub classes: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub mode: Option<String>,
    pub per_image: Option<usize>,
    pub threshold: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub hidden: Option<usize>,
    pub data: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        require_file(path)?;
        toml::from_str(&fs::read_to_string(path)?)
            .map_err(|e| LabError::InvalidInput(format!("config {}: {}", path.display(), e.message())))
    }
}

pub fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(LabError::InvalidInput(format!("no such file: {}", path.display())))
    }
}

/// Effective settings printed to stderr before a command runs. Invented
/// defaults that were not overridden carry an `(assumed)` marker.
#[derive(Debug, Default)]
pub struct Banner {
    lines: Vec<String>,
}

impl Banner {
    pub fn sourced(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.lines.push(format!("  {key} = {}", value.to_string()));
        self
    }

    pub fn invented<T: PartialEq + ToString>(&mut self, key: &str, value: T, default: T) -> &mut Self {
        let marker = if value == default { " (assumed)" } else { "" };
        self.lines.push(format!("  {key} = {}{marker}", value.to_string()));
        self
    }

    pub fn print(&self, command: &str) {
        eprintln!("hallulab {command}: settings");
        for l in &self.lines {
            eprintln!("{l}");
        }
    }
}
