use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use stressnet::baseline::{BaselineConfig, FeatureKind};
use stressnet::dataset::{DEFAULT_TEST_INDICES, EXPERIMENT_DAYS};
use stressnet::experiment::ExperimentConfig;
use stressnet::simulator::SimulatorConfig;

const REPRO_TABLE2: &str = include_str!("../presets/repro-table2.toml");

/// Everything a run depends on. Every field has a default, so an empty file
/// is a valid config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory for models, reports and plots.
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub simulator: SimulatorConfig,
    pub experiment: ExperimentConfig,
    pub baseline: BaselineRun,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            simulator: SimulatorConfig::default(),
            experiment: ExperimentConfig::default(),
            baseline: BaselineRun::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub test_indices: Vec<u8>,
    /// Length of the experiment; later days are ignored.
    pub days: u32,
    /// Generate the dataset from `[simulator]` when `root` does not exist.
    pub simulate_if_missing: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            root: PathBuf::from("data"),
            test_indices: DEFAULT_TEST_INDICES.to_vec(),
            days: EXPERIMENT_DAYS,
            simulate_if_missing: false,
        }
    }
}

/// Baseline settings plus the simulated noise sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineRun {
    pub feature_kind: FeatureKind,
    pub erosion_radius: u32,
    pub ambient_correct: bool,
    pub exclude_last_day: bool,
    pub sequence_days: usize,
    /// Sensor noise levels for the simulated sweep.
    pub noise_sweep: Vec<f64>,
}

impl Default for BaselineRun {
    fn default() -> Self {
        let c = BaselineConfig::default();
        BaselineRun {
            feature_kind: c.feature_kind,
            erosion_radius: c.erosion_radius,
            ambient_correct: c.ambient_correct,
            exclude_last_day: c.exclude_last_day,
            sequence_days: c.sequence_days,
            noise_sweep: vec![0.0, 0.5, 1.0, 1.5, 2.0],
        }
    }
}

impl BaselineRun {
    pub fn config(&self, feature_kind: FeatureKind) -> BaselineConfig {
        BaselineConfig {
            feature_kind,
            erosion_radius: self.erosion_radius,
            ambient_correct: self.ambient_correct,
            exclude_last_day: self.exclude_last_day,
            sequence_days: self.sequence_days,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn preset(name: &str) -> anyhow::Result<Self> {
        match name {
            "repro-table2" => Self::parse(REPRO_TABLE2),
            other => bail!("unknown preset {other:?} (available: repro-table2)"),
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.simulator.validate()?;
        let mut exp = self.experiment.clone();
        exp.seed = self.seed;
        exp.validate()?;
        if self.baseline.sequence_days == 0 {
            bail!("baseline sequence_days must be at least 1");
        }
        if self
            .baseline
            .noise_sweep
            .iter()
            .any(|s| !(*s >= 0.0 && s.is_finite()))
        {
            bail!("noise_sweep values must be finite and non-negative");
        }
        Ok(())
    }

    /// The experiment settings with the run seed applied.
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: self.seed,
            ..self.experiment.clone()
        }
    }

    /// The simulator settings with the run seed applied.
    pub fn simulator(&self) -> SimulatorConfig {
        SimulatorConfig {
            seed: self.seed,
            ..self.simulator.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sede = 3").is_err());
        assert!(RunConfig::parse("[simulator]\nplants = 3").is_err());
        assert!(RunConfig::parse("[baseline]\nfeature = \"x\"").is_err());
    }

    #[test]
    fn preset_parses() {
        let cfg = RunConfig::preset("repro-table2").unwrap();
        assert!(cfg.dataset.simulate_if_missing);
        assert_eq!(cfg.experiment.combos.len(), 8);
        assert!(RunConfig::preset("nope").is_err());
    }

    #[test]
    fn default_round_trips() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), RunConfig::default());
    }
}
