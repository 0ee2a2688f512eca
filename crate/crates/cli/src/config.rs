//! The single JSON document that describes a run.
//!
//! Precedence, lowest to highest: built-in defaults, the `--config` file,
//! the `REPLAYLENS_SEED` environment variable (seed only), command-line
//! flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use replaylens::lens::HeatmapSpec;
use replaylens::model::{ModelConfig, TaskSpec, TrainConfig, TuneMode};
use replaylens::replay::ReplayConfig;
use replaylens::studies::InterventionSpec;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationParams {
    pub scales: Vec<f64>,
    pub seeds: Vec<u64>,
    pub tau: f64,
    /// Dataset index of the probed task; `None` picks the first task the
    /// tuned model answers correctly.
    pub task_index: Option<usize>,
}

impl Default for PerturbationParams {
    fn default() -> Self {
        Self {
            scales: (1..=20).map(|i| 0.5 * i as f64 / 20.0).collect(),
            seeds: (0..5).collect(),
            tau: 0.4,
            task_index: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PassKParams {
    pub k: usize,
    pub temperature: f64,
}

impl Default for PassKParams {
    fn default() -> Self {
        Self { k: 8, temperature: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationParams {
    pub taus: Vec<f64>,
    pub alphas: Vec<f64>,
}

impl Default for AblationParams {
    fn default() -> Self {
        Self {
            taus: vec![0.2, 0.4, 0.6, 0.8],
            alphas: vec![0.0, 10.0, 20.0, 40.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Training seed, and the root of every sampling seed.
    pub seed: u64,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub tune: TuneMode,
    pub replay: ReplayConfig,
    pub heatmap: HeatmapSpec,
    pub intervention: InterventionSpec,
    pub perturbation: PerturbationParams,
    pub passk: PassKParams,
    pub ablation: AblationParams,
    /// Directory holding `base.ckpt` and `tuned.ckpt`.
    pub pair_dir: Option<PathBuf>,
    /// JSONL task file; `None` means the canonical held-out suite.
    pub dataset: Option<PathBuf>,
    /// Size of the held-out suite when no dataset file is given.
    pub dataset_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            model: ModelConfig::default(),
            task: TaskSpec::default(),
            train: TrainConfig::default(),
            tune: TuneMode::SeededCorruption { scale: 0.1, seed: 7 },
            replay: ReplayConfig::default(),
            heatmap: HeatmapSpec::default(),
            intervention: InterventionSpec::default(),
            perturbation: PerturbationParams::default(),
            passk: PassKParams::default(),
            ablation: AblationParams::default(),
            pair_dir: None,
            dataset: None,
            dataset_size: 200,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("config serializes");
        bytes.push(b'\n');
        bytes
    }

    /// Makes input paths absolute so a manifest can be replayed from any
    /// working directory.
    pub fn absolutize(&mut self) -> Result<()> {
        for p in [&mut self.pair_dir, &mut self.dataset].into_iter().flatten() {
            if p.is_relative() {
                let cwd = std::env::current_dir().map_err(|e| CliError::io(Path::new("."), e))?;
                *p = cwd.join(&*p);
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.model.validate()?;
        self.task.validate()?;
        self.replay.validate(self.model.layers)?;
        if self.dataset.is_none() && self.dataset_size == 0 {
            return bad("dataset_size must be positive".into());
        }
        if self.passk.k == 0 || self.passk.temperature.is_nan() || self.passk.temperature <= 0.0 {
            return bad(format!(
                "passk needs k >= 1 and a positive temperature, got k={} temperature={}",
                self.passk.k, self.passk.temperature
            ));
        }
        let p = &self.perturbation;
        if p.scales.is_empty() || p.seeds.is_empty() {
            return bad("perturbation needs at least one scale and one seed".into());
        }
        if !(p.tau > 0.0 && p.tau <= 1.0) {
            return bad(format!("perturbation tau must lie in (0, 1], got {}", p.tau));
        }
        if self.ablation.taus.is_empty() || self.ablation.alphas.is_empty() {
            return bad("ablation needs at least one tau and one alpha".into());
        }
        Ok(())
    }
}
