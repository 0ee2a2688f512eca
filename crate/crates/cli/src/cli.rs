use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use replaylens::lens::Normalization;
use replaylens::model::TuneMode;
use replaylens::replay::{Polarity, UpdateScope};
use replaylens::studies::{Donor, SpliceMode};

use crate::commands;
use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "replaylens", version, about = "Logit-lens analysis and activation replay experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every experiment command. Each mirrors a config key.
#[derive(Debug, Args)]
pub struct Common {
    /// JSON run config; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// `seed`
    #[arg(long, env = "REPLAYLENS_SEED")]
    pub seed: Option<u64>,
    /// `pair_dir`: directory with base.ckpt and tuned.ckpt.
    #[arg(long)]
    pub pair: Option<PathBuf>,
    /// `dataset`: JSONL tasks; defaults to the held-out suite.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// `dataset_size`
    #[arg(long)]
    pub dataset_size: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PolarityArg {
    Low,
    High,
}

impl From<PolarityArg> for Polarity {
    fn from(p: PolarityArg) -> Self {
        match p {
            PolarityArg::Low => Polarity::Low,
            PolarityArg::High => Polarity::High,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScopeArg {
    Masked,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum NormalizationArg {
    Layerwise,
    Global,
    None,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DonorArg {
    Base,
    Tuned,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SpliceArg {
    Layer0,
    AllLayers,
}

/// `replay.*` keys.
#[derive(Debug, Args)]
pub struct ReplayFlags {
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// `replay.steps`
    #[arg(long)]
    pub replay_steps: Option<usize>,
    #[arg(long, value_enum)]
    pub polarity: Option<PolarityArg>,
    #[arg(long, value_enum)]
    pub update_scope: Option<ScopeArg>,
}

impl ReplayFlags {
    fn apply(&self, c: &mut RunConfig) {
        let r = &mut c.replay;
        set(&mut r.tau, self.tau);
        set(&mut r.alpha, self.alpha);
        set(&mut r.steps, self.replay_steps);
        set(&mut r.polarity, self.polarity.map(Into::into));
        set(
            &mut r.update_scope,
            self.update_scope.map(|s| match s {
                ScopeArg::Masked => UpdateScope::Masked,
                ScopeArg::All => UpdateScope::All,
            }),
        );
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the base model and derive the tuned model.
    TrainPair {
        #[command(flatten)]
        common: Common,
        /// `train.steps`
        #[arg(long)]
        train_steps: Option<usize>,
        /// `tune.scale` for seeded corruption.
        #[arg(long)]
        corruption_scale: Option<f64>,
    },
    /// Entropy-percentile KL heatmaps and top-1 shift rates.
    LensReport {
        #[command(flatten)]
        common: Common,
        /// `heatmap.bins`
        #[arg(long)]
        bins: Option<usize>,
        /// `heatmap.normalization`
        #[arg(long, value_enum)]
        normalization: Option<NormalizationArg>,
    },
    /// Greedy accuracy with and without replay.
    ReplayEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        replay: ReplayFlags,
    },
    /// Accuracy after splicing base activations at low- or high-entropy
    /// positions.
    Intervene {
        #[command(flatten)]
        common: Common,
        /// `intervention.tau`
        #[arg(long)]
        tau: Option<f64>,
        /// `intervention.donor`
        #[arg(long, value_enum)]
        donor: Option<DonorArg>,
        /// `intervention.splice`
        #[arg(long, value_enum)]
        splice: Option<SpliceArg>,
    },
    /// Noise sweep: KL shifts against probe-response perplexities.
    Perturb {
        #[command(flatten)]
        common: Common,
        /// `perturbation.scales`, comma separated.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
        /// `perturbation.seeds`, comma separated.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// `perturbation.task_index`
        #[arg(long)]
        task_index: Option<usize>,
    },
    /// Pass@K curves with and without replay.
    Passk {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        replay: ReplayFlags,
        /// `passk.k`
        #[arg(long)]
        k: Option<usize>,
        /// `passk.temperature`
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Replay accuracy over a tau × alpha grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// `ablation.taus`, comma separated.
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        /// `ablation.alphas`, comma separated.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
    },
    /// Re-execute the command a manifest records and verify its outputs.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        set(&mut c.seed, self.seed);
        if self.pair.is_some() {
            c.pair_dir = self.pair.clone();
        }
        if self.dataset.is_some() {
            c.dataset = self.dataset.clone();
        }
        set(&mut c.dataset_size, self.dataset_size);
        Ok(c)
    }
}

impl Cli {
    /// Runs the parsed command and returns a one-line JSON summary.
    pub fn execute(&self) -> Result<String> {
        let (name, mut config, out) = match &self.command {
            Command::Rerun { manifest, out } => {
                let m = commands::rerun(manifest, out)?;
                return Ok(serde_json::json!({
                    "reproduced": m.outputs.len(),
                    "command": m.command,
                    "out": out,
                })
                .to_string());
            }
            Command::TrainPair {
                common,
                train_steps,
                corruption_scale,
            } => {
                let mut c = common.resolve()?;
                set(&mut c.train.steps, *train_steps);
                if let Some(s) = corruption_scale {
                    match &mut c.tune {
                        TuneMode::SeededCorruption { scale, .. } => *scale = *s,
                        TuneMode::ContinuedTraining { .. } => {
                            return Err(CliError::Config(
                                "--corruption-scale needs tune.mode = seeded_corruption".into(),
                            ))
                        }
                    }
                }
                ("train-pair", c, &common.out)
            }
            Command::LensReport {
                common,
                bins,
                normalization,
            } => {
                let mut c = common.resolve()?;
                set(&mut c.heatmap.bins, *bins);
                set(
                    &mut c.heatmap.normalization,
                    normalization.map(|n| match n {
                        NormalizationArg::Layerwise => Normalization::Layerwise,
                        NormalizationArg::Global => Normalization::Global,
                        NormalizationArg::None => Normalization::None,
                    }),
                );
                ("lens-report", c, &common.out)
            }
            Command::ReplayEval { common, replay } => {
                let mut c = common.resolve()?;
                replay.apply(&mut c);
                ("replay-eval", c, &common.out)
            }
            Command::Intervene {
                common,
                tau,
                donor,
                splice,
            } => {
                let mut c = common.resolve()?;
                set(&mut c.intervention.tau, *tau);
                set(
                    &mut c.intervention.donor,
                    donor.map(|d| match d {
                        DonorArg::Base => Donor::Base,
                        DonorArg::Tuned => Donor::Tuned,
                    }),
                );
                set(
                    &mut c.intervention.splice,
                    splice.map(|s| match s {
                        SpliceArg::Layer0 => SpliceMode::Layer0,
                        SpliceArg::AllLayers => SpliceMode::AllLayers,
                    }),
                );
                ("intervene", c, &common.out)
            }
            Command::Perturb {
                common,
                scales,
                seeds,
                task_index,
            } => {
                let mut c = common.resolve()?;
                set(&mut c.perturbation.scales, scales.clone());
                set(&mut c.perturbation.seeds, seeds.clone());
                if task_index.is_some() {
                    c.perturbation.task_index = *task_index;
                }
                ("perturb", c, &common.out)
            }
            Command::Passk {
                common,
                replay,
                k,
                temperature,
            } => {
                let mut c = common.resolve()?;
                replay.apply(&mut c);
                set(&mut c.passk.k, *k);
                set(&mut c.passk.temperature, *temperature);
                ("passk", c, &common.out)
            }
            Command::Ablate { common, taus, alphas } => {
                let mut c = common.resolve()?;
                set(&mut c.ablation.taus, taus.clone());
                set(&mut c.ablation.alphas, alphas.clone());
                ("ablate", c, &common.out)
            }
        };
        config.absolutize()?;
        let m = commands::run(name, &config, out)?;
        Ok(serde_json::json!({"command": name, "out": out, "summary": m.summary}).to_string())
    }
}
