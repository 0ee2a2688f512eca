//! Synthesis of the "tuned" partner of a base checkpoint.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::checkpoint::{names, Checkpoint, Lineage};
use super::task::TaskSpec;
use super::train::{run, TrainConfig};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TuneMode {
    /// Adds Gaussian noise to the connector rows that read the digit-content
    /// coordinates of the visual input. Row `r` receives `scale · ‖W_r‖ · g`
    /// with `g ~ N(0, I)` drawn from `seed`.
    SeededCorruption { scale: f64, seed: u64 },
    /// Further answer-only training from the base weights.
    ContinuedTraining {
        steps: usize,
        learning_rate: f64,
        seed: u64,
    },
}

impl TuneMode {
    /// Parses a JSON object with a `mode` field, rejecting unknown modes.
    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let mode = value.get("mode").and_then(|m| m.as_str()).unwrap_or("");
        if !matches!(mode, "seeded_corruption" | "continued_training") {
            return Err(Error::contract(format!("unknown tuning mode {mode:?}")));
        }
        serde_json::from_value(value.clone())
            .map_err(|e| Error::contract(format!("invalid {mode} parameters: {e}")))
    }
}

/// Two same-architecture checkpoints: the reference and its post-trained
/// partner.
#[derive(Clone, Debug)]
pub struct ModelPair {
    pub base: Checkpoint,
    pub tuned: Checkpoint,
}

impl ModelPair {
    pub fn new(base: Checkpoint, tuned: Checkpoint) -> Result<Self> {
        if base.config != tuned.config {
            return Err(Error::contract(format!(
                "pair configs differ: {:?} vs {:?}",
                base.config, tuned.config
            )));
        }
        Ok(Self { base, tuned })
    }
}

pub fn make_tuned(base: &Checkpoint, spec: &TaskSpec, mode: &TuneMode) -> Result<Checkpoint> {
    spec.validate()?;
    match *mode {
        TuneMode::SeededCorruption { scale, seed } => corrupt(base, spec, scale, seed),
        TuneMode::ContinuedTraining {
            steps,
            learning_rate,
            seed,
        } => {
            if steps == 0 {
                return Ok(base.clone());
            }
            let train = TrainConfig {
                steps,
                learning_rate,
                warmup_steps: 0,
                min_lr_fraction: 1.0,
                lens_weight: 0.0,
                ..TrainConfig::default()
            };
            let (mut ckpt, _) = run(base.clone(), spec, &train, rng::derive_seed(seed, &[0xC0DE]))?;
            ckpt.meta.lineage = Lineage::Tuned;
            Ok(ckpt)
        }
    }
}

fn corrupt(base: &Checkpoint, spec: &TaskSpec, scale: f64, seed: u64) -> Result<Checkpoint> {
    if !scale.is_finite() || scale < 0.0 {
        return Err(Error::contract(format!("corruption scale must be finite and nonnegative, got {scale}")));
    }
    if scale == 0.0 {
        return Ok(base.clone());
    }
    if spec.content_dims > base.config.visual_dim {
        return Err(Error::contract("content_dims exceeds the model's visual_dim"));
    }
    let mut w = (**base.param(names::CONNECTOR_W)).clone();
    let mut r = rng::stream(seed, &[0xBAD0]);
    for row in 0..spec.content_dims {
        let wr = w.row_mut(row);
        let size = scale * wr.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in wr {
            let g: f64 = StandardNormal.sample(&mut r);
            *x += size * g;
        }
    }
    let mut out = base.clone();
    out.set_param(names::CONNECTOR_W, w)?;
    out.meta.lineage = Lineage::Corrupted;
    out.meta.notes.insert("corruption_scale".into(), scale);
    out.meta.notes.insert("corruption_seed".into(), seed as f64);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;

    fn base() -> (Checkpoint, TaskSpec) {
        let cfg = ModelConfig::default();
        (Checkpoint::init(&cfg, 3).unwrap(), TaskSpec::default())
    }

    #[test]
    fn zero_scale_is_identity() {
        let (b, spec) = base();
        let t = make_tuned(&b, &spec, &TuneMode::SeededCorruption { scale: 0.0, seed: 7 }).unwrap();
        assert!(t.same_weights(&b));
    }

    #[test]
    fn corruption_touches_only_content_rows() {
        let (b, spec) = base();
        let t = make_tuned(&b, &spec, &TuneMode::SeededCorruption { scale: 0.1, seed: 7 }).unwrap();
        let (wb, wt) = (b.param(names::CONNECTOR_W), t.param(names::CONNECTOR_W));
        for r in 0..wb.rows() {
            assert_eq!(wb.row(r) == wt.row(r), r >= spec.content_dims, "row {r}");
        }
        assert_eq!(t.meta.lineage, Lineage::Corrupted);
        for (name, p) in b.params().filter(|(n, _)| *n != names::CONNECTOR_W) {
            assert_eq!(p.data(), t.param(name).data());
        }
    }

    #[test]
    fn zero_step_training_is_identity() {
        let (b, spec) = base();
        let mode = TuneMode::ContinuedTraining {
            steps: 0,
            learning_rate: 1e-3,
            seed: 1,
        };
        assert!(make_tuned(&b, &spec, &mode).unwrap().same_weights(&b));
    }

    #[test]
    fn unknown_mode_is_a_contract_error() {
        let v = serde_json::json!({"mode": "distillation", "scale": 0.1});
        assert!(matches!(TuneMode::from_json(&v), Err(Error::Contract(_))));
        let v = serde_json::json!({"mode": "seeded_corruption", "scale": 0.1, "seed": 7});
        assert_eq!(
            TuneMode::from_json(&v).unwrap(),
            TuneMode::SeededCorruption { scale: 0.1, seed: 7 }
        );
    }
}
