use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lineage {
    Base,
    Tuned,
    Corrupted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub train_steps: u64,
    pub lineage: Lineage,
    /// Free-form numeric annotations (held-out accuracy, corruption scale, ...).
    #[serde(default)]
    pub notes: BTreeMap<String, f64>,
}

/// Immutable model weights plus provenance. Parameters are reference counted
/// so forward passes can bind them onto a tape without copying.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    params: BTreeMap<String, Arc<Tensor>>,
    pub meta: CheckpointMeta,
}

pub(crate) mod names {
    pub const TOKENS: &str = "embed.tokens";
    pub const POSITIONS: &str = "embed.positions";
    pub const CONNECTOR_W: &str = "connector.weight";
    pub const CONNECTOR_B: &str = "connector.bias";
    pub const FINAL_GAIN: &str = "final_norm.gain";
    pub const FINAL_BIAS: &str = "final_norm.bias";
    pub const HEAD_W: &str = "head.weight";
    pub const HEAD_B: &str = "head.bias";

    pub const BLOCK_PARAMS: [&str; 12] = [
        "ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gain",
        "ln2.bias", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
    ];

    pub fn block(layer: usize, name: &str) -> String {
        format!("layers.{layer}.{name}")
    }
}

/// Every parameter name with the shape `config` implies.
pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, v, f) = (config.d_model, config.vocab, config.d_ff);
    let mut out = vec![
        (names::TOKENS.to_string(), vec![v, d]),
        (names::POSITIONS.to_string(), vec![config.max_seq, d]),
        (names::CONNECTOR_W.to_string(), vec![config.visual_dim, d]),
        (names::CONNECTOR_B.to_string(), vec![d]),
    ];
    for l in 0..config.layers {
        for name in names::BLOCK_PARAMS {
            let shape = match name {
                "ln1.gain" | "ln1.bias" | "ln2.gain" | "ln2.bias" | "mlp.b2" => vec![d],
                "mlp.w1" => vec![d, f],
                "mlp.b1" => vec![f],
                "mlp.w2" => vec![f, d],
                _ => vec![d, d],
            };
            out.push((names::block(l, name), shape));
        }
    }
    out.push((names::FINAL_GAIN.to_string(), vec![d]));
    out.push((names::FINAL_BIAS.to_string(), vec![d]));
    out.push((names::HEAD_W.to_string(), vec![d, v]));
    out.push((names::HEAD_B.to_string(), vec![v]));
    out
}

impl Checkpoint {
    /// Fresh, randomly initialized weights.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual_scale = 1.0 / (2.0 * config.layers as f64).sqrt();
        let mut params = BTreeMap::new();
        for (name, shape) in expected_shapes(config) {
            let n: usize = shape.iter().product();
            let t = if name.ends_with(".gain") {
                Tensor::filled(&shape, 1.0)
            } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                Tensor::zeros(&shape)
            } else {
                let std = match name.as_str() {
                    names::TOKENS | names::POSITIONS => 0.5,
                    _ => {
                        let fan_in = shape[0] as f64;
                        let s = 1.0 / fan_in.sqrt();
                        if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                            s * residual_scale
                        } else {
                            s
                        }
                    }
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())?
            };
            params.insert(name, Arc::new(t));
        }
        Ok(Self {
            config: config.clone(),
            params,
            meta: CheckpointMeta {
                seed,
                train_steps: 0,
                lineage: Lineage::Base,
                notes: BTreeMap::new(),
            },
        })
    }

    /// Builds a checkpoint from named tensors, checking names and shapes.
    pub fn from_params(
        config: ModelConfig,
        params: BTreeMap<String, Tensor>,
        meta: CheckpointMeta,
    ) -> Result<Self> {
        config.validate()?;
        let expected = expected_shapes(&config);
        if params.len() != expected.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                None => return Err(Error::Format(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Shape {
                        op: "checkpoint parameter",
                        lhs: shape.clone(),
                        rhs: t.shape().to_vec(),
                    })
                }
                _ => {}
            }
        }
        Ok(Self {
            config,
            params: params.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
            meta,
        })
    }

    pub fn param(&self, name: &str) -> &Arc<Tensor> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("checkpoint has no parameter {name}"))
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Arc<Tensor>)> {
        self.params.iter()
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_param",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = Arc::new(value);
        Ok(())
    }

    /// True when every parameter matches `other` bit for bit.
    pub fn same_weights(&self, other: &Checkpoint) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn to_container(&self) -> Result<Container> {
        Ok(Container {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(&self.config)?,
            metadata: serde_json::to_value(&self.meta)?,
            tensors: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), (**v).clone()))
                .collect(),
        })
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!("expected a checkpoint, found {:?}", c.kind)));
        }
        let config: ModelConfig = serde_json::from_value(c.config)?;
        let meta: CheckpointMeta = serde_json::from_value(c.metadata)?;
        Self::from_params(config, c.tensors.into_iter().collect(), meta)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            vocab: 16,
            max_seq: 8,
            visual_dim: 4,
            d_ff: 16,
        }
    }

    #[test]
    fn init_is_deterministic_and_complete() {
        let a = Checkpoint::init(&tiny(), 1).unwrap();
        let b = Checkpoint::init(&tiny(), 1).unwrap();
        assert!(a.same_weights(&b));
        assert_eq!(a.params().count(), expected_shapes(&tiny()).len());
        let c = Checkpoint::init(&tiny(), 2).unwrap();
        assert!(!a.same_weights(&c));
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let a = Checkpoint::init(&tiny(), 9).unwrap();
        a.save(&path).unwrap();
        let b = Checkpoint::load(&path).unwrap();
        assert!(a.same_weights(&b));
        assert_eq!(a.meta, b.meta);
        assert_eq!(a.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn missing_parameter_is_rejected() {
        let a = Checkpoint::init(&tiny(), 9).unwrap();
        let mut c = a.to_container().unwrap();
        c.tensors.retain(|(n, _)| n != names::HEAD_B);
        assert!(Checkpoint::from_container(c).is_err());
    }
}
