use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::LensProfile;
use crate::model::checkpoint::Checkpoint;
use crate::model::decode::{decode_with, DecodeMode};
use crate::model::forward::{forward_with_trace, InputEdit, Splice};
use crate::model::task::MultimodalSequence;
use crate::model::tuned::ModelPair;
use crate::replay::{low_entropy_mask, Polarity};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Donor {
    Base,
    Tuned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpliceMode {
    /// Replace the embedded input only.
    Layer0,
    /// Replace the hidden state at every layer.
    AllLayers,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterventionSpec {
    pub strategy: Polarity,
    pub tau: f64,
    pub donor: Donor,
    pub splice: SpliceMode,
    /// Layers whose masks vote on each position; `None` means `1..=L`.
    pub mask_layers: Option<Vec<usize>>,
}

impl Default for InterventionSpec {
    fn default() -> Self {
        Self {
            strategy: Polarity::Low,
            tau: 0.4,
            donor: Donor::Base,
            splice: SpliceMode::Layer0,
            mask_layers: None,
        }
    }
}

/// Visual positions to splice: those the strategy's mask selects in a
/// strict majority of the voting layers of the base profile.
pub fn intervention_positions(base_profile: &LensProfile, spec: &InterventionSpec) -> Result<Vec<usize>> {
    let num_layers = base_profile.layers() - 1;
    let layers = spec
        .mask_layers
        .clone()
        .unwrap_or_else(|| (1..=num_layers).collect());
    if layers.is_empty() || layers.iter().any(|&l| l > num_layers) {
        return Err(Error::contract(format!("mask layers {layers:?} outside 0..={num_layers}")));
    }
    Ok(low_entropy_mask(base_profile, spec.tau, spec.strategy)?.positions(&layers))
}

/// Decodes with `recipient` after replacing its hidden states at
/// `positions` with `donor`'s.
pub fn splice_decode(
    recipient: &Checkpoint,
    donor: &Checkpoint,
    seq: &MultimodalSequence,
    positions: &[usize],
    mode: SpliceMode,
    decode: DecodeMode,
    max_new: usize,
) -> Result<Vec<usize>> {
    if recipient.config != donor.config {
        return Err(Error::contract("splice between checkpoints with different configs"));
    }
    let trace = forward_with_trace(donor, seq, &[])?.trace;
    let layers = match mode {
        SpliceMode::Layer0 => 0..=0,
        SpliceMode::AllLayers => 0..=recipient.config.layers,
    };
    let mut splices = Vec::new();
    for l in layers {
        for &i in positions {
            if i >= trace.positions() {
                return Err(Error::contract(format!("splice position {i} outside the context")));
            }
            splices.push(Splice {
                layer: l,
                position: i,
                values: trace.hidden(l, i).to_vec(),
            });
        }
    }
    decode_with(recipient, seq, &InputEdit::splices(splices), decode, max_new)
}

/// Decodes with the tuned model after splicing the donor's activations at
/// the strategy's positions.
pub fn intervene_decode(
    pair: &ModelPair,
    seq: &MultimodalSequence,
    spec: &InterventionSpec,
    decode: DecodeMode,
    max_new: usize,
) -> Result<Vec<usize>> {
    if pair.base.config != pair.tuned.config {
        return Err(Error::contract("pair configs differ"));
    }
    let profile = LensProfile::of_sequence(&pair.base, seq)?;
    let positions = intervention_positions(&profile, spec)?;
    let donor = match spec.donor {
        Donor::Base => &pair.base,
        Donor::Tuned => &pair.tuned,
    };
    splice_decode(&pair.tuned, donor, seq, &positions, spec.splice, decode, max_new)
}
