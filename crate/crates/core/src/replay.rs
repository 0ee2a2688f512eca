//! Activation replay: test-time optimization of additive visual tokens.
//!
//! Zero-initialized vectors `x_i` are added to the tuned model's layer-0
//! visual activations. Gradient descent on `x` minimizes the masked sum of
//! `D_kl(p_base ‖ p_tuned)` over lens distributions, where the mask selects
//! (layer, visual position) cells by the base model's lens entropy.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::lens::{kl_of, LensProfile};
use crate::model::checkpoint::Checkpoint;
use crate::model::decode::{decode_with, DecodeMode};
use crate::model::forward::{forward_on_tape, InputEdit, Weights};
use crate::model::task::MultimodalSequence;
use crate::model::tuned::ModelPair;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const REPLAY_KIND: &str = "replay_state";
pub const X_TENSOR: &str = "replay.x";

const STATIONARY_GRAD: f64 = 1e-8;
const MAX_HALVINGS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Low,
    High,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Per layer: `e < τ · max_j e_j` over the visual positions.
    Dynamic,
    /// One absolute entropy threshold for every layer.
    Static,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskGranularity {
    PerLayer,
    /// A position is selected at every layer when it is selected in a strict
    /// majority of the objective layers.
    PositionMajority,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScope {
    /// Only `x_i` at positions selected in some objective layer move.
    Masked,
    /// Every visual `x_i` follows the full gradient.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    pub tau: f64,
    pub alpha: f64,
    pub steps: usize,
    /// Layers entering the objective; `None` means `1..=L`.
    pub layer_set: Option<Vec<usize>>,
    pub polarity: Polarity,
    pub threshold_mode: ThresholdMode,
    pub static_threshold: Option<f64>,
    pub granularity: MaskGranularity,
    pub update_scope: UpdateScope,
    /// Halve the step up to ten times until the objective strictly drops.
    pub backtracking: bool,
    /// Stop once a step improves the objective by less than this fraction.
    pub min_rel_improvement: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            tau: 0.4,
            alpha: 1.0,
            steps: 20,
            layer_set: None,
            polarity: Polarity::Low,
            threshold_mode: ThresholdMode::Dynamic,
            static_threshold: None,
            granularity: MaskGranularity::PerLayer,
            update_scope: UpdateScope::Masked,
            backtracking: true,
            min_rel_improvement: 1e-4,
        }
    }
}

impl ReplayConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::contract(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::contract(format!("alpha must be finite and nonnegative, got {}", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::contract("replay needs at least one step"));
        }
        let layers = self.layers(num_layers);
        if layers.is_empty() || layers.iter().any(|&l| l > num_layers) {
            return Err(Error::contract(format!(
                "layer set {layers:?} must be a non-empty subset of 0..={num_layers}"
            )));
        }
        if self.threshold_mode == ThresholdMode::Static && self.static_threshold.is_none() {
            return Err(Error::contract("static thresholding needs static_threshold"));
        }
        Ok(())
    }

    pub fn layers(&self, num_layers: usize) -> Vec<usize> {
        self.layer_set
            .clone()
            .unwrap_or_else(|| (1..=num_layers).collect())
    }
}

/// `cells[l][i]` over every trace layer and visual position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub cells: Vec<Vec<bool>>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.cells.iter().flatten().filter(|&&m| m).count()
    }

    pub fn count_in(&self, layers: &[usize]) -> usize {
        layers
            .iter()
            .map(|&l| self.cells[l].iter().filter(|&&m| m).count())
            .sum()
    }

    /// Positions selected in a strict majority of `layers`, repeated at
    /// every layer.
    pub fn position_majority(&self, layers: &[usize]) -> Mask {
        let n = self.cells.first().map_or(0, Vec::len);
        let row: Vec<bool> = (0..n)
            .map(|i| 2 * layers.iter().filter(|&&l| self.cells[l][i]).count() > layers.len())
            .collect();
        Mask {
            cells: vec![row; self.cells.len()],
        }
    }

    /// Visual positions selected in at least one of `layers`.
    pub fn any_layer(&self, layers: &[usize]) -> Vec<bool> {
        let n = self.cells.first().map_or(0, Vec::len);
        (0..n)
            .map(|i| layers.iter().any(|&l| self.cells[l][i]))
            .collect()
    }

    /// Visual positions selected by the position-majority rule.
    pub fn positions(&self, layers: &[usize]) -> Vec<usize> {
        let m = self.position_majority(layers);
        m.cells
            .first()
            .map(|r| (0..r.len()).filter(|&i| r[i]).collect())
            .unwrap_or_default()
    }
}

/// Dynamic-threshold mask from per-layer visual-position entropies.
pub fn mask_from_entropies(entropy: &[Vec<f64>], tau: f64, polarity: Polarity) -> Result<Mask> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::contract(format!("tau must lie in (0, 1], got {tau}")));
    }
    let cells = entropy
        .iter()
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter()
                .map(|&e| (e < max * tau) == (polarity == Polarity::Low))
                .collect()
        })
        .collect();
    Ok(Mask { cells })
}

/// Fixed-threshold mask: low cells have entropy strictly below `threshold`.
pub fn mask_from_threshold(entropy: &[Vec<f64>], threshold: f64, polarity: Polarity) -> Mask {
    Mask {
        cells: entropy
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&e| (e < threshold) == (polarity == Polarity::Low))
                    .collect()
            })
            .collect(),
    }
}

fn visual_entropies(profile: &LensProfile) -> Vec<Vec<f64>> {
    profile
        .entropy
        .iter()
        .map(|row| row[..profile.visual_len].to_vec())
        .collect()
}

/// Dynamic low-entropy mask from the base model's lens profile.
pub fn low_entropy_mask(base_profile: &LensProfile, tau: f64, polarity: Polarity) -> Result<Mask> {
    mask_from_entropies(&visual_entropies(base_profile), tau, polarity)
}

/// The mask `config` selects for a base profile.
pub fn mask_for(base_profile: &LensProfile, config: &ReplayConfig) -> Result<Mask> {
    let mask = match config.threshold_mode {
        ThresholdMode::Dynamic => low_entropy_mask(base_profile, config.tau, config.polarity)?,
        ThresholdMode::Static => {
            let t = config
                .static_threshold
                .ok_or_else(|| Error::contract("static thresholding needs static_threshold"))?;
            mask_from_threshold(&visual_entropies(base_profile), t, config.polarity)
        }
    };
    Ok(match config.granularity {
        MaskGranularity::PerLayer => mask,
        MaskGranularity::PositionMajority => {
            mask.position_majority(&config.layers(base_profile.layers() - 1))
        }
    })
}

/// Lower-interpolation empirical quantile: the element at index
/// `floor(f · (N − 1))` of the sorted values.
pub fn lower_quantile(values: &[f64], fraction: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("quantile of an empty set"));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::contract(format!("fraction must lie in [0, 1], got {fraction}")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v[(fraction * (v.len() - 1) as f64).floor() as usize])
}

/// Absolute entropy threshold below which `target_fraction` of the base
/// model's visual-position entropies at `layers` fall on a validation set.
pub fn static_threshold(
    validation: &[MultimodalSequence],
    base: &Checkpoint,
    layers: &[usize],
    target_fraction: f64,
) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::contract("static threshold needs a non-empty validation set"));
    }
    let mut all = Vec::new();
    for s in validation {
        let p = LensProfile::of_sequence(base, s)?;
        for &l in layers {
            all.extend_from_slice(&p.entropy[l][..p.visual_len]);
        }
    }
    lower_quantile(&all, target_fraction)
}

/// Value and gradient of the masked objective.
#[derive(Clone, Debug)]
pub struct Objective {
    pub value: f64,
    pub grad: Tensor,
}

/// `Σ_{l ∈ layers} Σ_i M_{l,i} · D_kl(p^b_{l,i} ‖ p^r_{l,i}(x))` with the
/// tuned model's layer-0 visual activations shifted by `x`.
pub fn replay_objective(
    tuned: &Checkpoint,
    seq: &MultimodalSequence,
    x: &Tensor,
    base_profile: &LensProfile,
    mask: &Mask,
    layers: &[usize],
) -> Result<Objective> {
    objective(tuned, seq, x, base_profile, mask, layers, true)
}

fn objective(
    tuned: &Checkpoint,
    seq: &MultimodalSequence,
    x: &Tensor,
    base_profile: &LensProfile,
    mask: &Mask,
    layers: &[usize],
    with_grad: bool,
) -> Result<Objective> {
    let n = seq.visual.len();
    let d = tuned.config.d_model;
    if x.shape() != [n, d] {
        return Err(Error::Shape {
            op: "replay tokens",
            lhs: vec![n, d],
            rhs: x.shape().to_vec(),
        });
    }
    if base_profile.visual_len != n
        || base_profile.layers() != tuned.config.layers + 1
        || mask.cells.len() != base_profile.layers()
        || mask.cells.iter().any(|r| r.len() != n)
    {
        return Err(Error::contract("base profile and mask do not match the sequence"));
    }
    if let Some(&l) = layers.iter().find(|&&l| l > tuned.config.layers) {
        return Err(Error::contract(format!("objective layer {l} out of range")));
    }
    if mask.count_in(layers) == 0 {
        return Ok(Objective {
            value: 0.0,
            grad: Tensor::zeros(&[n, d]),
        });
    }

    let v = tuned.config.vocab;
    let tape = Tape::new();
    let w = Weights::frozen(&tape, tuned);
    let xv = tape.leaf(x.clone());
    let out = forward_on_tape(&tape, &w, &seq.visual, &seq.text, Some(xv), &[], false)?;

    // Σ p_b ln p_b over masked cells is constant in x; the tape carries
    // the cross term −Σ p_b ln max(p_r, floor).
    let mut constant = 0.0;
    let mut cross = None;
    for &l in layers {
        if !mask.cells[l].iter().any(|&m| m) {
            continue;
        }
        let mut weights = Tensor::zeros(&[n, v]);
        for i in (0..n).filter(|&i| mask.cells[l][i]) {
            let pb = base_profile.dist(l, i);
            weights.row_mut(i).copy_from_slice(pb);
            constant += pb
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.max(crate::tensor::PROB_FLOOR).ln())
                .sum::<f64>();
        }
        let logq = w
            .lens_logits(&out.hidden[l].rows(0, n)?)?
            .softmax()
            .log();
        let term = logq.mul(&tape.constant(weights))?.sum();
        cross = Some(match cross {
            Some(acc) => term.add(&acc)?,
            None => term,
        });
    }
    let cross = cross.expect("mask is non-empty").scale(-1.0);
    let value = constant + cross.value().item()?;
    let grad = if with_grad {
        tape.backward(cross)?.get_or_zeros(xv)
    } else {
        Tensor::zeros(&[n, d])
    };
    Ok(Objective { value, grad })
}

/// Optimized replay tokens and the record of how they were found.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayState {
    /// `[n × d_model]`, aligned to the visual positions.
    pub x: Tensor,
    pub mask: Mask,
    /// Objective at the start of every step, followed by the final value.
    pub history: Vec<f64>,
    /// Step size accepted at each step.
    pub step_sizes: Vec<f64>,
    pub config: ReplayConfig,
}

impl ReplayState {
    pub fn zeros(n: usize, d: usize, mask: Mask, config: ReplayConfig) -> Self {
        Self {
            x: Tensor::zeros(&[n, d]),
            mask,
            history: Vec::new(),
            step_sizes: Vec::new(),
            config,
        }
    }

    pub fn initial_objective(&self) -> Option<f64> {
        self.history.first().copied()
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.history.last().copied()
    }

    pub fn edit(&self) -> InputEdit {
        InputEdit::additive(self.x.clone())
    }

    pub fn to_container(&self) -> Result<Container> {
        Ok(Container {
            kind: REPLAY_KIND.into(),
            config: serde_json::to_value(&self.config)?,
            metadata: json!({
                "history": self.history,
                "step_sizes": self.step_sizes,
                "mask": self.mask,
            }),
            tensors: vec![(X_TENSOR.into(), self.x.clone())],
        })
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.kind != REPLAY_KIND {
            return Err(Error::Format(format!("expected a replay state, found {:?}", c.kind)));
        }
        let config = serde_json::from_value(c.config)?;
        let field = |name: &str| {
            c.metadata
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("replay state lacks {name}")))
        };
        let history = serde_json::from_value(field("history")?)?;
        let step_sizes = serde_json::from_value(field("step_sizes")?)?;
        let mask = serde_json::from_value(field("mask")?)?;
        let x = c
            .tensors
            .into_iter()
            .find(|(n, _)| n == X_TENSOR)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("replay state lacks {X_TENSOR}")))?;
        Ok(Self {
            x,
            mask,
            history,
            step_sizes,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// Runs replay on one sequence.
pub fn replay_optimize(pair: &ModelPair, seq: &MultimodalSequence, config: &ReplayConfig) -> Result<ReplayState> {
    let base_profile = LensProfile::of_sequence(&pair.base, seq)?;
    replay_with_profile(&pair.tuned, seq, &base_profile, config)
}

/// Replay against a precomputed base profile; the base model is not run.
pub fn replay_with_profile(
    tuned: &Checkpoint,
    seq: &MultimodalSequence,
    base_profile: &LensProfile,
    config: &ReplayConfig,
) -> Result<ReplayState> {
    let num_layers = tuned.config.layers;
    config.validate(num_layers)?;
    let layers = config.layers(num_layers);
    let mask = mask_for(base_profile, config)?;
    let mut state = ReplayState::zeros(seq.visual.len(), tuned.config.d_model, mask, config.clone());

    let movable = match config.update_scope {
        UpdateScope::Masked => state.mask.any_layer(&layers),
        UpdateScope::All => vec![true; seq.visual.len()],
    };
    let direction = |g: &Tensor| {
        let mut g = g.clone();
        for (i, &m) in movable.iter().enumerate() {
            if !m {
                g.row_mut(i).fill(0.0);
            }
        }
        g
    };

    let mut current = objective(tuned, seq, &state.x, base_profile, &state.mask, &layers, true)?;
    for step in 0..config.steps {
        if !current.value.is_finite() {
            return Err(Error::NonFinite {
                step,
                value: current.value,
            });
        }
        state.history.push(current.value);
        let dir = direction(&current.grad);
        if dir.norm() <= STATIONARY_GRAD {
            break;
        }
        let attempts = if config.backtracking { MAX_HALVINGS + 1 } else { 1 };
        let mut alpha = config.alpha;
        let mut accepted = None;
        for _ in 0..attempts {
            let candidate = state.x.sub(&dir.scale(alpha))?;
            let next = objective(tuned, seq, &candidate, base_profile, &state.mask, &layers, true)?;
            if !next.value.is_finite() {
                return Err(Error::NonFinite {
                    step: step + 1,
                    value: next.value,
                });
            }
            if !config.backtracking || next.value < current.value {
                accepted = Some((candidate, next));
                break;
            }
            alpha *= 0.5;
        }
        let Some((x, next)) = accepted else { break };
        let improvement = current.value - next.value;
        state.x = x;
        state.step_sizes.push(alpha);
        current = next;
        let rel = if state.history[step].abs() > 0.0 {
            improvement / state.history[step].abs()
        } else {
            0.0
        };
        if rel < config.min_rel_improvement {
            break;
        }
    }
    state.history.push(current.value);
    Ok(state)
}

/// Decodes with `x` added to the visual activations at every decoding step.
pub fn apply_and_decode(
    tuned: &Checkpoint,
    seq: &MultimodalSequence,
    x: &Tensor,
    mode: DecodeMode,
    max_new: usize,
) -> Result<Vec<usize>> {
    decode_with(tuned, seq, &InputEdit::additive(x.clone()), mode, max_new)
}

/// Masked KL between two profiles, summed over `layers`.
pub fn masked_kl(base: &LensProfile, tuned: &LensProfile, mask: &Mask, layers: &[usize]) -> f64 {
    let mut total = 0.0;
    for &l in layers {
        for i in 0..base.visual_len {
            if mask.cells[l][i] {
                total += kl_of(base.dist(l, i), tuned.dist(l, i));
            }
        }
    }
    total
}
