//! Training of the base model on the synthetic task.
//!
//! The loss is answer cross-entropy plus an auxiliary logit-lens term on the
//! visual positions of every layer: digit slots are pulled toward their digit
//! token and blank slots toward a uniform distribution over the ten digits.
//! The auxiliary term gives the lens a meaningful reading at every depth,
//! with confident (low-entropy) digit slots and diffuse (high-entropy) blanks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Lineage};
use super::config::{vocab, ModelConfig};
use super::decode::greedy_accuracy;
use super::forward::{forward_on_tape, Weights};
use super::task::{generate_task, generate_tasks, GeneratedTask, MultimodalSequence, Prototypes, TaskSpec};
use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Seed of the held-out evaluation suite. Training streams are derived from
/// the training seed under separate labels, so the two never coincide.
pub const HELD_OUT_SEED: u64 = 0x0004_E1D0_u64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of the peak.
    pub min_lr_fraction: f64,
    pub grad_clip: f64,
    /// Weight of the auxiliary lens loss; 0 trains on answers only.
    pub lens_weight: f64,
    pub held_out_tasks: usize,
    pub min_accuracy: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 16,
            learning_rate: 5e-3,
            warmup_steps: 50,
            min_lr_fraction: 0.05,
            grad_clip: 1.0,
            lens_weight: 1.0,
            held_out_tasks: 200,
            min_accuracy: 0.9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    /// Mean batch loss per step.
    pub loss_curve: Vec<f64>,
    pub held_out_accuracy: f64,
}

/// The canonical held-out suite: `count` tasks from a fixed seed.
pub fn held_out_suite(spec: &TaskSpec, count: usize) -> Vec<GeneratedTask> {
    generate_tasks(spec, count, HELD_OUT_SEED)
}

pub fn held_out_sequences(spec: &TaskSpec, count: usize) -> Vec<MultimodalSequence> {
    held_out_suite(spec, count)
        .into_iter()
        .map(|t| t.sequence)
        .collect()
}

fn check_compatible(config: &ModelConfig, spec: &TaskSpec) -> Result<()> {
    spec.validate()?;
    if config.visual_dim != spec.visual_dim {
        return Err(Error::contract(format!(
            "model visual_dim {} differs from task visual_dim {}",
            config.visual_dim, spec.visual_dim
        )));
    }
    if config.vocab < vocab::TASK_VOCAB {
        return Err(Error::contract(format!(
            "vocab {} cannot hold the {} task tokens",
            config.vocab,
            vocab::TASK_VOCAB
        )));
    }
    if spec.context_len() + 2 > config.max_seq {
        return Err(Error::contract(format!(
            "task needs {} positions, max_seq is {}",
            spec.context_len() + 2,
            config.max_seq
        )));
    }
    Ok(())
}

/// Trains a base checkpoint and checks it against the held-out suite.
pub fn train_toy(config: &ModelConfig, spec: &TaskSpec, train: &TrainConfig, seed: u64) -> Result<TrainReport> {
    check_compatible(config, spec)?;
    let init = Checkpoint::init(config, rng::derive_seed(seed, &[0x1417]))?;
    let (mut checkpoint, loss_curve) = run(init, spec, train, seed)?;
    let held_out = held_out_sequences(spec, train.held_out_tasks);
    let accuracy = greedy_accuracy(&checkpoint, &held_out)?;
    if accuracy < train.min_accuracy {
        return Err(Error::Training {
            accuracy,
            steps: train.steps,
            loss_curve,
        });
    }
    checkpoint.meta.seed = seed;
    checkpoint.meta.lineage = Lineage::Base;
    checkpoint.meta.notes.insert("held_out_accuracy".into(), accuracy);
    Ok(TrainReport {
        checkpoint,
        loss_curve,
        held_out_accuracy: accuracy,
    })
}

/// Continues training `start` for `train.steps` steps. Returns the new
/// checkpoint and its loss curve; zero steps returns `start` unchanged.
pub(crate) fn run(
    start: Checkpoint,
    spec: &TaskSpec,
    train: &TrainConfig,
    seed: u64,
) -> Result<(Checkpoint, Vec<f64>)> {
    check_compatible(&start.config, spec)?;
    if train.batch_size == 0 {
        return Err(Error::contract("batch_size must be positive"));
    }
    let protos = Prototypes::new(spec);
    let mut ckpt = start;
    let mut adam = Adam::new(&ckpt);
    let mut curve = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut total = 0.0;
        for b in 0..train.batch_size {
            let mut r = rng::stream(seed, &[0x7EA1, step as u64, b as u64]);
            let task = generate_task(spec, &protos, &mut r);
            let tape = Tape::new();
            let w = Weights::trainable(&tape, &ckpt);
            let loss = task_loss(&tape, &w, &task, train.lens_weight)?;
            total += loss.value().item()?;
            let g = tape.backward(loss)?;
            for (name, var) in w.named() {
                let gv = g.get_or_zeros(*var);
                match grads.get_mut(name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(gv.data()).for_each(|(a, x)| *a += x),
                    None => {
                        grads.insert(name.clone(), gv);
                    }
                }
            }
        }
        let inv = 1.0 / train.batch_size as f64;
        let mut sq = 0.0;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= inv);
            sq += g.data().iter().map(|x| x * x).sum::<f64>();
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { step, value: norm });
        }
        if norm > train.grad_clip {
            let c = train.grad_clip / norm;
            grads.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= c));
        }
        adam.step(&mut ckpt, &grads, lr_at(train, step))?;
        curve.push(total * inv);
    }
    ckpt.meta.train_steps += train.steps as u64;
    Ok((ckpt, curve))
}

fn lr_at(train: &TrainConfig, step: usize) -> f64 {
    let peak = train.learning_rate;
    if step < train.warmup_steps {
        return peak * (step + 1) as f64 / train.warmup_steps as f64;
    }
    let span = (train.steps - train.warmup_steps).max(1) as f64;
    let t = (step - train.warmup_steps) as f64 / span;
    let floor = peak * train.min_lr_fraction;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Answer cross-entropy plus the weighted lens term for one task.
pub(crate) fn task_loss<'t>(
    tape: &'t Tape,
    w: &Weights<'t>,
    task: &GeneratedTask,
    lens_weight: f64,
) -> Result<Var<'t>> {
    let seq = &task.sequence;
    let answer = seq
        .answer
        .as_deref()
        .ok_or_else(|| Error::contract("training task without an answer"))?;
    let v = w.config.vocab;
    let mut tokens = seq.text.clone();
    tokens.extend_from_slice(&answer[..answer.len() - 1]);
    let out = forward_on_tape(tape, w, &seq.visual, &tokens, None, &[], true)?;
    let logits = out.logits.expect("requested");

    let first = seq.context_len() - 1;
    let mut target = Tensor::zeros(&[answer.len(), v]);
    for (j, &a) in answer.iter().enumerate() {
        target.row_mut(j)[a] = 1.0;
    }
    let answer_loss = logits
        .rows(first, answer.len())?
        .log_softmax()
        .mul(&tape.constant(target))?
        .sum()
        .scale(-1.0 / answer.len() as f64);
    if lens_weight == 0.0 {
        return Ok(answer_loss);
    }

    let n = seq.visual.len();
    let mut lens_target = Tensor::zeros(&[n, v]);
    for (i, slot) in task.slots.iter().enumerate() {
        let row = lens_target.row_mut(i);
        match slot {
            Some(d) => row[vocab::digit(*d)] = 1.0,
            None => row[..vocab::DIGITS].fill(1.0 / vocab::DIGITS as f64),
        }
    }
    let lens_target = tape.constant(lens_target);
    let mut lens_loss: Option<Var<'t>> = None;
    for h in &out.hidden {
        let term = w
            .lens_logits(&h.rows(0, n)?)?
            .log_softmax()
            .mul(&lens_target)?
            .sum();
        lens_loss = Some(match lens_loss {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let scale = -lens_weight / (out.hidden.len() * n) as f64;
    answer_loss.add(&lens_loss.expect("at least one layer").scale(scale))
}

struct Adam {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(ckpt: &Checkpoint) -> Self {
        let zeros = |t: &Tensor| vec![0.0; t.len()];
        Self {
            m: ckpt.params().map(|(k, t)| (k.clone(), zeros(t))).collect(),
            v: ckpt.params().map(|(k, t)| (k.clone(), zeros(t))).collect(),
            t: 0,
        }
    }

    fn step(&mut self, ckpt: &mut Checkpoint, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (name, g) in grads {
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            let mut p = (**ckpt.param(name)).clone();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
            ckpt.set_param(name, p)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ModelConfig, TaskSpec, TrainConfig) {
        let cfg = ModelConfig {
            layers: 2,
            d_model: 16,
            heads: 2,
            vocab: 16,
            max_seq: 12,
            visual_dim: 6,
            d_ff: 32,
        };
        let spec = TaskSpec {
            visual_tokens: 4,
            digits: 2,
            visual_dim: 6,
            content_dims: 4,
            ..TaskSpec::default()
        };
        let train = TrainConfig {
            steps: 6,
            batch_size: 2,
            held_out_tasks: 10,
            min_accuracy: 0.0,
            ..TrainConfig::default()
        };
        (cfg, spec, train)
    }

    #[test]
    fn training_is_deterministic() {
        let (cfg, spec, train) = small();
        let a = train_toy(&cfg, &spec, &train, 1).unwrap();
        let b = train_toy(&cfg, &spec, &train, 1).unwrap();
        assert!(a.checkpoint.same_weights(&b.checkpoint));
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.checkpoint.meta.train_steps, 6);
    }

    #[test]
    fn failure_carries_the_loss_curve() {
        let (cfg, spec, mut train) = small();
        train.min_accuracy = 1.1;
        match train_toy(&cfg, &spec, &train, 1) {
            Err(Error::Training { loss_curve, steps, .. }) => {
                assert_eq!(loss_curve.len(), 6);
                assert_eq!(steps, 6);
            }
            other => panic!("expected a training failure, got {other:?}"),
        }
    }

    #[test]
    fn incompatible_task_is_rejected() {
        let (cfg, mut spec, train) = small();
        spec.visual_dim = 7;
        spec.content_dims = 5;
        assert!(train_toy(&cfg, &spec, &train, 1).is_err());
    }

    #[test]
    fn schedule_warms_up_and_decays() {
        let t = TrainConfig::default();
        assert!(lr_at(&t, 0) < lr_at(&t, t.warmup_steps));
        assert!((lr_at(&t, t.warmup_steps) - t.learning_rate).abs() < 1e-12);
        assert!(lr_at(&t, t.steps - 1) < 0.1 * t.learning_rate);
    }
}
