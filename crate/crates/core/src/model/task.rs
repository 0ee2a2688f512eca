//! The synthetic "visual arithmetic" task.
//!
//! A sequence shows `visual_tokens` slots. `digits` of them hold a digit,
//! rendered as a fixed random prototype vector scaled by a per-slot clarity;
//! the rest hold a blank prototype. The text prompt is `[op, =]` with op
//! either sum-mod-10 or max, and the answer is `[digit, <eoa>]`.
//!
//! Digit prototypes live in the first `content_dims` visual coordinates and
//! the blank prototype in the remaining ones, so the two are exactly
//! orthogonal. Digit prototypes share a common component, so telling them
//! apart depends on comparatively small differences.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::vocab;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOp {
    SumMod10,
    Max,
}

impl TaskOp {
    pub fn token(self) -> usize {
        match self {
            TaskOp::SumMod10 => vocab::SUM,
            TaskOp::Max => vocab::MAX,
        }
    }

    pub fn apply(self, digits: &[usize]) -> usize {
        match self {
            TaskOp::SumMod10 => digits.iter().sum::<usize>() % 10,
            TaskOp::Max => digits.iter().copied().max().unwrap_or(0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub visual_tokens: usize,
    pub digits: usize,
    pub visual_dim: usize,
    pub content_dims: usize,
    pub ops: Vec<TaskOp>,
    pub clarity_min: f64,
    pub clarity_max: f64,
    /// Size of each digit's private direction relative to the component all
    /// digits share. Small values make digits look alike.
    pub prototype_spread: f64,
    /// Euclidean norm of every prototype before clarity scaling.
    pub visual_norm: f64,
    pub prototype_seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            visual_tokens: 8,
            digits: 2,
            visual_dim: 16,
            content_dims: 10,
            ops: vec![TaskOp::SumMod10, TaskOp::Max],
            clarity_min: 0.8,
            clarity_max: 1.0,
            prototype_spread: 0.5,
            visual_norm: 4.0,
            prototype_seed: 0x5EED,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.digits == 0 || self.digits > self.visual_tokens {
            return Err(Error::contract(format!(
                "{} digits do not fit {} visual slots",
                self.digits, self.visual_tokens
            )));
        }
        if self.content_dims == 0 || self.content_dims >= self.visual_dim {
            return Err(Error::contract(
                "content_dims must leave at least one blank coordinate",
            ));
        }
        if !(self.prototype_spread > 0.0 && self.visual_norm > 0.0) {
            return Err(Error::contract("prototype_spread and visual_norm must be positive"));
        }
        if self.ops.is_empty() {
            return Err(Error::contract("task needs at least one op"));
        }
        if !(0.0 < self.clarity_min && self.clarity_min <= self.clarity_max) {
            return Err(Error::contract("clarity range must be positive and ordered"));
        }
        Ok(())
    }

    /// Context length (visual slots plus the two prompt tokens).
    pub fn context_len(&self) -> usize {
        self.visual_tokens + 2
    }
}

/// Fixed visual prototypes for the ten digits and the blank slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub digits: Vec<Vec<f64>>,
    pub blank: Vec<f64>,
}

impl Prototypes {
    pub fn new(spec: &TaskSpec) -> Self {
        let mut rng = rng::stream(spec.prototype_seed, &[0xD161]);
        let c = spec.content_dims;
        let target = spec.visual_norm;
        let mut draw = |lo: usize, hi: usize| {
            let mut v = vec![0.0; spec.visual_dim];
            for x in &mut v[lo..hi] {
                *x = StandardNormal.sample(&mut rng);
            }
            v
        };
        let rescale = |mut v: Vec<f64>| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x *= target / norm);
            v
        };
        let shared = draw(0, c);
        let digits = (0..vocab::DIGITS)
            .map(|_| {
                let own = draw(0, c);
                rescale(
                    shared
                        .iter()
                        .zip(&own)
                        .map(|(s, o)| s + spec.prototype_spread * o)
                        .collect(),
                )
            })
            .collect();
        let blank = rescale(draw(c, spec.visual_dim));
        Self { digits, blank }
    }
}

/// One multimodal input: raw visual vectors, text token ids, and an optional
/// gold answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSequence {
    pub visual: Vec<Vec<f64>>,
    pub text: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<Vec<usize>>,
}

impl MultimodalSequence {
    pub fn context_len(&self) -> usize {
        self.visual.len() + self.text.len()
    }
}

/// A generated task with its ground-truth slot contents.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedTask {
    pub sequence: MultimodalSequence,
    /// `Some(d)` for digit slots, `None` for blanks.
    pub slots: Vec<Option<usize>>,
    pub op: TaskOp,
}

pub fn generate_task(
    spec: &TaskSpec,
    protos: &Prototypes,
    rng: &mut impl Rng,
) -> GeneratedTask {
    let n = spec.visual_tokens;
    let mut slots = vec![None; n];
    let picked = sample(rng, n, spec.digits);
    let mut positions: Vec<usize> = picked.into_iter().collect();
    positions.sort_unstable();
    for &p in &positions {
        slots[p] = Some(rng.random_range(0..vocab::DIGITS));
    }
    let op = spec.ops[rng.random_range(0..spec.ops.len())];
    let visual = slots
        .iter()
        .map(|s| {
            let clarity = rng.random_range(spec.clarity_min..=spec.clarity_max);
            let proto = match s {
                Some(d) => &protos.digits[*d],
                None => &protos.blank,
            };
            proto.iter().map(|x| x * clarity).collect()
        })
        .collect();
    let digits: Vec<usize> = slots.iter().flatten().copied().collect();
    let answer = vec![vocab::digit(op.apply(&digits)), vocab::EOA];
    GeneratedTask {
        sequence: MultimodalSequence {
            visual,
            text: vec![op.token(), vocab::EQ],
            answer: Some(answer),
        },
        slots,
        op,
    }
}

/// `count` tasks; task `i` depends only on `(seed, i)`.
pub fn generate_tasks(spec: &TaskSpec, count: usize, seed: u64) -> Vec<GeneratedTask> {
    let protos = Prototypes::new(spec);
    (0..count)
        .map(|i| {
            let mut r = rng::stream(seed, &[0x7A5C, i as u64]);
            generate_task(spec, &protos, &mut r)
        })
        .collect()
}

pub fn write_jsonl(path: &Path, seqs: &[MultimodalSequence]) -> Result<()> {
    let mut buf = Vec::new();
    for s in seqs {
        serde_json::to_writer(&mut buf, s)?;
        buf.write_all(b"\n")?;
    }
    crate::container::write_atomic(path, &buf)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MultimodalSequence>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: MultimodalSequence = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(seq);
    }
    Ok(out)
}
