use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::vocab;
use super::forward::{forward_tokens, InputEdit};
use super::task::MultimodalSequence;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Draws from `softmax(logits / temperature)` by inverse-CDF on one uniform.
pub fn sample_token(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap at the top; take the last nonzero weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Autoregressive generation with `edit` held fixed. Stops after emitting
/// the end-of-answer token or `max_new` tokens.
pub fn decode_with(
    ckpt: &Checkpoint,
    seq: &MultimodalSequence,
    edit: &InputEdit,
    mode: DecodeMode,
    max_new: usize,
) -> Result<Vec<usize>> {
    if let DecodeMode::Sample { temperature, .. } = mode {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::contract(format!(
                "sampling temperature must be positive, got {temperature}"
            )));
        }
    }
    let mut rng = match mode {
        DecodeMode::Sample { seed, .. } => Some(rng::stream(seed, &[0xDEC0])),
        DecodeMode::Greedy => None,
    };
    let mut tokens = seq.text.clone();
    let mut generated = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let out = forward_tokens(ckpt, &seq.visual, &tokens, edit)?;
        let logits = out.last_logits();
        let next = match (&mode, rng.as_mut()) {
            (DecodeMode::Sample { temperature, .. }, Some(r)) => {
                sample_token(logits, *temperature, r)
            }
            _ => argmax(logits),
        };
        generated.push(next);
        if next == vocab::EOA {
            break;
        }
        tokens.push(next);
    }
    Ok(generated)
}

pub fn decode_greedy(ckpt: &Checkpoint, seq: &MultimodalSequence, max_new: usize) -> Result<Vec<usize>> {
    decode_with(ckpt, seq, &InputEdit::none(), DecodeMode::Greedy, max_new)
}

pub fn decode_sample(
    ckpt: &Checkpoint,
    seq: &MultimodalSequence,
    temperature: f64,
    seed: u64,
    max_new: usize,
) -> Result<Vec<usize>> {
    decode_with(
        ckpt,
        seq,
        &InputEdit::none(),
        DecodeMode::Sample { temperature, seed },
        max_new,
    )
}

/// `exp` of the mean negative log-likelihood of `response` under teacher
/// forcing after the sequence context.
pub fn perplexity_with(
    ckpt: &Checkpoint,
    seq: &MultimodalSequence,
    edit: &InputEdit,
    response: &[usize],
) -> Result<f64> {
    if response.is_empty() {
        return Err(Error::contract("perplexity of an empty response"));
    }
    let mut tokens = seq.text.clone();
    tokens.extend_from_slice(&response[..response.len() - 1]);
    let out = forward_tokens(ckpt, &seq.visual, &tokens, edit)?;
    let logp = out.logits.log_softmax();
    let first = seq.context_len() - 1;
    let nll: f64 = response
        .iter()
        .enumerate()
        .map(|(j, &tok)| -logp.row(first + j)[tok])
        .sum();
    Ok((nll / response.len() as f64).exp())
}

/// Exact match of a generated span against the gold answer.
pub fn is_correct(generated: &[usize], answer: &[usize]) -> bool {
    generated == answer
}

/// Fraction of sequences whose greedy answer matches exactly.
pub fn greedy_accuracy(ckpt: &Checkpoint, seqs: &[MultimodalSequence]) -> Result<f64> {
    accuracy_with(ckpt, seqs, |_| InputEdit::none())
}

/// Greedy accuracy with a per-sequence edit.
pub fn accuracy_with(
    ckpt: &Checkpoint,
    seqs: &[MultimodalSequence],
    mut edit: impl FnMut(usize) -> InputEdit,
) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::contract("accuracy over an empty task set"));
    }
    let mut correct = 0usize;
    for (i, s) in seqs.iter().enumerate() {
        let answer = s
            .answer
            .as_deref()
            .ok_or_else(|| Error::contract(format!("sequence {i} has no gold answer")))?;
        let out = decode_with(ckpt, s, &edit(i), DecodeMode::Greedy, answer.len())?;
        correct += usize::from(is_correct(&out, answer));
    }
    Ok(correct as f64 / seqs.len() as f64)
}

pub fn perplexity(ckpt: &Checkpoint, seq: &MultimodalSequence, response: &[usize]) -> Result<f64> {
    perplexity_with(ckpt, seq, &InputEdit::none(), response)
}
