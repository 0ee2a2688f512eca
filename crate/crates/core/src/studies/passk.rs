use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::decode::{decode_with, is_correct, DecodeMode};
use crate::model::forward::InputEdit;
use crate::model::task::MultimodalSequence;
use crate::rng;
use crate::tensor::Tensor;

/// Produces one sampled answer for a task from a per-sample seed.
pub trait Sampler {
    fn sample(&self, task: usize, seq: &MultimodalSequence, seed: u64) -> Result<Vec<usize>>;
}

/// Temperature sampling from a checkpoint, optionally with per-task replay
/// tokens.
pub struct ModelSampler<'a> {
    pub ckpt: &'a Checkpoint,
    pub replay: Option<&'a [Tensor]>,
    pub temperature: f64,
    pub max_new: usize,
}

impl Sampler for ModelSampler<'_> {
    fn sample(&self, task: usize, seq: &MultimodalSequence, seed: u64) -> Result<Vec<usize>> {
        let edit = match self.replay {
            Some(xs) => InputEdit::additive(
                xs.get(task)
                    .ok_or_else(|| Error::contract(format!("no replay tokens for task {task}")))?
                    .clone(),
            ),
            None => InputEdit::none(),
        };
        decode_with(
            self.ckpt,
            seq,
            &edit,
            DecodeMode::Sample {
                temperature: self.temperature,
                seed,
            },
            self.max_new,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassKReport {
    pub k: usize,
    /// `correct[t][s]` for task `t`, sample `s`.
    pub correct: Vec<Vec<bool>>,
    /// `pass_at[j]` is Pass@(j+1) over the first `j + 1` samples.
    pub pass_at: Vec<f64>,
}

impl PassKReport {
    pub fn from_correct(correct: Vec<Vec<bool>>) -> Result<Self> {
        let k = correct.first().map_or(0, Vec::len);
        if correct.is_empty() || k == 0 || correct.iter().any(|r| r.len() != k) {
            return Err(Error::contract("Pass@K needs at least one task and K equal-length sample rows"));
        }
        let n = correct.len() as f64;
        let pass_at = (1..=k)
            .map(|kk| correct.iter().filter(|r| r[..kk].iter().any(|&c| c)).count() as f64 / n)
            .collect();
        Ok(Self { k, correct, pass_at })
    }

    pub fn pass(&self, k: usize) -> f64 {
        self.pass_at[k - 1]
    }

    /// Line plot of Pass@K′ against K′ for one or more labelled reports.
    pub fn svg(curves: &[(&str, &PassKReport)]) -> String {
        const W: f64 = 420.0;
        const H: f64 = 280.0;
        const M: f64 = 40.0;
        let kmax = curves.iter().map(|(_, r)| r.k).max().unwrap_or(1).max(2) as f64;
        let px = |k: f64| M + (k - 1.0) / (kmax - 1.0) * (W - 2.0 * M);
        let py = |v: f64| H - M - v * (H - 2.0 * M);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
        );
        let _ = writeln!(
            s,
            "<line x1=\"{M}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/><line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{0}\" stroke=\"black\"/>",
            H - M,
            W - M
        );
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">K</text>", W / 2.0, H - 8.0);
        let _ = writeln!(s, "<text x=\"8\" y=\"{}\">Pass@K</text>", M - 10.0);
        let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
        for (c, (label, r)) in curves.iter().enumerate() {
            let color = colors[c % colors.len()];
            let pts: Vec<String> = r
                .pass_at
                .iter()
                .enumerate()
                .map(|(j, v)| format!("{:.2},{:.2}", px((j + 1) as f64), py(*v)))
                .collect();
            let _ = writeln!(
                s,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
                pts.join(" ")
            );
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{label}</text>",
                W - M - 80.0,
                M + 14.0 * c as f64
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Draws `k` samples per task with seeds derived from `(seed, task,
/// sample)`. Pass@K′ for every K′ ≤ K reads the first K′ samples.
pub fn pass_at_k(
    sampler: &dyn Sampler,
    tasks: &[MultimodalSequence],
    k: usize,
    seed: u64,
) -> Result<PassKReport> {
    if k == 0 {
        return Err(Error::contract("K must be at least 1"));
    }
    if tasks.is_empty() {
        return Err(Error::contract("Pass@K over an empty task set"));
    }
    let mut correct = Vec::with_capacity(tasks.len());
    for (t, seq) in tasks.iter().enumerate() {
        let answer = seq
            .answer
            .as_deref()
            .ok_or_else(|| Error::contract(format!("task {t} has no gold answer")))?;
        let row = (0..k)
            .map(|s| {
                let out = sampler.sample(t, seq, rng::derive_seed(seed, &[t as u64, s as u64]))?;
                Ok(is_correct(&out, answer))
            })
            .collect::<Result<Vec<_>>>()?;
        correct.push(row);
    }
    PassKReport::from_correct(correct)
}
