use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::PairProfile;
use crate::model::checkpoint::Checkpoint;
use crate::model::decode::perplexity;
use crate::model::task::MultimodalSequence;
use crate::model::tuned::ModelPair;
use crate::replay::{low_entropy_mask, Mask, Polarity};
use crate::rng;

/// A fixed response scored under every perturbation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeResponse {
    pub tokens: Vec<usize>,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub scale: f64,
    pub seed: u64,
    /// Mean KL over low-entropy cells, minus the same mean without noise.
    pub kl_shift_low: f64,
    pub kl_shift_high: f64,
    /// Tuned-model perplexity of each probe, in probe order.
    pub perplexities: Vec<f64>,
    pub correct: Vec<bool>,
}

impl PerturbationRecord {
    fn mean_ppl(&self, correct: bool) -> Option<f64> {
        let v: Vec<f64> = self
            .perplexities
            .iter()
            .zip(&self.correct)
            .filter(|(_, &c)| c == correct)
            .map(|(&p, _)| p)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_correct_perplexity(&self) -> Option<f64> {
        self.mean_ppl(true)
    }

    pub fn mean_incorrect_perplexity(&self) -> Option<f64> {
        self.mean_ppl(false)
    }
}

fn mean_over(kl: &[Vec<f64>], mask: &Mask, layers: &[usize]) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for &l in layers {
        for (i, &m) in mask.cells[l].iter().enumerate() {
            if m {
                total += kl[l][i];
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Adds `scale · z`, `z ~ N(0, I)` fixed by `seed`, to every raw visual
/// vector. Scale 0 returns the sequence unchanged.
pub fn perturb_visual(seq: &MultimodalSequence, scale: f64, seed: u64) -> MultimodalSequence {
    let mut out = seq.clone();
    if scale == 0.0 {
        return out;
    }
    let mut r = rng::stream(seed, &[0x0015E]);
    for v in &mut out.visual {
        for x in v.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut r);
            *x += scale * z;
        }
    }
    out
}

/// For each `(scale, seed)`, perturbs the raw visual input of both models,
/// measures the KL shift on base low- and high-entropy cells (layers
/// `1..=L`, mask at `tau` from the clean base profile), and scores every
/// probe response with the tuned model.
pub fn perturbation_sweep(
    tuned: &Checkpoint,
    base: &Checkpoint,
    seq: &MultimodalSequence,
    probes: &[ProbeResponse],
    scales: &[f64],
    seeds: &[u64],
    tau: f64,
) -> Result<Vec<PerturbationRecord>> {
    if probes.is_empty() {
        return Err(Error::contract("perturbation sweep needs probe responses"));
    }
    let pair = ModelPair::new(base.clone(), tuned.clone())?;
    let clean = PairProfile::of_sequence(&pair, seq)?;
    let layers: Vec<usize> = (1..=base.config.layers).collect();
    let low = low_entropy_mask(&clean.base, tau, Polarity::Low)?;
    let high = low_entropy_mask(&clean.base, tau, Polarity::High)?;
    let clean_low = mean_over(&clean.kl, &low, &layers);
    let clean_high = mean_over(&clean.kl, &high, &layers);

    let mut out = Vec::with_capacity(scales.len() * seeds.len());
    for &scale in scales {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::contract(format!("noise scale must be finite and nonnegative, got {scale}")));
        }
        for &seed in seeds {
            let noisy = perturb_visual(seq, scale, seed);
            let p = PairProfile::of_sequence(&pair, &noisy)?;
            let perplexities = probes
                .iter()
                .map(|r| perplexity(tuned, &noisy, &r.tokens))
                .collect::<Result<Vec<_>>>()?;
            out.push(PerturbationRecord {
                scale,
                seed,
                kl_shift_low: mean_over(&p.kl, &low, &layers) - clean_low,
                kl_shift_high: mean_over(&p.kl, &high, &layers) - clean_high,
                perplexities,
                correct: probes.iter().map(|r| r.correct).collect(),
            });
        }
    }
    Ok(out)
}
