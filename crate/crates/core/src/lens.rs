//! Logit-lens projections and the statistics built on them.
//!
//! All logarithms are natural. Probabilities are clamped at [`PROB_FLOOR`]
//! before any log so one-hot versus uniform comparisons stay finite.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::{names, Checkpoint};
use crate::model::forward::{forward_with_trace, ActivationTrace};
use crate::model::task::MultimodalSequence;
use crate::model::tuned::ModelPair;
use crate::tensor::{Tensor, PROB_FLOOR};

const NORMALIZATION_TOL: f64 = 1e-6;

/// `softmax(head(final_norm(h)))` for every row of `h`.
pub fn lens_distributions(ckpt: &Checkpoint, h: &Tensor) -> Result<Tensor> {
    if h.cols() != ckpt.config.d_model {
        return Err(Error::Shape {
            op: "logit_lens",
            lhs: vec![ckpt.config.d_model],
            rhs: h.shape().to_vec(),
        });
    }
    let normed = h.layer_norm(ckpt.param(names::FINAL_GAIN), ckpt.param(names::FINAL_BIAS))?;
    Ok(normed
        .matmul(ckpt.param(names::HEAD_W))?
        .add(ckpt.param(names::HEAD_B))?
        .softmax())
}

/// Lens distribution of a single hidden state.
pub fn logit_lens(ckpt: &Checkpoint, h: &[f64]) -> Result<Vec<f64>> {
    let t = Tensor::new(vec![1, h.len()], h.to_vec())?;
    Ok(lens_distributions(ckpt, &t)?.into_data())
}

fn check_distribution(p: &[f64]) -> Result<()> {
    let total: f64 = p.iter().sum();
    if p.is_empty() || (total - 1.0).abs() > NORMALIZATION_TOL || p.iter().any(|&x| x.is_nan() || x < 0.0) {
        return Err(Error::contract(format!(
            "not a probability vector (length {}, sum {total})",
            p.len()
        )));
    }
    Ok(())
}

pub(crate) fn entropy_of(p: &[f64]) -> f64 {
    let e: f64 = p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.max(PROB_FLOOR).ln())
        .sum();
    e.clamp(0.0, (p.len() as f64).ln())
}

pub(crate) fn kl_of(p: &[f64], q: &[f64]) -> f64 {
    let d: f64 = p
        .iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a.max(PROB_FLOOR).ln() - b.max(PROB_FLOOR).ln()))
        .sum();
    d.max(0.0)
}

/// Shannon entropy `-Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    Ok(entropy_of(p))
}

/// `D_kl(p_base ‖ p_tuned)`.
pub fn kl_divergence(p_base: &[f64], p_tuned: &[f64]) -> Result<f64> {
    if p_base.len() != p_tuned.len() {
        return Err(Error::Shape {
            op: "kl_divergence",
            lhs: vec![p_base.len()],
            rhs: vec![p_tuned.len()],
        });
    }
    check_distribution(p_base)?;
    check_distribution(p_tuned)?;
    Ok(kl_of(p_base, p_tuned))
}

/// Ids of the `k` most probable tokens, most probable first; ties go to the
/// lower id.
pub fn top_k(p: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..p.len()).collect();
    ids.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

/// Lens distributions and entropies for every (layer, position) of a trace.
#[derive(Clone, Debug, PartialEq)]
pub struct LensProfile {
    /// One `[T × V]` matrix per layer.
    pub probs: Vec<Tensor>,
    /// `entropy[l][i]`.
    pub entropy: Vec<Vec<f64>>,
    pub visual_len: usize,
}

impl LensProfile {
    pub fn from_trace(ckpt: &Checkpoint, trace: &ActivationTrace) -> Result<Self> {
        let probs = trace
            .layers
            .iter()
            .map(|h| lens_distributions(ckpt, h))
            .collect::<Result<Vec<_>>>()?;
        let entropy = probs
            .iter()
            .map(|p| (0..p.rows()).map(|i| entropy_of(p.row(i))).collect())
            .collect();
        Ok(Self {
            probs,
            entropy,
            visual_len: trace.visual_len,
        })
    }

    pub fn of_sequence(ckpt: &Checkpoint, seq: &MultimodalSequence) -> Result<Self> {
        let out = forward_with_trace(ckpt, seq, &[])?;
        Self::from_trace(ckpt, &out.trace)
    }

    pub fn layers(&self) -> usize {
        self.probs.len()
    }

    pub fn positions(&self) -> usize {
        self.probs.first().map_or(0, Tensor::rows)
    }

    pub fn dist(&self, layer: usize, position: usize) -> &[f64] {
        self.probs[layer].row(position)
    }

    pub fn top_k(&self, layer: usize, position: usize, k: usize) -> Vec<usize> {
        top_k(self.dist(layer, position), k)
    }

    fn same_dims(&self, other: &LensProfile) -> Result<()> {
        let dims = |p: &LensProfile| {
            vec![
                p.layers(),
                p.positions(),
                p.probs.first().map_or(0, Tensor::cols),
            ]
        };
        if dims(self) != dims(other) {
            return Err(Error::contract(format!(
                "profiles cover different (layers, positions, vocab): {:?} vs {:?}",
                dims(self),
                dims(other)
            )));
        }
        Ok(())
    }
}

/// Base and tuned profiles of one sequence with `kl[l][i] = D_kl(base ‖ tuned)`.
#[derive(Clone, Debug)]
pub struct PairProfile {
    pub base: LensProfile,
    pub tuned: LensProfile,
    pub kl: Vec<Vec<f64>>,
}

impl PairProfile {
    pub fn new(base: LensProfile, tuned: LensProfile) -> Result<Self> {
        base.same_dims(&tuned)?;
        let kl = (0..base.layers())
            .map(|l| {
                (0..base.positions())
                    .map(|i| kl_of(base.dist(l, i), tuned.dist(l, i)))
                    .collect()
            })
            .collect();
        Ok(Self { base, tuned, kl })
    }

    pub fn of_sequence(pair: &ModelPair, seq: &MultimodalSequence) -> Result<Self> {
        Self::new(
            LensProfile::of_sequence(&pair.base, seq)?,
            LensProfile::of_sequence(&pair.tuned, seq)?,
        )
    }

    /// Mean KL over the visual positions of `layers`.
    pub fn mean_visual_kl(&self, layers: impl IntoIterator<Item = usize>) -> f64 {
        let n = self.base.visual_len;
        let (mut total, mut count) = (0.0, 0usize);
        for l in layers {
            total += self.kl[l][..n].iter().sum::<f64>();
            count += n;
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftReport {
    /// `flags[l][i]`: the top-k id sets differ.
    pub flags: Vec<Vec<bool>>,
    pub rate: f64,
}

/// Flags (layer, position) cells whose top-`k` token sets differ.
pub fn top_prediction_shift(base: &LensProfile, tuned: &LensProfile, k: usize) -> Result<ShiftReport> {
    base.same_dims(tuned)?;
    let mut flagged = 0usize;
    let flags: Vec<Vec<bool>> = (0..base.layers())
        .map(|l| {
            (0..base.positions())
                .map(|i| {
                    let mut a = base.top_k(l, i, k);
                    let mut b = tuned.top_k(l, i, k);
                    a.sort_unstable();
                    b.sort_unstable();
                    let shifted = a != b;
                    flagged += usize::from(shifted);
                    shifted
                })
                .collect()
        })
        .collect();
    let cells = base.layers() * base.positions();
    Ok(ShiftReport {
        flags,
        rate: if cells == 0 { 0.0 } else { flagged as f64 / cells as f64 },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Layerwise,
    Global,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatmapSpec {
    pub bins: usize,
    /// Inclusive layer range; `None` covers every layer.
    pub layers: Option<(usize, usize)>,
    pub normalization: Normalization,
}

impl Default for HeatmapSpec {
    fn default() -> Self {
        Self {
            bins: 10,
            layers: None,
            normalization: Normalization::Layerwise,
        }
    }
}

/// Mean KL per (base-entropy percentile bin, layer) over visual positions.
/// Bin 0 holds the lowest base entropies.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Heatmap {
    pub layers: Vec<usize>,
    /// `raw[b][j]` for bin `b` and layer `layers[j]`; `None` marks an empty bin.
    pub raw: Vec<Vec<Option<f64>>>,
    pub normalized: Vec<Vec<Option<f64>>>,
    pub counts: Vec<Vec<usize>>,
    pub normalization: Normalization,
}

pub fn entropy_percentile_heatmap(
    pair: &ModelPair,
    dataset: &[MultimodalSequence],
    spec: &HeatmapSpec,
) -> Result<Heatmap> {
    let profiles = dataset
        .iter()
        .map(|s| PairProfile::of_sequence(pair, s))
        .collect::<Result<Vec<_>>>()?;
    heatmap_from_profiles(&profiles, pair.base.config.layers, spec)
}

/// Heatmap over precomputed pair profiles of a model with `num_layers`
/// blocks.
pub fn heatmap_from_profiles(profiles: &[PairProfile], num_layers: usize, spec: &HeatmapSpec) -> Result<Heatmap> {
    if profiles.is_empty() {
        return Err(Error::contract("heatmap over an empty dataset"));
    }
    if spec.bins < 2 {
        return Err(Error::contract(format!("heatmap needs at least 2 bins, got {}", spec.bins)));
    }
    let (lo, hi) = spec.layers.unwrap_or((0, num_layers));
    if lo > hi || hi > num_layers {
        return Err(Error::contract(format!(
            "layer range {lo}..={hi} outside 0..={num_layers}"
        )));
    }
    let layers: Vec<usize> = (lo..=hi).collect();
    let mut raw = vec![vec![None; layers.len()]; spec.bins];
    let mut counts = vec![vec![0usize; layers.len()]; spec.bins];
    for (j, &l) in layers.iter().enumerate() {
        let mut entries: Vec<(f64, f64)> = profiles
            .iter()
            .flat_map(|p| {
                let n = p.base.visual_len;
                p.base.entropy[l][..n]
                    .iter()
                    .copied()
                    .zip(p.kl[l][..n].iter().copied())
            })
            .collect();
        // A total order on (entropy, kl) makes the binning and the summation
        // order independent of dataset order.
        entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let total = entries.len();
        let mut sums = vec![0.0; spec.bins];
        for (rank, &(_, kl)) in entries.iter().enumerate() {
            let b = rank * spec.bins / total;
            sums[b] += kl;
            counts[b][j] += 1;
        }
        for b in 0..spec.bins {
            if counts[b][j] > 0 {
                raw[b][j] = Some(sums[b] / counts[b][j] as f64);
            }
        }
    }
    let normalized = normalize(&raw, spec.normalization);
    Ok(Heatmap {
        layers,
        raw,
        normalized,
        counts,
        normalization: spec.normalization,
    })
}

fn normalize(raw: &[Vec<Option<f64>>], mode: Normalization) -> Vec<Vec<Option<f64>>> {
    let cols = raw.first().map_or(0, Vec::len);
    let max_of = |cells: &mut dyn Iterator<Item = f64>| cells.fold(0.0f64, f64::max);
    let divisors: Vec<f64> = match mode {
        Normalization::None => vec![1.0; cols],
        Normalization::Layerwise => (0..cols)
            .map(|j| max_of(&mut raw.iter().filter_map(|r| r[j])))
            .collect(),
        Normalization::Global => {
            vec![max_of(&mut raw.iter().flat_map(|r| r.iter().flatten().copied())); cols]
        }
    };
    raw.iter()
        .map(|r| {
            r.iter()
                .zip(&divisors)
                .map(|(c, &m)| c.map(|v| if m > 0.0 { v / m } else { v }))
                .collect()
        })
        .collect()
}

impl Heatmap {
    fn grid_csv(&self, cells: &[Vec<Option<f64>>]) -> String {
        let mut out = String::from("bin");
        for l in &self.layers {
            let _ = write!(out, ",layer_{l}");
        }
        out.push('\n');
        for (b, row) in cells.iter().enumerate() {
            let _ = write!(out, "{b}");
            for c in row {
                match c {
                    Some(v) => {
                        let _ = write!(out, ",{v:e}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn raw_csv(&self) -> String {
        self.grid_csv(&self.raw)
    }

    pub fn normalized_csv(&self) -> String {
        self.grid_csv(&self.normalized)
    }

    /// Grid of the normalized cells, layers left to right and entropy bins
    /// from low (top) to high (bottom). Brighter means larger; empty bins are
    /// hatched grey.
    pub fn to_svg(&self) -> String {
        const CELL: usize = 36;
        const MARGIN: usize = 60;
        let cols = self.layers.len();
        let rows = self.normalized.len();
        let width = MARGIN + cols * CELL + 10;
        let height = MARGIN + rows * CELL + 10;
        let max = self
            .normalized
            .iter()
            .flat_map(|r| r.iter().flatten().copied())
            .fold(0.0f64, f64::max);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
        );
        let _ = writeln!(s, "<text x=\"{MARGIN}\" y=\"14\">mean KL(base || tuned) by base-entropy bin</text>");
        for (j, l) in self.layers.iter().enumerate() {
            let x = MARGIN + j * CELL + CELL / 2;
            let _ = writeln!(s, "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">L{l}</text>", MARGIN - 6);
        }
        for (b, row) in self.normalized.iter().enumerate() {
            let y = MARGIN + b * CELL;
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">bin {b}</text>",
                MARGIN - 6,
                y + CELL / 2 + 4
            );
            for (j, c) in row.iter().enumerate() {
                let x = MARGIN + j * CELL;
                let fill = match c {
                    Some(v) => {
                        let t = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
                        let g = (t * 255.0).round() as u8;
                        format!("rgb({g},{g},{})", g / 2 + 40)
                    }
                    None => "#888".to_string(),
                };
                let _ = writeln!(
                    s,
                    "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{fill}\" stroke=\"#222\"/>"
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }
}
