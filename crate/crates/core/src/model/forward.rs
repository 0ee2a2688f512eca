//! Forward pass of the toy multimodal decoder.
//!
//! Layer 0 is the embedded input: visual vectors pass through the linear
//! connector, text tokens through the embedding table, and both receive a
//! learned position embedding. Each block is pre-norm attention followed by
//! a pre-norm GELU MLP. The output head is `softmax(head(final_norm(h)))`,
//! the same map the logit lens applies to intermediate layers.

use serde::{Deserialize, Serialize};

use super::checkpoint::{names, Checkpoint};
use super::config::ModelConfig;
use super::task::MultimodalSequence;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Replaces the hidden state at (`layer`, `position`) before layer
/// `layer + 1` consumes it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splice {
    pub layer: usize,
    pub position: usize,
    pub values: Vec<f64>,
}

/// Test-time edits applied to a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InputEdit {
    /// Added to the layer-0 activations of the visual positions (`[n × d]`).
    pub add_visual: Option<Tensor>,
    pub splices: Vec<Splice>,
}

impl InputEdit {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn additive(x: Tensor) -> Self {
        Self {
            add_visual: Some(x),
            splices: Vec::new(),
        }
    }

    pub fn splices(splices: Vec<Splice>) -> Self {
        Self {
            add_visual: None,
            splices,
        }
    }
}

/// Hidden states `h[l][i]` for `l ∈ 0..=L` over every input position.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    /// One `[T × d_model]` matrix per layer.
    pub layers: Vec<Tensor>,
    pub visual_len: usize,
}

impl ActivationTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn positions(&self) -> usize {
        self.layers.first().map_or(0, Tensor::rows)
    }

    pub fn hidden(&self, layer: usize, position: usize) -> &[f64] {
        self.layers[layer].row(position)
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Next-token logits for every position, `[T × V]`.
    pub logits: Tensor,
    pub trace: ActivationTrace,
}

impl ForwardOutput {
    pub fn last_logits(&self) -> &[f64] {
        self.logits.row(self.logits.rows() - 1)
    }
}

pub(crate) struct BlockWeights<'t> {
    ln1_g: Var<'t>,
    ln1_b: Var<'t>,
    wq: Var<'t>,
    wk: Var<'t>,
    wv: Var<'t>,
    wo: Var<'t>,
    ln2_g: Var<'t>,
    ln2_b: Var<'t>,
    w1: Var<'t>,
    b1: Var<'t>,
    w2: Var<'t>,
    b2: Var<'t>,
}

/// A checkpoint's parameters bound onto a tape.
pub(crate) struct Weights<'t> {
    pub config: ModelConfig,
    tokens: Var<'t>,
    positions: Var<'t>,
    conn_w: Var<'t>,
    conn_b: Var<'t>,
    blocks: Vec<BlockWeights<'t>>,
    final_g: Var<'t>,
    final_b: Var<'t>,
    head_w: Var<'t>,
    head_b: Var<'t>,
    named: Vec<(String, Var<'t>)>,
}

impl<'t> Weights<'t> {
    /// Parameters as constants.
    pub fn frozen(tape: &'t Tape, ckpt: &Checkpoint) -> Self {
        Self::bind(tape, ckpt, false)
    }

    /// Parameters as grad-enabled leaves.
    pub fn trainable(tape: &'t Tape, ckpt: &Checkpoint) -> Self {
        Self::bind(tape, ckpt, true)
    }

    fn bind(tape: &'t Tape, ckpt: &Checkpoint, grad: bool) -> Self {
        let mut named = Vec::new();
        let mut get = |name: &str| {
            let t = ckpt.param(name).clone();
            let v = if grad {
                tape.leaf_shared(t)
            } else {
                tape.constant_shared(t)
            };
            named.push((name.to_string(), v));
            v
        };
        let tokens = get(names::TOKENS);
        let positions = get(names::POSITIONS);
        let conn_w = get(names::CONNECTOR_W);
        let conn_b = get(names::CONNECTOR_B);
        let mut blocks = Vec::with_capacity(ckpt.config.layers);
        for l in 0..ckpt.config.layers {
            let mut p = |n: &str| get(&names::block(l, n));
            blocks.push(BlockWeights {
                ln1_g: p("ln1.gain"),
                ln1_b: p("ln1.bias"),
                wq: p("attn.wq"),
                wk: p("attn.wk"),
                wv: p("attn.wv"),
                wo: p("attn.wo"),
                ln2_g: p("ln2.gain"),
                ln2_b: p("ln2.bias"),
                w1: p("mlp.w1"),
                b1: p("mlp.b1"),
                w2: p("mlp.w2"),
                b2: p("mlp.b2"),
            });
        }
        let final_g = get(names::FINAL_GAIN);
        let final_b = get(names::FINAL_BIAS);
        let head_w = get(names::HEAD_W);
        let head_b = get(names::HEAD_B);
        Self {
            config: ckpt.config.clone(),
            tokens,
            positions,
            conn_w,
            conn_b,
            blocks,
            final_g,
            final_b,
            head_w,
            head_b,
            named,
        }
    }

    pub fn named(&self) -> &[(String, Var<'t>)] {
        &self.named
    }

    /// Logit-lens map: `head(final_norm(h))` for every row of `h`.
    pub fn lens_logits(&self, h: &Var<'t>) -> Result<Var<'t>> {
        h.layer_norm(&self.final_g, &self.final_b)?
            .matmul(&self.head_w)?
            .add(&self.head_b)
    }
}

pub(crate) struct TapeForward<'t> {
    pub hidden: Vec<Var<'t>>,
    pub logits: Option<Var<'t>>,
}

pub(crate) fn check_context(
    config: &ModelConfig,
    visual: &[Vec<f64>],
    tokens: &[usize],
) -> Result<()> {
    let t = visual.len() + tokens.len();
    if t == 0 {
        return Err(Error::contract("empty input sequence"));
    }
    if t > config.max_seq {
        return Err(Error::contract(format!(
            "sequence length {t} exceeds max_seq {}",
            config.max_seq
        )));
    }
    if let Some(v) = visual.iter().find(|v| v.len() != config.visual_dim) {
        return Err(Error::Shape {
            op: "visual input",
            lhs: vec![config.visual_dim],
            rhs: vec![v.len()],
        });
    }
    if let Some(&id) = tokens.iter().find(|&&id| id >= config.vocab) {
        return Err(Error::contract(format!(
            "token id {id} out of range for vocabulary of {}",
            config.vocab
        )));
    }
    Ok(())
}

/// Runs the decoder on `tape`. `add_visual`, when given, is added to the
/// layer-0 rows of the visual positions; splices are applied after it.
pub(crate) fn forward_on_tape<'t>(
    tape: &'t Tape,
    w: &Weights<'t>,
    visual: &[Vec<f64>],
    tokens: &[usize],
    add_visual: Option<Var<'t>>,
    splices: &[Splice],
    with_logits: bool,
) -> Result<TapeForward<'t>> {
    let cfg = &w.config;
    check_context(cfg, visual, tokens)?;
    let n = visual.len();
    let t = n + tokens.len();
    for s in splices {
        if s.layer > cfg.layers || s.position >= t || s.values.len() != cfg.d_model {
            return Err(Error::contract(format!(
                "splice at layer {} position {} (width {}) is outside a {}-layer, {}-position, width-{} trace",
                s.layer,
                s.position,
                s.values.len(),
                cfg.layers,
                t,
                cfg.d_model
            )));
        }
    }
    let splices_at = |layer: usize| -> Vec<(usize, Vec<f64>)> {
        splices
            .iter()
            .filter(|s| s.layer == layer)
            .map(|s| (s.position, s.values.clone()))
            .collect()
    };

    let mut parts = Vec::with_capacity(2);
    if n > 0 {
        let raw = tape.constant(Tensor::from_rows(visual)?);
        parts.push(raw.matmul(&w.conn_w)?.add(&w.conn_b)?);
    }
    if !tokens.is_empty() {
        parts.push(w.tokens.embedding(tokens)?);
    }
    let mut h = Var::concat_rows(&parts)?.add(&w.positions.rows(0, t)?)?;
    if let Some(x) = add_visual {
        let xv = x.value();
        if xv.shape() != [n, cfg.d_model] {
            return Err(Error::Shape {
                op: "add_visual",
                lhs: vec![n, cfg.d_model],
                rhs: xv.shape().to_vec(),
            });
        }
        h = h.add_rows(&x, 0)?;
    }
    let sp = splices_at(0);
    if !sp.is_empty() {
        h = h.splice_rows(&sp)?;
    }

    let mut hidden = Vec::with_capacity(cfg.layers + 1);
    hidden.push(h);
    for (l, b) in w.blocks.iter().enumerate() {
        let x = h.layer_norm(&b.ln1_g, &b.ln1_b)?;
        let q = x.matmul(&b.wq)?;
        let k = x.matmul(&b.wk)?;
        let v = x.matmul(&b.wv)?;
        let att = q.causal_attention(&k, &v, cfg.heads)?.matmul(&b.wo)?;
        let a = h.add(&att)?;
        let y = a.layer_norm(&b.ln2_g, &b.ln2_b)?;
        let m = y
            .matmul(&b.w1)?
            .add(&b.b1)?
            .gelu()
            .matmul(&b.w2)?
            .add(&b.b2)?;
        h = a.add(&m)?;
        let sp = splices_at(l + 1);
        if !sp.is_empty() {
            h = h.splice_rows(&sp)?;
        }
        hidden.push(h);
    }
    let logits = if with_logits {
        Some(w.lens_logits(&h)?)
    } else {
        None
    };
    Ok(TapeForward { hidden, logits })
}

/// Inference forward on an explicit context with optional edits.
pub fn forward_tokens(
    ckpt: &Checkpoint,
    visual: &[Vec<f64>],
    tokens: &[usize],
    edit: &InputEdit,
) -> Result<ForwardOutput> {
    let tape = Tape::new();
    let w = Weights::frozen(&tape, ckpt);
    let add = edit.add_visual.clone().map(|x| tape.constant(x));
    let out = forward_on_tape(&tape, &w, visual, tokens, add, &edit.splices, true)?;
    let layers = out.hidden.iter().map(|v| (*v.value()).clone()).collect();
    let logits = (*out.logits.expect("requested").value()).clone();
    Ok(ForwardOutput {
        logits,
        trace: ActivationTrace {
            layers,
            visual_len: visual.len(),
        },
    })
}

/// Forward over the sequence context (visual then text) with optional
/// hidden-state overrides.
pub fn forward_with_trace(
    ckpt: &Checkpoint,
    seq: &MultimodalSequence,
    overrides: &[Splice],
) -> Result<ForwardOutput> {
    forward_tokens(
        ckpt,
        &seq.visual,
        &seq.text,
        &InputEdit::splices(overrides.to_vec()),
    )
}
