//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in creation
//! order, so the node list is already topologically sorted. [`Tape::backward`]
//! walks it once in reverse. Leaves created with [`Tape::leaf`] receive
//! gradients; [`Tape::constant`] nodes and everything computed only from
//! constants are skipped.
//!
//! The tape is cheap to build, and callers rebuild one per optimization step.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor, PROB_FLOOR};

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Embedding { table: usize, ids: Vec<usize> },
    Log(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Transpose(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Rows { a: usize, start: usize },
    ConcatRows(Vec<usize>),
    AddRows { a: usize, b: usize, start: usize },
    SpliceRows { a: usize, rows: Vec<usize> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients of a scalar loss with respect to every grad-enabled node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like it when the loss does not
    /// depend on it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A grad-enabled input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push_arc(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Const, false)
    }

    pub fn constant_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push_arc(value, Op::Const, false)
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::contract("loss was recorded on a different tape"));
        }
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::filled(lv.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, delta: Tensor) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn zeros_like(nodes: &[Node], id: usize) -> Tensor {
    Tensor::zeros(nodes[id].value.shape())
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf | Op::Const => {}
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if nodes[*a].needs_grad {
                let mut da = zeros_like(nodes, *a);
                tensor::gemm_nt_acc(g.data(), bv.data(), da.data_mut(), m, k, n);
                accumulate(grads, nodes, *a, da);
            }
            if nodes[*b].needs_grad {
                let mut db = zeros_like(nodes, *b);
                tensor::gemm_tn_acc(av.data(), g.data(), db.data_mut(), m, k, n);
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            if nodes[*b].needs_grad {
                let bshape = nodes[*b].value.shape();
                if bshape == g.shape() {
                    accumulate(grads, nodes, *b, g.clone());
                } else {
                    // row broadcast: sum over rows
                    let mut db = zeros_like(nodes, *b);
                    let c = g.cols();
                    for r in g.data().chunks(c) {
                        for (d, &v) in db.data_mut().iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    accumulate(grads, nodes, *b, db);
                }
            }
        }
        Op::Mul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            if nodes[*a].needs_grad {
                accumulate(grads, nodes, *a, g.mul(bv).expect("shape checked"));
            }
            if nodes[*b].needs_grad {
                accumulate(grads, nodes, *b, g.mul(av).expect("shape checked"));
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.scale(*s)),
        Op::Gelu(a) => {
            let av = &nodes[*a].value;
            let data = g
                .data()
                .iter()
                .zip(av.data())
                .map(|(&gv, &x)| gv * tensor::gelu_grad(x))
                .collect();
            accumulate(
                grads,
                nodes,
                *a,
                Tensor::new(av.shape().to_vec(), data).expect("same shape"),
            );
        }
        Op::Embedding { table, ids } => {
            let mut dt = zeros_like(nodes, *table);
            for (r, &id) in ids.iter().enumerate() {
                for (d, &v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                    *d += v;
                }
            }
            accumulate(grads, nodes, *table, dt);
        }
        Op::Log(a) => {
            let av = &nodes[*a].value;
            let data = g
                .data()
                .iter()
                .zip(av.data())
                .map(|(&gv, &x)| if x >= PROB_FLOOR { gv / x } else { 0.0 })
                .collect();
            accumulate(
                grads,
                nodes,
                *a,
                Tensor::new(av.shape().to_vec(), data).expect("same shape"),
            );
        }
        Op::Sum(a) => {
            let s = g.data()[0];
            accumulate(grads, nodes, *a, Tensor::filled(nodes[*a].value.shape(), s));
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f64;
            let s = g.data()[0] / n;
            accumulate(grads, nodes, *a, Tensor::filled(nodes[*a].value.shape(), s));
        }
        Op::Reshape(a) => {
            let shape = nodes[*a].value.shape().to_vec();
            accumulate(grads, nodes, *a, g.reshape(&shape).expect("same size"));
        }
        Op::Transpose(a) => accumulate(grads, nodes, *a, g.transpose().expect("matrix")),
        Op::Softmax(a) => {
            let c = out.cols();
            let mut da = zeros_like(nodes, *a);
            for ((dr, gr), yr) in da
                .data_mut()
                .chunks_mut(c)
                .zip(g.data().chunks(c))
                .zip(out.data().chunks(c))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((d, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = y * (gv - dot);
                }
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::LogSoftmax(a) => {
            let c = out.cols();
            let mut da = zeros_like(nodes, *a);
            for ((dr, gr), yr) in da
                .data_mut()
                .chunks_mut(c)
                .zip(g.data().chunks(c))
                .zip(out.data().chunks(c))
            {
                let total: f64 = gr.iter().sum();
                for ((d, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = gv - y.exp() * total;
                }
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gv = &nodes[*gain].value;
            let d = gv.len();
            if nodes[*gain].needs_grad {
                let mut dg = zeros_like(nodes, *gain);
                for (gr, xr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                    for ((o, &a), &b) in dg.data_mut().iter_mut().zip(gr).zip(xr) {
                        *o += a * b;
                    }
                }
                accumulate(grads, nodes, *gain, dg);
            }
            if nodes[*bias].needs_grad {
                let mut db = zeros_like(nodes, *bias);
                for gr in g.data().chunks(d) {
                    for (o, &a) in db.data_mut().iter_mut().zip(gr) {
                        *o += a;
                    }
                }
                accumulate(grads, nodes, *bias, db);
            }
            if nodes[*x].needs_grad {
                let mut dx = zeros_like(nodes, *x);
                let mut dxhat = vec![0.0; d];
                for (r, ((dr, gr), xr)) in dx
                    .data_mut()
                    .chunks_mut(d)
                    .zip(g.data().chunks(d))
                    .zip(xhat.chunks(d))
                    .enumerate()
                {
                    for ((o, &a), &w) in dxhat.iter_mut().zip(gr).zip(gv.data()) {
                        *o = a * w;
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for ((o, &dh), &xh) in dr.iter_mut().zip(&dxhat).zip(xr) {
                        *o = rstd[r] * (dh - mean_d - xh * mean_dx);
                    }
                }
                accumulate(grads, nodes, *x, dx);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        } => {
            let (dq, dk, dv) = attention_backward(
                &nodes[*q].value,
                &nodes[*k].value,
                &nodes[*v].value,
                *heads,
                probs,
                g,
            );
            accumulate(grads, nodes, *q, dq);
            accumulate(grads, nodes, *k, dk);
            accumulate(grads, nodes, *v, dv);
        }
        Op::Rows { a, start } => {
            let mut da = zeros_like(nodes, *a);
            let c = g.cols();
            da.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
            accumulate(grads, nodes, *a, da);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                let piece = Tensor::new(
                    nodes[p].value.shape().to_vec(),
                    g.data()[offset..offset + n].to_vec(),
                )
                .expect("same size");
                accumulate(grads, nodes, p, piece);
                offset += n;
            }
        }
        Op::AddRows { a, b, start } => {
            accumulate(grads, nodes, *a, g.clone());
            if nodes[*b].needs_grad {
                let bv = &nodes[*b].value;
                let c = g.cols();
                let slice = g.data()[start * c..start * c + bv.len()].to_vec();
                accumulate(
                    grads,
                    nodes,
                    *b,
                    Tensor::new(bv.shape().to_vec(), slice).expect("same size"),
                );
            }
        }
        Op::SpliceRows { a, rows } => {
            let mut da = g.clone();
            for &r in rows {
                da.row_mut(r).fill(0.0);
            }
            accumulate(grads, nodes, *a, da);
        }
    }
}

/// Causal multi-head attention forward. Returns the output and the
/// per-head attention probabilities `[heads × T × T]` (zero above the
/// diagonal).
pub(crate) fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
) -> (Tensor, Vec<f64>) {
    let t = q.shape()[0];
    let d = q.shape()[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; heads * t * t];
    let mut out = Tensor::zeros(&[t, d]);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let prow = &mut probs[(h * t + i) * t..(h * t + i) * t + i + 1];
            let qi = &qd[i * d + off..i * d + off + dh];
            for (j, p) in prow.iter_mut().enumerate() {
                let kj = &kd[j * d + off..j * d + off + dh];
                *p = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            tensor::softmax_in_place(prow);
            let orow = &mut out.data_mut()[i * d + off..i * d + off + dh];
            for (j, &p) in prow.iter().enumerate() {
                let vj = &vd[j * d + off..j * d + off + dh];
                for (o, &x) in orow.iter_mut().zip(vj) {
                    *o += p * x;
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    probs: &[f64],
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let t = q.shape()[0];
    let d = q.shape()[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor::zeros(&[t, d]);
    let mut dk = Tensor::zeros(&[t, d]);
    let mut dv = Tensor::zeros(&[t, d]);
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), g.data());
    let mut ds = vec![0.0; t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let prow = &probs[(h * t + i) * t..(h * t + i) * t + i + 1];
            let gi = &gd[i * d + off..i * d + off + dh];
            let mut dot = 0.0;
            for (j, &p) in prow.iter().enumerate() {
                let vj = &vd[j * d + off..j * d + off + dh];
                let dp: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                ds[j] = dp;
                dot += p * dp;
                let dvj = &mut dv.data_mut()[j * d + off..j * d + off + dh];
                for (o, &x) in dvj.iter_mut().zip(gi) {
                    *o += p * x;
                }
            }
            for (j, &p) in prow.iter().enumerate() {
                let s = p * (ds[j] - dot) * scale;
                if s == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    dq.data_mut()[i * d + off + c] += s * kd[j * d + off + c];
                    dk.data_mut()[j * d + off + c] += s * qd[i * d + off + c];
                }
            }
        }
    }
    (dq, dk, dv)
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("operands recorded on different tapes"))
        }
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.tape.needs(self.id);
        self.tape.push(value, op, needs)
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.tape.needs(self.id) || self.tape.needs(other.id);
        self.tape.push(value, op, needs)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    /// Elementwise sum; `other` may be a single row broadcast over rows.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let v = self.value().add(&other.value())?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let v = self.value().mul(&other.value())?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let v = self.value().scale(s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn gelu(&self) -> Var<'t> {
        let v = self.value().gelu();
        self.unary(v, Op::Gelu(self.id))
    }

    /// Natural log with inputs clamped at [`PROB_FLOOR`]; clamped entries
    /// receive zero gradient.
    pub fn log(&self) -> Var<'t> {
        let v = self.value().map(|x| x.max(PROB_FLOOR).ln());
        self.unary(v, Op::Log(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let val = self.value();
        let v = Tensor::scalar(val.sum() / val.len() as f64);
        self.unary(v, Op::Mean(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let v = self.value().transpose()?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    pub fn softmax(&self) -> Var<'t> {
        let v = self.value().softmax();
        self.unary(v, Op::Softmax(self.id))
    }

    pub fn log_softmax(&self) -> Var<'t> {
        let v = self.value().log_softmax();
        self.unary(v, Op::LogSoftmax(self.id))
    }

    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(gain)?;
        self.same_tape(bias)?;
        let x = self.value();
        let gv = gain.value();
        let bv = bias.value();
        let out = x.layer_norm(&gv, &bv)?;
        let d = x.cols();
        let mut xhat = Vec::with_capacity(x.len());
        let mut rstds = Vec::with_capacity(x.rows());
        for r in x.data().chunks(d) {
            let (mean, rstd) = tensor::moments(r);
            xhat.extend(r.iter().map(|v| (v - mean) * rstd));
            rstds.push(rstd);
        }
        let needs = [self.id, gain.id, bias.id]
            .iter()
            .any(|&i| self.tape.needs(i));
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd: rstds,
            },
            needs,
        ))
    }

    /// Gathers rows of an embedding table `[V × d]` into `[ids.len() × d]`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        if table.shape().len() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                lhs: table.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (vocab, d) = (table.shape()[0], table.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::contract(format!(
                    "token id {id} out of range for vocabulary of {vocab}"
                )));
            }
            data.extend_from_slice(table.row(id));
        }
        let v = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.unary(
            v,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Causal multi-head attention; `self` is the query matrix `[T × d]`.
    pub fn causal_attention(&self, k: &Var<'t>, v: &Var<'t>, heads: usize) -> Result<Var<'t>> {
        self.same_tape(k)?;
        self.same_tape(v)?;
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.shape().len() != 2 {
            return Err(Error::Shape {
                op: "causal_attention",
                lhs: qv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        if heads == 0 || qv.shape()[1] % heads != 0 {
            return Err(Error::contract(format!(
                "width {} not divisible into {heads} heads",
                qv.shape()[1]
            )));
        }
        let (out, probs) = attention_forward(&qv, &kv, &vv, heads);
        let needs = [self.id, k.id, v.id].iter().any(|&i| self.tape.needs(i));
        Ok(self.tape.push(
            out,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                heads,
                probs,
            },
            needs,
        ))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape().len() != 2 || start + len > a.shape()[0] {
            return Err(Error::Shape {
                op: "rows",
                lhs: a.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let c = a.cols();
        let v = Tensor::new(vec![len, c], a.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.unary(v, Op::Rows { a: self.id, start }))
    }

    /// Adds `b` (`[n × d]`) onto rows `start..start + n` of `self`.
    pub fn add_rows(&self, b: &Var<'t>, start: usize) -> Result<Var<'t>> {
        self.same_tape(b)?;
        let a = self.value();
        let bv = b.value();
        if a.shape().len() != 2
            || bv.shape().len() != 2
            || a.cols() != bv.cols()
            || start + bv.rows() > a.rows()
        {
            return Err(Error::Shape {
                op: "add_rows",
                lhs: a.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = (*a).clone();
        let c = a.cols();
        for (o, &x) in out.data_mut()[start * c..start * c + bv.len()]
            .iter_mut()
            .zip(bv.data())
        {
            *o += x;
        }
        Ok(self.binary(
            b,
            out,
            Op::AddRows {
                a: self.id,
                b: b.id,
                start,
            },
        ))
    }

    /// Replaces the listed rows with constant values; the replaced rows pass
    /// no gradient back to `self`.
    pub fn splice_rows(&self, replacements: &[(usize, Vec<f64>)]) -> Result<Var<'t>> {
        let a = self.value();
        let mut out = (*a).clone();
        let mut rows = Vec::with_capacity(replacements.len());
        for (r, values) in replacements {
            if *r >= a.rows() || values.len() != a.cols() {
                return Err(Error::Shape {
                    op: "splice_rows",
                    lhs: a.shape().to_vec(),
                    rhs: vec![*r, values.len()],
                });
            }
            out.row_mut(*r).copy_from_slice(values);
            rows.push(*r);
        }
        Ok(self.unary(out, Op::SpliceRows { a: self.id, rows }))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows needs at least one part"))?;
        let c = first.value().cols();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut needs = false;
        for p in parts {
            first.same_tape(p)?;
            let v = p.value();
            if v.shape().len() != 2 || v.cols() != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: first.value().shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
            needs |= first.tape.needs(p.id);
        }
        let v = Tensor::new(vec![rows, c], data)?;
        Ok(first.tape.push(
            v,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            needs,
        ))
    }
}
