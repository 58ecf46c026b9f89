//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters
//! enter through [`Graph::param`], which caches one node per parameter so
//! a tied matrix used twice is a single node with a single gradient.
//! After [`Graph::backward`], [`Graph::accumulate_into`] adds the
//! parameter gradients into the store.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{invalid, shape, Result};
use crate::nn::kernels::{
    self, attention_with_weights, dims4, gelu_grad_scalar, layer_norm_parts,
    matmul_at_raw, matmul_bt_raw, matmul_raw,
};
use crate::nn::{ParamId, ParamStore, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Vec<f64>>),
    ScaleBy(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Rc<Vec<usize>>,
        zero_pad: bool,
    },
    SplitHeads(Var, usize),
    MergeHeads(Var),
    Rope(Var, Rc<Vec<usize>>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
    },
    Concat(Vec<Var>, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    MeanPool(Var, Rc<Vec<bool>>),
    CrossEntropy {
        logits: Var,
        targets: Rc<Vec<usize>>,
        weights: Rc<Vec<f64>>,
        probs: Vec<f64>,
        total: f64,
    },
    Sum(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (used by gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf, created once per graph. A graph serves one store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// `a [.., k] x b [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.cols() != tb.shape()[0] {
            return Err(shape(format!("matmul {:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let mut s = ta.shape().to_vec();
        *s.last_mut().unwrap() = n;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(s, out)?, Op::MatMul(a, b), ng))
    }

    /// `a [.., k] x b [n, k]^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.cols() != tb.shape()[1] {
            return Err(shape(format!(
                "matmul_bt {:?} x {:?}^T",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[0]);
        let out = matmul_bt_raw(ta.data(), tb.data(), m, k, n);
        let mut s = ta.shape().to_vec();
        *s.last_mut().unwrap() = n;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(s, out)?, Op::MatMulBt(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let s = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(s, data)?, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let s = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(s, data)?, Op::Mul(a, b), ng))
    }

    /// Adds `b [n]` to every row of `x [.., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tx.cols();
        if tb.numel() != n {
            return Err(shape(format!("bias {:?} for width {n}", tb.shape())));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let s = tx.shape().to_vec();
        let ng = self.ng(&[x, b]);
        Ok(self.push(Tensor::new(s, data)?, Op::AddBias(x, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let s = t.shape().to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(s, data).unwrap(), Op::Scale(x, c), ng)
    }

    /// Elementwise product with a constant tensor of the same size.
    pub fn mul_const(&mut self, x: Var, c: Rc<Vec<f64>>) -> Result<Var> {
        let t = self.value(x);
        if c.len() != t.numel() {
            return Err(shape(format!(
                "constant of {} values for {:?}",
                c.len(),
                t.shape()
            )));
        }
        let data = t.data().iter().zip(c.iter()).map(|(a, b)| a * b).collect();
        let s = t.shape().to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(s, data)?, Op::MulConst(x, c), ng))
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape("scale_by expects a one-element tensor"));
        }
        let c = self.value(s).data()[0];
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let sh = t.shape().to_vec();
        let ng = self.ng(&[x, s]);
        Ok(self.push(Tensor::new(sh, data)?, Op::ScaleBy(x, s), ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = kernels::gelu(self.value(x));
        let ng = self.ng(&[x]);
        self.push(t, Op::Gelu(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, xhat, rstd) =
            layer_norm_parts(self.value(x), self.value(gain), self.value(bias))?;
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Looks up rows of `table`; output shape is `lead ++ [d]` where
    /// `lead` multiplies out to `ids.len()`.
    pub fn embedding(
        &mut self,
        table: Var,
        ids: Rc<Vec<usize>>,
        lead: &[usize],
        zero_pad: bool,
    ) -> Result<Var> {
        if lead.iter().product::<usize>() != ids.len() {
            return Err(shape(format!(
                "{} ids cannot fill leading shape {lead:?}",
                ids.len()
            )));
        }
        let e = kernels::embed(&ids, self.value(table), zero_pad)?;
        let mut s = lead.to_vec();
        s.push(e.cols());
        let e = e.reshape(&s)?;
        let ng = self.ng(&[table]);
        Ok(self.push(
            e,
            Op::Embedding {
                table,
                ids,
                zero_pad,
            },
            ng,
        ))
    }

    /// `[B, S, H*d] -> [B, H, S, d]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let t = self.value(x);
        let (b, s, hd) = match t.shape() {
            &[b, s, hd] => (b, s, hd),
            sh => return Err(shape(format!("split_heads expects [B, S, H*d], got {sh:?}"))),
        };
        if heads == 0 || hd % heads != 0 {
            return Err(shape(format!("{hd} not divisible into {heads} heads")));
        }
        let d = hd / heads;
        let mut out = vec![0.0; t.numel()];
        for bi in 0..b {
            for si in 0..s {
                for h in 0..heads {
                    let src = ((bi * s + si) * heads + h) * d;
                    let dst = ((bi * heads + h) * s + si) * d;
                    out[dst..dst + d].copy_from_slice(&t.data()[src..src + d]);
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::new(vec![b, heads, s, d], out)?,
            Op::SplitHeads(x, heads),
            ng,
        ))
    }

    /// `[B, H, S, d] -> [B, S, H*d]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (b, h, s, d) = dims4(t)?;
        let out = merge_heads_raw(t.data(), b, h, s, d);
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::new(vec![b, s, h * d], out)?,
            Op::MergeHeads(x),
            ng,
        ))
    }

    /// Rotary embedding on `[.., S, d]` with one position per sequence slot.
    pub fn rope(&mut self, x: Var, positions: Rc<Vec<usize>>) -> Result<Var> {
        let out = kernels::rope_apply(self.value(x), &positions, false)?;
        let s = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(s, out)?, Op::Rope(x, positions), ng))
    }

    /// Masked scaled dot-product attention; see [`kernels::masked_attention`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, forbidden: &[bool]) -> Result<Var> {
        let (out, probs) =
            attention_with_weights(self.value(q), self.value(k), self.value(v), forbidden)?;
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, probs }, ng))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(shape(format!("concat axis {axis} for {first:?}")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape(format!("concat {first:?} with {s:?}")));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat(parts.to_vec(), axis),
            ng,
        ))
    }

    /// Selects rows of `x` viewed as `[N, d]`; output `[rows.len(), d]`.
    pub fn gather_rows(&mut self, x: Var, rows: Rc<Vec<usize>>) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows.iter() {
            if r >= n {
                return Err(shape(format!("row {r} outside {n} rows")));
            }
            out.extend_from_slice(t.row(r));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], out)?,
            Op::GatherRows(x, rows),
            ng,
        ))
    }

    /// Mean over the valid positions of `x [B, S, d]`; output `[B, d]`.
    pub fn mean_pool(&mut self, x: Var, valid: Rc<Vec<bool>>) -> Result<Var> {
        let t = self.value(x);
        let (b, s, d) = match t.shape() {
            &[b, s, d] => (b, s, d),
            sh => return Err(shape(format!("mean_pool expects [B, S, d], got {sh:?}"))),
        };
        if valid.len() != b * s {
            return Err(shape("mean_pool mask size"));
        }
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let count = (0..s).filter(|&si| valid[bi * s + si]).count();
            if count == 0 {
                return Err(invalid(format!("row {bi} has no positions to pool")));
            }
            let orow = &mut out[bi * d..(bi + 1) * d];
            for si in 0..s {
                if valid[bi * s + si] {
                    for (o, &v) in orow.iter_mut().zip(t.row(bi * s + si)) {
                        *o += v;
                    }
                }
            }
            orow.iter_mut().for_each(|o| *o /= count as f64);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(vec![b, d], out)?, Op::MeanPool(x, valid), ng))
    }

    /// Weighted mean negative log-likelihood of `targets` under
    /// `softmax(logits)`: `-(1/Σw) Σ w_i log p_i[t_i]`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Rc<Vec<usize>>,
        weights: Rc<Vec<f64>>,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (n, v) = (t.rows(), t.cols());
        if targets.len() != n || weights.len() != n {
            return Err(shape(format!(
                "cross_entropy: {n} rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(invalid("cross-entropy over zero valid positions"));
        }
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for r in 0..n {
            if targets[r] >= v {
                return Err(invalid(format!("target {} outside {v} classes", targets[r])));
            }
            let ls = kernels::log_softmax(t.row(r));
            if weights[r] != 0.0 {
                loss -= weights[r] * ls[targets[r]];
            }
            for (p, l) in probs[r * v..(r + 1) * v].iter_mut().zip(ls) {
                *p = l.exp();
            }
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / total),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                total,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Inverted dropout; identity when not training or `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64, training: bool) -> Result<Var> {
        if !training || rate == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid(format!("dropout rate {rate} not in [0, 1)")));
        }
        let mask = kernels::dropout_mask(self.value(x).numel(), rate, seed);
        self.mul_const(x, Rc::new(mask))
    }

    /// Runs the reverse pass from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(invalid("backward on a node that was never recorded"));
        }
        if self.value(loss).numel() != 1 {
            return Err(shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into `store` (frozen ones included).
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.grads.is_empty() {
            return Err(invalid("accumulate before backward"));
        }
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                let p = store.get_mut(id);
                for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (a, b) in existing.iter_mut().zip(delta) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
                if wants(*a) {
                    acc(*a, matmul_bt_raw(g, tb.data(), m, n, k));
                }
                if wants(*b) {
                    acc(*b, matmul_at_raw(ta.data(), g, m, k, n));
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[0]);
                if wants(*a) {
                    acc(*a, matmul_raw(g, tb.data(), m, n, k));
                }
                if wants(*b) {
                    acc(*b, matmul_at_raw(g, ta.data(), m, n, k));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::AddBias(x, b) => {
                acc(*x, g.to_vec());
                if wants(*b) {
                    let n = val(*b).numel();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::MulConst(x, c) => acc(*x, g.iter().zip(c.iter()).map(|(a, b)| a * b).collect()),
            Op::ScaleBy(x, s) => {
                let c = val(*s).data()[0];
                if wants(*x) {
                    acc(*x, g.iter().map(|v| v * c).collect());
                }
                if wants(*s) {
                    let d: f64 = g.iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
                    acc(*s, vec![d]);
                }
            }
            Op::Gelu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x).data())
                    .map(|(gv, &xv)| gv * gelu_grad_scalar(xv))
                    .collect(),
            ),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = val(*x).cols();
                let gd = val(*gain).data();
                if wants(*gain) {
                    let mut gg = vec![0.0; d];
                    for (row, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] += row[c] * hrow[c];
                        }
                    }
                    acc(*gain, gg);
                }
                if wants(*bias) {
                    let mut gb = vec![0.0; d];
                    for row in g.chunks(d) {
                        for c in 0..d {
                            gb[c] += row[c];
                        }
                    }
                    acc(*bias, gb);
                }
                if wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, (row, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let dh: Vec<f64> = row.iter().zip(gd).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            gx[r * d + c] = rstd[r] * (dh[c] - mean_dh - hrow[c] * mean_dhh);
                        }
                    }
                    acc(*x, gx);
                }
            }
            Op::Embedding {
                table,
                ids,
                zero_pad,
            } => {
                let t = val(*table);
                let d = t.cols();
                let mut gt = vec![0.0; t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    if *zero_pad && id == 0 {
                        continue;
                    }
                    for c in 0..d {
                        gt[id * d + c] += g[r * d + c];
                    }
                }
                acc(*table, gt);
            }
            Op::SplitHeads(x, heads) => {
                let (b, h, s, d) = dims4(&node.value)?;
                debug_assert_eq!(h, *heads);
                acc(*x, merge_heads_raw(g, b, h, s, d));
            }
            Op::MergeHeads(x) => {
                let (b, h, s, d) = dims4(val(*x))?;
                let mut out = vec![0.0; g.len()];
                for bi in 0..b {
                    for si in 0..s {
                        for hi in 0..h {
                            let src = ((bi * s + si) * h + hi) * d;
                            let dst = ((bi * h + hi) * s + si) * d;
                            out[dst..dst + d].copy_from_slice(&g[src..src + d]);
                        }
                    }
                }
                acc(*x, out);
            }
            Op::Rope(x, positions) => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                acc(*x, kernels::rope_apply(&gt, positions, true)?);
            }
            Op::Attention { q, k, v, probs } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let (b, h, sq, d) = dims4(tq)?;
                let sk = tk.shape()[2];
                let dv = tv.shape()[3];
                let scale = 1.0 / (d as f64).sqrt();
                let mut gq = vec![0.0; tq.numel()];
                let mut gk = vec![0.0; tk.numel()];
                let mut gv = vec![0.0; tv.numel()];
                let mut dp = vec![0.0; sk];
                for base in 0..b * h {
                    let qb = &tq.data()[base * sq * d..(base + 1) * sq * d];
                    let kb = &tk.data()[base * sk * d..(base + 1) * sk * d];
                    let vb = &tv.data()[base * sk * dv..(base + 1) * sk * dv];
                    for i in 0..sq {
                        let prow = &probs[(base * sq + i) * sk..(base * sq + i + 1) * sk];
                        let go = &g[(base * sq + i) * dv..(base * sq + i + 1) * dv];
                        let mut dot = 0.0;
                        for j in 0..sk {
                            let p = prow[j];
                            if p == 0.0 {
                                dp[j] = 0.0;
                                continue;
                            }
                            let vj = &vb[j * dv..(j + 1) * dv];
                            let gvj = &mut gv[(base * sk + j) * dv..(base * sk + j + 1) * dv];
                            let mut s = 0.0;
                            for c in 0..dv {
                                gvj[c] += p * go[c];
                                s += go[c] * vj[c];
                            }
                            dp[j] = s;
                            dot += p * s;
                        }
                        let qi = &qb[i * d..(i + 1) * d];
                        for j in 0..sk {
                            let p = prow[j];
                            if p == 0.0 {
                                continue;
                            }
                            let ds = p * (dp[j] - dot) * scale;
                            let kj = &kb[j * d..(j + 1) * d];
                            let gqi = &mut gq[(base * sq + i) * d..(base * sq + i + 1) * d];
                            for c in 0..d {
                                gqi[c] += ds * kj[c];
                            }
                            let gkj = &mut gk[(base * sk + j) * d..(base * sk + j + 1) * d];
                            for c in 0..d {
                                gkj[c] += ds * qi[c];
                            }
                        }
                    }
                }
                acc(*q, gq);
                acc(*k, gk);
                acc(*v, gv);
            }
            Op::Concat(parts, axis) => {
                let shape0 = val(parts[0]).shape();
                let outer: usize = shape0[..*axis].iter().product();
                let inner: usize = shape0[axis + 1..].iter().product();
                let chunks: Vec<usize> =
                    parts.iter().map(|p| val(*p).shape()[*axis] * inner).collect();
                let row: usize = chunks.iter().sum();
                for (pi, &p) in parts.iter().enumerate() {
                    if !wants(p) {
                        continue;
                    }
                    let off: usize = chunks[..pi].iter().sum();
                    let mut gp = Vec::with_capacity(outer * chunks[pi]);
                    for o in 0..outer {
                        gp.extend_from_slice(&g[o * row + off..o * row + off + chunks[pi]]);
                    }
                    acc(p, gp);
                }
            }
            Op::GatherRows(x, rows) => {
                let t = val(*x);
                let d = t.cols();
                let mut gx = vec![0.0; t.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..d {
                        gx[r * d + c] += g[k * d + c];
                    }
                }
                acc(*x, gx);
            }
            Op::MeanPool(x, valid) => {
                let t = val(*x);
                let (b, s, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let mut gx = vec![0.0; t.numel()];
                for bi in 0..b {
                    let count = (0..s).filter(|&si| valid[bi * s + si]).count() as f64;
                    for si in 0..s {
                        if valid[bi * s + si] {
                            for c in 0..d {
                                gx[(bi * s + si) * d + c] = g[bi * d + c] / count;
                            }
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                total,
            } => {
                let v = val(*logits).cols();
                let mut gl = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let w = weights[r];
                    if w == 0.0 {
                        continue;
                    }
                    let f = g[0] * w / total;
                    for c in 0..v {
                        gl[r * v + c] = f * probs[r * v + c];
                    }
                    gl[r * v + t] -= f;
                }
                acc(*logits, gl);
            }
            Op::Sum(x) => {
                let n = val(*x).numel();
                acc(*x, vec![g[0]; n]);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn merge_heads_raw(src: &[f64], b: usize, h: usize, s: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for hi in 0..h {
            for si in 0..s {
                let from = ((bi * h + hi) * s + si) * d;
                let to = ((bi * s + si) * h + hi) * d;
                out[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamKind};
    use crate::rng::rng;

    #[test]
    fn linear_sum_gradient_is_row_sum_outer() {
        let mut store = ParamStore::new();
        let mut r = rng(0);
        let w = store.add(
            "w",
            &[3, 2],
            ParamKind::Weight,
            Init::Xavier { fan_in: 3, fan_out: 2 },
            &mut r,
        );
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x);
        let wv = g.param(&store, w);
        let y = g.matmul(xv, wv).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        g.accumulate_into(&mut store).unwrap();
        let col = [0.0, 2.5, 7.0];
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(store.get(w).grad.data()[i * 2 + j], col[i]);
            }
        }
    }

    #[test]
    fn backward_on_unrecorded_node_fails() {
        let mut g = Graph::new();
        assert!(g.backward(Var(3)).is_err());
        assert!(g.accumulate_into(&mut ParamStore::new()).is_err());
    }

    #[test]
    fn tied_parameter_is_one_node() {
        let mut store = ParamStore::new();
        let mut r = rng(0);
        let e = store.add("e", &[4, 2], ParamKind::Embedding, Init::Normal(1.0), &mut r);
        let mut g = Graph::new();
        let a = g.param(&store, e);
        let b = g.param(&store, e);
        assert_eq!(a, b);
    }
}
