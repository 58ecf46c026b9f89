//! Forward kernels on plain tensors. The autograd graph calls these and
//! adds the matching reverse passes.

use std::f64::consts::SQRT_2;

use crate::error::{invalid, shape, Result};
use crate::nn::Tensor;
use crate::rng::{derive, rng};

pub const LN_EPS: f64 = 1e-5;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Exact-erf GELU, elementwise.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// `[m, k] x [k, n] -> [m, n]`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `[m, k] x [n, k]^T -> [m, n]`.
pub(crate) fn matmul_bt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `[k, m]^T x [k, n] -> [m, n]`.
pub(crate) fn matmul_at_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `x W + b` over the last dimension of `x`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if w.shape().len() != 2 || x.cols() != w.shape()[0] {
        return Err(shape(format!(
            "linear: input {:?} vs weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (m, k, n) = (x.rows(), x.cols(), w.shape()[1]);
    let mut out = matmul_raw(x.data(), w.data(), m, k, n);
    if let Some(b) = b {
        if b.numel() != n {
            return Err(shape(format!("linear: bias {:?} vs width {n}", b.shape())));
        }
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    let mut s = x.shape().to_vec();
    *s.last_mut().unwrap() = n;
    Tensor::new(s, out)
}

/// Normalizes the last dimension; returns output, normalized input and
/// per-row reciprocal standard deviation.
pub(crate) fn layer_norm_parts(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let d = x.cols();
    if gain.numel() != d || bias.numel() != d {
        return Err(shape(format!(
            "layer_norm: width {d} vs gain {:?} / bias {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    let rows = x.rows();
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            out[r * d + c] = h * gain.data()[c] + bias.data()[c];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, xhat, rstd))
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    layer_norm_parts(x, gain, bias).map(|p| p.0)
}

/// Row lookup. With `zero_pad`, id 0 yields a zero row.
pub fn embed(ids: &[usize], table: &Tensor, zero_pad: bool) -> Result<Tensor> {
    if table.shape().len() != 2 {
        return Err(shape("embedding table must be 2-D"));
    }
    let (v, d) = (table.shape()[0], table.shape()[1]);
    let mut out = vec![0.0; ids.len() * d];
    for (r, &id) in ids.iter().enumerate() {
        if id >= v {
            return Err(invalid(format!("token id {id} outside table of {v} rows")));
        }
        if zero_pad && id == 0 {
            continue;
        }
        out[r * d..(r + 1) * d].copy_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), d], out)
}

/// Inverted-dropout keep mask: entries are `0` or `1 / (1 - rate)`.
pub fn dropout_mask(n: usize, rate: f64, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut r = rng(seed);
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if r.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Seed for one dropout call from `(global seed, layer id, step)`.
pub fn dropout_seed(global: u64, layer: u64, step: u64) -> u64 {
    derive(global, &[layer, step])
}

pub fn dropout(x: &Tensor, rate: f64, seed: u64, training: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid(format!("dropout rate {rate} not in [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.numel(), rate, seed);
    let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn rope_angle(pos: usize, pair: usize, d: usize) -> f64 {
    pos as f64 / 10000f64.powf(2.0 * pair as f64 / d as f64)
}

/// Rotates interleaved pairs `(2i, 2i+1)` of the last dimension of
/// `x: [..., S, d]` by `positions[s] / 10000^(2i/d)`.
pub fn rope_rotate(x: &Tensor, positions: &[usize]) -> Result<Tensor> {
    let out = rope_apply(x, positions, false)?;
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn rope_apply(x: &Tensor, positions: &[usize], inverse: bool) -> Result<Vec<f64>> {
    let dims = x.shape();
    if dims.len() < 2 {
        return Err(shape("rope expects at least [S, d]"));
    }
    let d = dims[dims.len() - 1];
    let s = dims[dims.len() - 2];
    if !d.is_multiple_of(2) {
        return Err(invalid(format!("rope needs an even head width, got {d}")));
    }
    if positions.len() != s {
        return Err(shape(format!(
            "rope: {} positions for sequence length {s}",
            positions.len()
        )));
    }
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = x.data().to_vec();
    for (r, chunk) in out.chunks_mut(d).enumerate() {
        let t = positions[r % s];
        for i in 0..d / 2 {
            let (sin, cos) = rope_angle(t, i, d).sin_cos();
            let sin = sign * sin;
            let (e, o) = (chunk[2 * i], chunk[2 * i + 1]);
            chunk[2 * i] = e * cos - o * sin;
            chunk[2 * i + 1] = e * sin + o * cos;
        }
    }
    Ok(out)
}

/// Scaled dot-product attention over `[B, H, S, d]` inputs.
/// `forbidden` is `[B, Sq, Sk]`, shared across heads. Rows with every key
/// forbidden produce a zero context. Returns context and weights
/// `[B, H, Sq, Sk]`.
pub fn attention_with_weights(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    forbidden: &[bool],
) -> Result<(Tensor, Vec<f64>)> {
    let (b, h, sq, d) = dims4(q)?;
    let (bk, hk, sk, dk) = dims4(k)?;
    let (bv, hv, sv, dv) = dims4(v)?;
    if b != bk || b != bv || h != hk || h != hv || sk != sv || d != dk {
        return Err(shape(format!(
            "attention: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if forbidden.len() != b * sq * sk {
        return Err(shape(format!(
            "attention mask holds {} entries, expected {}",
            forbidden.len(),
            b * sq * sk
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = vec![0.0; b * h * sq * sk];
    let mut out = vec![0.0; b * h * sq * dv];
    let mut logits = vec![0.0; sk];
    for bi in 0..b {
        for hi in 0..h {
            let base = bi * h + hi;
            let qb = &q.data()[base * sq * d..(base + 1) * sq * d];
            let kb = &k.data()[base * sk * d..(base + 1) * sk * d];
            let vb = &v.data()[base * sk * dv..(base + 1) * sk * dv];
            for i in 0..sq {
                let mrow = &forbidden[(bi * sq + i) * sk..(bi * sq + i + 1) * sk];
                let qi = &qb[i * d..(i + 1) * d];
                let mut max = f64::NEG_INFINITY;
                for j in 0..sk {
                    if mrow[j] {
                        logits[j] = f64::NEG_INFINITY;
                        continue;
                    }
                    let kj = &kb[j * d..(j + 1) * d];
                    let l = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    logits[j] = l;
                    max = max.max(l);
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let prow = &mut probs[(base * sq + i) * sk..(base * sq + i + 1) * sk];
                let mut z = 0.0;
                for j in 0..sk {
                    if !mrow[j] {
                        let e = (logits[j] - max).exp();
                        prow[j] = e;
                        z += e;
                    }
                }
                let orow = &mut out[(base * sq + i) * dv..(base * sq + i + 1) * dv];
                for j in 0..sk {
                    if mrow[j] {
                        continue;
                    }
                    prow[j] /= z;
                    let p = prow[j];
                    for (o, &vv) in orow.iter_mut().zip(&vb[j * dv..(j + 1) * dv]) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![b, h, sq, dv], out)?, probs))
}

pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, forbidden: &[bool]) -> Result<Tensor> {
    attention_with_weights(q, k, v, forbidden).map(|r| r.0)
}

pub(crate) fn dims4(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        &[a, b, c, d] => Ok((a, b, c, d)),
        s => Err(shape(format!("expected a 4-D tensor, got {s:?}"))),
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

/// Shannon entropy (nats) of a probability vector; `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}
