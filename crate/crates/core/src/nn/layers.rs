//! Parameterized building blocks shared by the three models.

use std::rc::Rc;

use crate::error::{shape, Result};
use crate::nn::kernels::dropout_seed;
use crate::nn::{Graph, Init, ParamId, ParamKind, ParamStore, Var};
use crate::rng::Rng;

/// Forward-pass mode: dropout is active only while training.
#[derive(Debug, Clone, Copy)]
pub struct Mode {
    pub training: bool,
    pub dropout: f64,
    pub seed: u64,
    pub step: u64,
}

impl Mode {
    pub fn eval() -> Self {
        Self {
            training: false,
            dropout: 0.0,
            seed: 0,
            step: 0,
        }
    }

    pub fn train(dropout: f64, seed: u64, step: u64) -> Self {
        Self {
            training: true,
            dropout,
            seed,
            step,
        }
    }

    /// Dropout at call site `site`; each site draws its own mask.
    pub fn drop(&self, g: &mut Graph, x: Var, site: u64) -> Result<Var> {
        g.dropout(
            x,
            self.dropout,
            dropout_seed(self.seed, site, self.step),
            self.training,
        )
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let w = store.add(
            &format!("{name}.weight"),
            &[d_in, d_out],
            ParamKind::Weight,
            Init::Xavier {
                fan_in: d_in,
                fan_out: d_out,
            },
            rng,
        );
        let b = bias.then(|| {
            store.add(
                &format!("{name}.bias"),
                &[d_out],
                ParamKind::Bias,
                Init::Zeros,
                rng,
            )
        });
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Self {
        let gain = store.add(&format!("{name}.gain"), &[d], ParamKind::Norm, Init::Ones, rng);
        let bias = store.add(&format!("{name}.bias"), &[d], ParamKind::Norm, Init::Zeros, rng);
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
}

/// Multi-head attention with separate query and key/value streams.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub cfg: AttentionConfig,
    pub rope: bool,
}

impl MultiHeadAttention {
    /// `d_kv` is the width of the key/value source stream.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        d_kv: usize,
        rope: bool,
        rng: &mut Rng,
    ) -> Self {
        assert!(
            !rope || cfg.d_head.is_multiple_of(2),
            "rotary attention needs an even head width"
        );
        let inner = cfg.heads * cfg.d_head;
        Self {
            q: Linear::new(store, &format!("{name}.q"), cfg.d_model, inner, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d_kv, inner, true, rng),
            v: Linear::new(store, &format!("{name}.v"), d_kv, inner, true, rng),
            o: Linear::new(store, &format!("{name}.o"), inner, cfg.d_model, true, rng),
            cfg,
            rope,
        }
    }

    /// `xq: [B, Sq, D]`, `xkv: [B, Sk, Dkv]`, `forbidden: [B, Sq, Sk]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xq: Var,
        xkv: Var,
        forbidden: &[bool],
    ) -> Result<Var> {
        let sq = seq_len(g, xq)?;
        let sk = seq_len(g, xkv)?;
        let q = self.q.forward(g, store, xq)?;
        let k = self.k.forward(g, store, xkv)?;
        let v = self.v.forward(g, store, xkv)?;
        let mut q = g.split_heads(q, self.cfg.heads)?;
        let mut k = g.split_heads(k, self.cfg.heads)?;
        let v = g.split_heads(v, self.cfg.heads)?;
        if self.rope {
            q = g.rope(q, Rc::new((0..sq).collect()))?;
            k = g.rope(k, Rc::new((0..sk).collect()))?;
        }
        let ctx = g.attention(q, k, v, forbidden)?;
        let ctx = g.merge_heads(ctx)?;
        self.o.forward(g, store, ctx)
    }
}

fn seq_len(g: &Graph, x: Var) -> Result<usize> {
    match g.shape(x) {
        &[_, s, _] => Ok(s),
        sh => Err(shape(format!("expected [B, S, D], got {sh:?}"))),
    }
}

/// Gated feed-forward: `GELU(x W_a + b_a) * (x W_b + b_b)` then `W_o`.
#[derive(Debug, Clone)]
pub struct GegluFfn {
    pub a: Linear,
    pub b: Linear,
    pub o: Linear,
}

impl GegluFfn {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, rng: &mut Rng) -> Self {
        Self {
            a: Linear::new(store, &format!("{name}.a"), d, d_ff, true, rng),
            b: Linear::new(store, &format!("{name}.b"), d, d_ff, true, rng),
            o: Linear::new(store, &format!("{name}.o"), d_ff, d, true, rng),
        }
    }

    /// `Y W_o + b_o` without residual or normalization.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let a = self.a.forward(g, store, x)?;
        let a = g.gelu(a);
        let b = self.b.forward(g, store, x)?;
        let y = g.mul(a, b)?;
        self.o.forward(g, store, y)
    }

    /// `LayerNorm(Dropout(Y W_o + b_o) + X)`.
    pub fn forward_post_norm(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        norm: &LayerNorm,
        mode: &Mode,
        site: u64,
    ) -> Result<Var> {
        let y = self.forward(g, store, x)?;
        let y = mode.drop(g, y, site)?;
        let r = g.add(y, x)?;
        norm.forward(g, store, r)
    }
}

/// Two-layer feed-forward with GELU: `GELU(x W_1 + b_1) W_2 + b_2`.
#[derive(Debug, Clone)]
pub struct GeluFfn {
    pub w1: Linear,
    pub w2: Linear,
}

impl GeluFfn {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, rng: &mut Rng) -> Self {
        Self {
            w1: Linear::new(store, &format!("{name}.w1"), d, d_ff, true, rng),
            w2: Linear::new(store, &format!("{name}.w2"), d_ff, d, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.w1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.w2.forward(g, store, h)
    }
}

/// Forbidden-pair mask `[B, S, S]` that only hides pad keys.
pub fn key_padding_mask(valid_q: &[bool], valid_k: &[bool], b: usize) -> Vec<bool> {
    let sq = valid_q.len() / b;
    let sk = valid_k.len() / b;
    let mut m = vec![false; b * sq * sk];
    for bi in 0..b {
        for i in 0..sq {
            for j in 0..sk {
                m[(bi * sq + i) * sk + j] = !valid_k[bi * sk + j];
            }
        }
    }
    m
}

/// Causal mask OR pad mask (pad query rows and pad key columns).
pub fn causal_pad_mask(valid: &[bool], b: usize) -> Vec<bool> {
    let s = valid.len() / b;
    let mut m = vec![false; b * s * s];
    for bi in 0..b {
        for i in 0..s {
            for j in 0..s {
                m[(bi * s + i) * s + j] = j > i || !valid[bi * s + i] || !valid[bi * s + j];
            }
        }
    }
    m
}
