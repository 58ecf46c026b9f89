//! Causal CDR3 decoder: pre-norm blocks with rotary self-attention and
//! GEGLU feed-forward, logits tied to the token embedding, optional gated
//! cross-attention onto epitope encoder states.

use std::path::Path;
use std::rc::Rc;

use rand::Rng as _;

use crate::bert::{argmax, with_path, EncodedEpitopes, EpitopeBert};
use crate::error::{invalid, Error, Result};
use crate::nn::checkpoint::{self, Checkpoint, Meta};
use crate::nn::kernels::log_softmax;
use crate::nn::layers::{causal_pad_mask, key_padding_mask};
use crate::nn::train::{batches, eval_loss, optimizer_step};
use crate::nn::glob_match;
use crate::nn::{
    AdamW, AttentionConfig, GegluFfn, Graph, Init, LayerNorm, LogEntry, Mode, MultiHeadAttention, ParamId,
    ParamKind, ParamStore, TrainConfig, Var,
};
use crate::rng::{derive, rng, Rng};
use crate::seqdata::vocab::{decode, is_residue, pad_batch, TokenSequence, Vocabulary, BOS, EOS, PAD, VOCAB_SIZE};

pub const KIND: &str = "cdr3-gpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GptConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
    pub layers: usize,
    pub d_ff: usize,
    /// Longest CDR3 (residues) accepted or generated.
    pub max_len: usize,
    /// Width of the epitope states attended to; 0 when unconditioned.
    pub d_cond: usize,
}

impl GptConfig {
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            d_head: 16,
            layers: 2,
            d_ff: 256,
            max_len: 32,
            d_cond: 0,
        }
    }

    pub fn full() -> Self {
        Self {
            d_model: 768,
            heads: 12,
            d_head: 64,
            layers: 8,
            d_ff: 3072,
            ..Self::desk()
        }
    }

    pub fn conditioned(self, d_cond: usize) -> Self {
        Self { d_cond, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(invalid("decoder dimensions must be positive"));
        }
        if self.d_head == 0 || !self.d_head.is_multiple_of(2) {
            return Err(invalid(format!(
                "rotary attention needs an even head width, got {}",
                self.d_head
            )));
        }
        Ok(())
    }

    /// Same architecture apart from the conditioning adapters.
    pub fn same_base(&self, other: &GptConfig) -> bool {
        self.conditioned(0) == other.conditioned(0)
    }

    pub fn write_meta(&self, meta: &mut Meta) {
        let mut put = |k: &str, v: String| {
            meta.insert(k.to_string(), v);
        };
        put("kind", KIND.into());
        put("d_model", self.d_model.to_string());
        put("heads", self.heads.to_string());
        put("d_head", self.d_head.to_string());
        put("layers", self.layers.to_string());
        put("d_ff", self.d_ff.to_string());
        put("max_len", self.max_len.to_string());
        put("d_cond", self.d_cond.to_string());
        put("vocab_size", VOCAB_SIZE.to_string());
        put("vocab", format!("{:016x}", Vocabulary::new().fingerprint()));
    }

    pub fn from_meta(ck: &Checkpoint) -> Result<Self> {
        ck.expect_meta("kind", KIND)?;
        ck.expect_meta("vocab_size", &VOCAB_SIZE.to_string())?;
        ck.expect_meta("vocab", &format!("{:016x}", Vocabulary::new().fingerprint()))?;
        Ok(Self {
            d_model: ck.meta_parse("d_model")?,
            heads: ck.meta_parse("heads")?,
            d_head: ck.meta_parse("d_head")?,
            layers: ck.meta_parse("layers")?,
            d_ff: ck.meta_parse("d_ff")?,
            max_len: ck.meta_parse("max_len")?,
            d_cond: ck.meta_parse("d_cond")?,
        })
    }

    /// Fails with the first differing dimension.
    pub fn expect(&self, found: &GptConfig) -> Result<()> {
        let pairs = [
            ("d_model", self.d_model, found.d_model),
            ("heads", self.heads, found.heads),
            ("d_head", self.d_head, found.d_head),
            ("layers", self.layers, found.layers),
            ("d_ff", self.d_ff, found.d_ff),
            ("max_len", self.max_len, found.max_len),
            ("d_cond", self.d_cond, found.d_cond),
        ];
        for (name, e, f) in pairs {
            if e != f {
                return Err(Error::Mismatch {
                    dimension: name.into(),
                    expected: e.to_string(),
                    found: f.to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Parameter-name patterns held fixed during conditional fine-tuning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezePolicy {
    pub patterns: Vec<String>,
}

impl FreezePolicy {
    /// Token embedding, embedding norm and the lower half of the blocks'
    /// self-attention and feed-forward sublayers.
    pub fn default_for(cfg: &GptConfig) -> Self {
        let mut patterns = vec!["gpt.tok_emb".to_string(), "gpt.emb_ln.*".to_string()];
        for i in 0..cfg.layers / 2 {
            for part in ["ln1", "attn", "ln2", "ffn"] {
                patterns.push(format!("gpt.block{i}.{part}.*"));
            }
        }
        Self { patterns }
    }

    /// Everything except the cross-attention adapters.
    pub fn adapters_only() -> Self {
        let mut patterns = vec![
            "gpt.tok_emb".to_string(),
            "gpt.emb_ln.*".to_string(),
            "gpt.final_ln.*".to_string(),
        ];
        for part in ["ln1", "attn", "ln2", "ffn"] {
            patterns.push(format!("gpt.block*.{part}.*"));
        }
        Self { patterns }
    }

    pub fn none() -> Self {
        Self { patterns: vec![] }
    }

    pub fn matches(&self, name: &str) -> bool {
        self.patterns.iter().any(|p| glob_match(p, name))
    }
}

#[derive(Debug, Clone)]
struct Adapter {
    norm: LayerNorm,
    attn: MultiHeadAttention,
    gate: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    cross: Option<Adapter>,
    ln2: LayerNorm,
    ffn: GegluFfn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub max_len: usize,
    pub samples: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(invalid(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_len == 0 || self.samples == 0 {
            return Err(invalid("max_len and samples must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cdr3: String,
    /// Sum of the untempered log-probabilities of the emitted tokens,
    /// the closing `EOS` included when reached.
    pub logprob: f64,
}

/// One draw from `softmax(logits / temperature)` restricted to residues
/// and `EOS`; `temperature == 0` takes the lowest-index maximum.
pub fn sample_token(logits: &[f64], temperature: f64, allow_eos: bool, r: &mut Rng) -> usize {
    let allowed: Vec<usize> = (0..logits.len())
        .filter(|&i| is_residue(i) || (allow_eos && i == EOS))
        .collect();
    let sub: Vec<f64> = allowed.iter().map(|&i| logits[i]).collect();
    if temperature == 0.0 {
        return allowed[argmax(&sub)];
    }
    let scaled: Vec<f64> = sub.iter().map(|v| v / temperature).collect();
    let lp = log_softmax(&scaled);
    let u: f64 = r.gen();
    let mut acc = 0.0;
    for (k, l) in lp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return allowed[k];
        }
    }
    allowed[argmax(&sub)]
}

#[derive(Debug, Clone)]
pub struct CdrGpt {
    pub cfg: GptConfig,
    pub store: ParamStore,
    tok: ParamId,
    emb_ln: LayerNorm,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    pub trained_steps: u64,
}

impl CdrGpt {
    pub fn new(cfg: GptConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::build(cfg, ParamStore::new(), seed))
    }

    pub fn count_parameters(cfg: GptConfig) -> Result<usize> {
        cfg.validate()?;
        Ok(Self::build(cfg, ParamStore::shapes_only(), 0).store.num_parameters())
    }

    fn build(cfg: GptConfig, mut store: ParamStore, seed: u64) -> Self {
        let mut r = rng(seed);
        let d = cfg.d_model;
        let tok = store.add("gpt.tok_emb", &[VOCAB_SIZE, d], ParamKind::Embedding, Init::Normal(0.02), &mut r);
        let emb_ln = LayerNorm::new(&mut store, "gpt.emb_ln", d, &mut r);
        let acfg = AttentionConfig {
            d_model: d,
            heads: cfg.heads,
            d_head: cfg.d_head,
        };
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = format!("gpt.block{i}");
                let ln1 = LayerNorm::new(&mut store, &format!("{p}.ln1"), d, &mut r);
                let attn = MultiHeadAttention::new(&mut store, &format!("{p}.attn"), acfg, d, true, &mut r);
                let cross = (cfg.d_cond > 0).then(|| Adapter {
                    norm: LayerNorm::new(&mut store, &format!("{p}.cross_ln"), d, &mut r),
                    attn: MultiHeadAttention::new(&mut store, &format!("{p}.cross"), acfg, cfg.d_cond, false, &mut r),
                    gate: store.add(&format!("{p}.gate"), &[1], ParamKind::Gate, Init::Zeros, &mut r),
                });
                Block {
                    ln1,
                    attn,
                    cross,
                    ln2: LayerNorm::new(&mut store, &format!("{p}.ln2"), d, &mut r),
                    ffn: GegluFfn::new(&mut store, &format!("{p}.ffn"), d, cfg.d_ff, &mut r),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(&mut store, "gpt.final_ln", d, &mut r);
        Self {
            cfg,
            store,
            tok,
            emb_ln,
            blocks,
            final_ln,
            trained_steps: 0,
        }
    }

    pub fn tok_emb(&self) -> ParamId {
        self.tok
    }

    pub fn is_conditioned(&self) -> bool {
        self.cfg.d_cond > 0
    }

    /// A conditioned copy: base weights carried over, adapters freshly
    /// initialized with zero gates.
    pub fn with_conditioning(&self, d_cond: usize, seed: u64) -> Result<Self> {
        if d_cond == 0 {
            return Err(invalid("conditioning width must be positive"));
        }
        let mut m = Self::new(self.cfg.conditioned(d_cond), seed)?;
        m.store.copy_matching(&self.store)?;
        m.trained_steps = self.trained_steps;
        Ok(m)
    }

    /// Logits `[B, S, V]` for `[batch, width]` ids.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ids: &[usize],
        batch: usize,
        cond: Option<&EncodedEpitopes>,
        mode: &Mode,
    ) -> Result<Var> {
        let s = ids.len() / batch.max(1);
        if batch == 0 || s * batch != ids.len() {
            return Err(invalid("ids do not form a [batch, width] grid"));
        }
        if s > self.cfg.max_len + 2 {
            return Err(invalid(format!(
                "sequence width {s} exceeds {} tokens",
                self.cfg.max_len + 2
            )));
        }
        let valid: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
        let self_mask = causal_pad_mask(&valid, batch);
        let cond = match (cond, self.is_conditioned()) {
            (Some(c), true) => {
                if c.batch != batch || c.d_model() != self.cfg.d_cond {
                    return Err(Error::Mismatch {
                        dimension: "conditioning states".into(),
                        expected: format!("[{batch}, *, {}]", self.cfg.d_cond),
                        found: format!("{:?}", c.states.shape()),
                    });
                }
                let states = g.input(c.states.clone());
                Some((states, key_padding_mask(&valid, &c.valid, batch)))
            }
            (None, _) => None,
            (Some(_), false) => return Err(invalid("model has no conditioning adapters")),
        };
        let tok = g.param(store, self.tok);
        let x = g.embedding(tok, Rc::new(ids.to_vec()), &[batch, s], true)?;
        let x = self.emb_ln.forward(g, store, x)?;
        let mut x = mode.drop(g, x, 0)?;
        for (l, b) in self.blocks.iter().enumerate() {
            let site = 1 + 3 * l as u64;
            let h = b.ln1.forward(g, store, x)?;
            let h = b.attn.forward(g, store, h, h, &self_mask)?;
            let h = mode.drop(g, h, site)?;
            x = g.add(x, h)?;
            if let (Some(a), Some((states, mask))) = (&b.cross, &cond) {
                let h = a.norm.forward(g, store, x)?;
                let h = a.attn.forward(g, store, h, *states, mask)?;
                let h = mode.drop(g, h, site + 1)?;
                let gate = g.param(store, a.gate);
                let h = g.scale_by(h, gate)?;
                x = g.add(x, h)?;
            }
            let h = b.ln2.forward(g, store, x)?;
            let h = b.ffn.forward(g, store, h)?;
            let h = mode.drop(g, h, site + 2)?;
            x = g.add(x, h)?;
        }
        let x = self.final_ln.forward(g, store, x)?;
        g.matmul_bt(x, tok)
    }

    fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ids: &[usize],
        batch: usize,
        cond: Option<&EncodedEpitopes>,
        mode: &Mode,
    ) -> Result<Var> {
        let logits = self.forward(g, store, ids, batch, cond, mode)?;
        lm_loss(g, logits, ids, batch)
    }

    /// Teacher-forced loss over a corpus without updates.
    pub fn corpus_loss(&self, corpus: &[TokenSequence], cond: Option<&EncodedEpitopes>) -> Result<f64> {
        let (ids, _) = pad_batch(corpus);
        eval_loss(&self.store, |g, s| {
            self.batch_loss(g, s, &ids, corpus.len(), cond, &Mode::eval())
        })
    }

    /// Causal LM training over BOS/EOS-wrapped sequences. When `cond` is
    /// given, row `i` of it conditions `corpus[i]`.
    pub fn train(
        &mut self,
        corpus: &[TokenSequence],
        cond: Option<&EncodedEpitopes>,
        tc: &TrainConfig,
    ) -> Result<(Vec<LogEntry>, Vec<f64>)> {
        tc.validate()?;
        if corpus.is_empty() {
            return Err(invalid("empty training corpus"));
        }
        if let Some(c) = cond {
            if c.batch != corpus.len() {
                return Err(invalid("one conditioning row per sequence required"));
            }
        }
        let mut opt = AdamW::new(tc.optimizer(tc.total_steps(corpus.len())), &self.store);
        let mut log = Vec::new();
        let mut epochs = Vec::with_capacity(tc.epochs);
        for e in 0..tc.epochs {
            let order = batches(corpus.len(), tc.batch_size, tc.seed, e as u64);
            let mut total = 0.0;
            for idx in &order {
                let rows: Vec<TokenSequence> = idx.iter().map(|&i| corpus[i].clone()).collect();
                let (ids, _) = pad_batch(&rows);
                let sub = cond.map(|c| c.select(idx)).transpose()?;
                let mode = Mode::train(tc.dropout, tc.seed, self.trained_steps);
                let mut store = std::mem::take(&mut self.store);
                let this = &*self;
                let res = optimizer_step(&mut store, &mut opt, tc.clip, |g, s| {
                    this.batch_loss(g, s, &ids, rows.len(), sub.as_ref(), &mode)
                });
                self.store = store;
                let (loss, lr) = res?;
                self.trained_steps += 1;
                log.push(LogEntry {
                    step: self.trained_steps,
                    loss,
                    lr,
                });
                total += loss;
            }
            epochs.push(total / order.len() as f64);
        }
        Ok((log, epochs))
    }

    /// Epitope-conditioned training on `(epitope, cdr3)` pairs. Epitopes
    /// are encoded once by `encoder` at `t = 0`; parameters matching
    /// `policy` stay fixed.
    pub fn finetune_conditional(
        &mut self,
        encoder: &EpitopeBert,
        pairs: &[(TokenSequence, TokenSequence)],
        policy: &FreezePolicy,
        tc: &TrainConfig,
    ) -> Result<(Vec<LogEntry>, Vec<f64>)> {
        if pairs.is_empty() {
            return Err(invalid("no (epitope, CDR3) pairs to fine-tune on"));
        }
        if self.cfg.d_cond != encoder.cfg.d_model {
            return Err(Error::Mismatch {
                dimension: "d_cond".into(),
                expected: encoder.cfg.d_model.to_string(),
                found: self.cfg.d_cond.to_string(),
            });
        }
        let epitopes: Vec<TokenSequence> = pairs.iter().map(|p| p.0.clone()).collect();
        let cdr3s: Vec<TokenSequence> = pairs.iter().map(|p| p.1.clone()).collect();
        let states = encoder.encode_epitopes(&epitopes)?;
        self.store.apply_freeze(&policy.patterns);
        let out = self.train(&cdr3s, Some(&states), tc);
        self.store.set_all_trainable(true);
        out
    }

    /// Samples `sc.samples` CDR3s, conditioned on `cond` (one row) when
    /// given. Row `i` draws from its own stream seeded by `(seed, i)`.
    pub fn generate(&self, cond: Option<&EncodedEpitopes>, sc: &SamplerConfig) -> Result<Vec<Sample>> {
        sc.validate()?;
        let n = sc.samples;
        let limit = sc.max_len.min(self.cfg.max_len);
        let cond = match cond {
            Some(c) if c.batch == 1 => Some(c.select(&vec![0; n])?),
            Some(_) => return Err(invalid("generation takes a single conditioning epitope")),
            None => None,
        };
        let mut rngs: Vec<Rng> = (0..n).map(|i| rng(derive(sc.seed, &[i as u64]))).collect();
        let mut seqs: Vec<Vec<usize>> = vec![vec![BOS]; n];
        let mut logprob = vec![0.0; n];
        let mut done = vec![false; n];
        while done.iter().any(|d| !d) {
            let active: Vec<usize> = (0..n).filter(|&i| !done[i]).collect();
            let width = seqs[active[0]].len();
            let ids: Vec<usize> = active.iter().flat_map(|&i| seqs[i].iter().copied()).collect();
            let sub = cond.as_ref().map(|c| c.select(&active)).transpose()?;
            let mut g = Graph::new();
            let logits = self.forward(&mut g, &self.store, &ids, active.len(), sub.as_ref(), &Mode::eval())?;
            let lt = g.value(logits);
            for (k, &i) in active.iter().enumerate() {
                let row = lt.row(k * width + width - 1);
                let residues = width - 1;
                let next = if residues >= limit {
                    EOS
                } else {
                    sample_token(row, sc.temperature, residues > 0, &mut rngs[i])
                };
                logprob[i] += log_softmax(row)[next];
                seqs[i].push(next);
                if next == EOS {
                    done[i] = true;
                }
            }
        }
        Ok(seqs
            .iter()
            .zip(logprob)
            .map(|(s, lp)| Sample {
                cdr3: decode(&s[1..]),
                logprob: lp,
            })
            .collect())
    }

    pub fn save(&self, dir: &Path, extra: &Meta) -> Result<()> {
        let mut meta = extra.clone();
        self.cfg.write_meta(&mut meta);
        meta.insert("trained_steps".into(), self.trained_steps.to_string());
        checkpoint::save(dir, &self.store, &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = checkpoint::load(dir)?;
        let cfg = GptConfig::from_meta(&ck).map_err(|e| with_path(e, dir))?;
        let mut m = Self::new(cfg, 0)?;
        ck.restore_into(&mut m.store)?;
        m.trained_steps = ck.meta_parse("trained_steps").unwrap_or(0);
        Ok(m)
    }

    /// Loads a checkpoint and requires its base architecture to equal
    /// `expected` (adapters aside).
    pub fn load_expecting(dir: &Path, expected: &GptConfig) -> Result<Self> {
        let m = Self::load(dir)?;
        expected.conditioned(0).expect(&m.cfg.conditioned(0))?;
        Ok(m)
    }
}

/// Shifted next-token cross-entropy averaged over non-pad targets.
pub fn lm_loss(g: &mut Graph, logits: Var, ids: &[usize], batch: usize) -> Result<Var> {
    let s = ids.len() / batch;
    let v = g.shape(logits).last().copied().unwrap_or(0);
    let flat = g.reshape(logits, &[batch * s, v])?;
    let mut targets = vec![PAD; batch * s];
    let mut weights = vec![0.0; batch * s];
    for b in 0..batch {
        for p in 0..s.saturating_sub(1) {
            let (cur, next) = (ids[b * s + p], ids[b * s + p + 1]);
            if cur != PAD && cur != EOS && next != PAD {
                targets[b * s + p] = next;
                weights[b * s + p] = 1.0;
            }
        }
    }
    g.cross_entropy(flat, Rc::new(targets), Rc::new(weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::kernels::{entropy, softmax};
    use crate::seqdata::vocab::{encode, Scheme};

    fn tiny(d_cond: usize) -> CdrGpt {
        let cfg = GptConfig {
            d_model: 16,
            heads: 2,
            d_head: 8,
            layers: 2,
            d_ff: 32,
            max_len: 32,
            d_cond,
        };
        CdrGpt::new(cfg, 4).unwrap()
    }

    #[test]
    fn combined_mask_examples() {
        let m = causal_pad_mask(&[true; 3], 1);
        let forbidden: Vec<(usize, usize)> = (0..9).filter(|&k| m[k]).map(|k| (k / 3, k % 3)).collect();
        assert_eq!(forbidden, vec![(0, 1), (0, 2), (1, 2)]);
        let m = causal_pad_mask(&[true, true, false], 1);
        assert!((0..3).all(|j| m[2 * 3 + j]));
        assert!((0..3).all(|i| m[i * 3 + 2]));
        assert_eq!(causal_pad_mask(&[true], 1), vec![false]);
    }

    #[test]
    fn loss_ignores_pads_and_duplicates() {
        let m = tiny(0);
        let a = encode("CASSF", Scheme::BosEos).unwrap();
        let b = encode("CAW", Scheme::BosEos).unwrap();
        let one = m.corpus_loss(&[a.clone(), b.clone()], None).unwrap();
        let two = m.corpus_loss(&[a.clone(), b.clone(), a.clone(), b.clone()], None).unwrap();
        assert!((one - two).abs() < 1e-12);
        let solo = m.corpus_loss(std::slice::from_ref(&b), None).unwrap();
        let padded = m.corpus_loss(&[TokenSequence::from_ids(b.padded(9))], None).unwrap();
        assert!((solo - padded).abs() < 1e-12);
    }

    #[test]
    fn zero_gates_match_unconditioned() {
        let base = tiny(0);
        let cond = base.with_conditioning(8, 9).unwrap();
        let ids = encode("CASSLG", Scheme::BosEos).unwrap().ids;
        let states = EncodedEpitopes {
            states: crate::nn::Tensor::new(vec![1, 3, 8], (0..24).map(|i| i as f64 * 0.1).collect()).unwrap(),
            valid: vec![true, true, false],
            batch: 1,
            width: 3,
        };
        let mut g = Graph::new();
        let a = base.forward(&mut g, &base.store, &ids, 1, None, &Mode::eval()).unwrap();
        let mut h = Graph::new();
        let b = cond.forward(&mut h, &cond.store, &ids, 1, Some(&states), &Mode::eval()).unwrap();
        assert_eq!(g.value(a).data(), h.value(b).data());
    }

    #[test]
    fn greedy_is_deterministic_and_negative_temperature_fails() {
        let m = tiny(0);
        let sc = SamplerConfig {
            temperature: 0.0,
            max_len: 8,
            samples: 4,
            seed: 1,
        };
        let out = m.generate(None, &sc).unwrap();
        assert!(out.iter().all(|s| s == &out[0]));
        assert!(!out[0].cdr3.is_empty() && out[0].cdr3.len() <= 8);
        let bad = SamplerConfig {
            temperature: -1.0,
            ..sc
        };
        assert!(m.generate(None, &bad).is_err());
    }

    #[test]
    fn temperature_raises_entropy() {
        let mut r = rng(3);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..VOCAB_SIZE).map(|_| r.gen_range(-3.0..3.0)).collect();
            let mut prev = 0.0;
            for tau in [0.1, 0.5, 1.0, 1.5, 3.0] {
                let scaled: Vec<f64> = logits.iter().map(|l| l / tau).collect();
                let h = entropy(&softmax(&scaled));
                assert!(h >= prev - 1e-12);
                prev = h;
            }
        }
    }

    #[test]
    fn tiny_temperature_is_greedy() {
        let mut r = rng(5);
        let logits: Vec<f64> = (0..VOCAB_SIZE).map(|i| (i as f64 * 0.37).sin()).collect();
        let best = sample_token(&logits, 0.0, true, &mut r);
        for _ in 0..10_000 {
            assert_eq!(sample_token(&logits, 1e-6, true, &mut r), best);
        }
    }

    #[test]
    fn samples_only_residues_or_eos() {
        let mut r = rng(6);
        let logits = vec![0.0; VOCAB_SIZE];
        for _ in 0..1000 {
            let t = sample_token(&logits, 1.0, false, &mut r);
            assert!(is_residue(t));
        }
    }
}
