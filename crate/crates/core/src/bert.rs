//! Time-conditioned masked encoder for epitopes.
//!
//! Training corrupts a growing prefix of preselected candidate positions
//! as the timestep `t` rises, and reconstructs them through a decoder tied
//! to the token embedding.

use std::path::Path;
use std::rc::Rc;

use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::nn::checkpoint::{self, Checkpoint, Meta};
use crate::nn::layers::key_padding_mask;
use crate::nn::train::{batches, eval_loss, optimizer_step};
use crate::nn::{
    AdamW, AttentionConfig, GegluFfn, Graph, Init, LayerNorm, Linear, LogEntry, Mode, MultiHeadAttention,
    ParamId, ParamKind, ParamStore, Tensor, TrainConfig, Var,
};
use crate::rng::{derive, rng};
use crate::seqdata::sampling::{preselect_corpus, MaskCandidates, P_REF};
use crate::seqdata::vocab::{pad_batch, TokenSequence, Vocabulary, MASK, PAD, VOCAB_SIZE};

pub const KIND: &str = "epitope-bert";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeKind {
    Learned,
    Sinusoidal,
}

impl TimeKind {
    pub fn name(self) -> &'static str {
        match self {
            TimeKind::Learned => "learned",
            TimeKind::Sinusoidal => "sinusoidal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(TimeKind::Learned),
            "sinusoidal" => Ok(TimeKind::Sinusoidal),
            _ => Err(invalid(format!(
                "time embedding must be learned or sinusoidal, got '{s}'"
            ))),
        }
    }
}

/// Linear corruption schedule over `t = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub p_min: f64,
    pub p_max: f64,
}

impl DiffusionSchedule {
    pub fn new(steps: usize, p_min: f64, p_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs T >= 1"));
        }
        if !(p_min > 0.0 && p_min <= p_max && p_max <= 1.0) {
            return Err(invalid(format!(
                "need 0 < P_min <= P_max <= 1, got P_min={p_min} P_max={p_max}"
            )));
        }
        Ok(Self {
            steps,
            p_min,
            p_max,
        })
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(invalid(format!("timestep {t} outside 0..={}", self.steps)));
        }
        Ok(())
    }

    /// `P_min + (P_max - P_min) t / T`.
    pub fn mask_proportion(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        if t == self.steps {
            return Ok(self.p_max);
        }
        Ok(self.p_min + (self.p_max - self.p_min) * t as f64 / self.steps as f64)
    }

    /// Number of the `m` candidates masked at step `t`:
    /// `clamp(round(m p(t) / 0.15), 1, m)`.
    pub fn active_mask_count(&self, m: usize, t: usize) -> Result<usize> {
        if m == 0 {
            return Err(invalid("candidate count must be at least 1"));
        }
        let p = self.mask_proportion(t)?;
        let k = (m as f64 * p / P_REF).round() as usize;
        Ok(k.clamp(1, m))
    }

    /// Mid-level corruption used for validation.
    pub fn t_eval(&self) -> usize {
        self.steps / 2
    }
}

/// Replaces the first `m(t)` candidates with `MASK`. Returns the corrupted
/// ids and the masked positions. Candidate order is the sampling order of
/// the preselection, so masks at larger `t` contain those at smaller `t`.
pub fn corrupt(
    tokens: &TokenSequence,
    candidates: &MaskCandidates,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let k = schedule.active_mask_count(candidates.count(), t)?;
    let mut ids = tokens.ids.clone();
    let masked: Vec<usize> = candidates.positions[..k].to_vec();
    for &p in &masked {
        if p >= ids.len() || ids[p] == PAD {
            return Err(invalid(format!("candidate {p} is not a token position")));
        }
        ids[p] = MASK;
    }
    Ok((ids, masked))
}

/// A padded batch with its masked positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    /// Corrupted ids, row-major `[batch, width]`.
    pub ids: Vec<usize>,
    pub original: Vec<usize>,
    pub batch: usize,
    pub width: usize,
    /// Flat indices `b * width + s` of masked slots.
    pub masked: Vec<usize>,
    pub t: usize,
}

impl MaskedBatch {
    pub fn new(
        seqs: &[&TokenSequence],
        candidates: &[&MaskCandidates],
        t: usize,
        schedule: &DiffusionSchedule,
    ) -> Result<Self> {
        let owned: Vec<TokenSequence> = seqs.iter().map(|s| (*s).clone()).collect();
        let (original, width) = pad_batch(&owned);
        let mut ids = original.clone();
        let mut masked = Vec::new();
        for (b, (s, c)) in seqs.iter().zip(candidates).enumerate() {
            let (_, pos) = corrupt(s, c, t, schedule)?;
            for p in pos {
                ids[b * width + p] = MASK;
                masked.push(b * width + p);
            }
        }
        Ok(Self {
            ids,
            original,
            batch: seqs.len(),
            width,
            masked,
            t,
        })
    }

    pub fn targets(&self) -> Vec<usize> {
        self.masked.iter().map(|&i| self.original[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BertConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub steps: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub time: TimeKind,
}

impl BertConfig {
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            d_head: 16,
            layers: 2,
            d_ff: 256,
            max_len: 32,
            steps: 20,
            p_min: 0.05,
            p_max: 0.45,
            time: TimeKind::Learned,
        }
    }

    pub fn full() -> Self {
        Self {
            d_model: 768,
            heads: 12,
            d_head: 64,
            layers: 12,
            d_ff: 3072,
            steps: 100,
            ..Self::desk()
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.steps, self.p_min, self.p_max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_head == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(invalid("encoder dimensions must be positive"));
        }
        if self.time == TimeKind::Sinusoidal && !self.d_model.is_multiple_of(2) {
            return Err(invalid("sinusoidal time codes need an even d_model"));
        }
        self.schedule().map(|_| ())
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
        put("steps", self.steps.to_string());
        put("p_min", self.p_min.to_string());
        put("p_max", self.p_max.to_string());
        put("time", self.time.name().into());
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
            steps: ck.meta_parse("steps")?,
            p_min: ck.meta_parse("p_min")?,
            p_max: ck.meta_parse("p_max")?,
            time: TimeKind::parse(ck.meta_str("time")?)?,
        })
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ffn: GegluFfn,
    ln2: LayerNorm,
}

/// Encoder hidden states for a batch of clean epitopes.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedEpitopes {
    /// `[batch, width, d_model]`.
    pub states: Tensor,
    /// `batch * width` flags, false at pads.
    pub valid: Vec<bool>,
    pub batch: usize,
    pub width: usize,
}

impl EncodedEpitopes {
    /// Sub-batch of the given rows (repeats allowed), width unchanged.
    pub fn select(&self, rows: &[usize]) -> Result<EncodedEpitopes> {
        let d = self.states.cols();
        let per = self.width * d;
        let mut data = Vec::with_capacity(rows.len() * per);
        let mut valid = Vec::with_capacity(rows.len() * self.width);
        for &r in rows {
            if r >= self.batch {
                return Err(invalid(format!("row {r} outside {} encoded epitopes", self.batch)));
            }
            data.extend_from_slice(&self.states.data()[r * per..(r + 1) * per]);
            valid.extend_from_slice(&self.valid[r * self.width..(r + 1) * self.width]);
        }
        Ok(EncodedEpitopes {
            states: Tensor::new(vec![rows.len(), self.width, d], data)?,
            valid,
            batch: rows.len(),
            width: self.width,
        })
    }

    pub fn d_model(&self) -> usize {
        self.states.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: usize,
}

#[derive(Debug, Clone)]
pub struct EpitopeBert {
    pub cfg: BertConfig,
    pub store: ParamStore,
    tok: ParamId,
    pos: ParamId,
    time: Option<ParamId>,
    layers: Vec<EncoderLayer>,
    decode: Linear,
    /// Optimizer updates applied so far.
    pub trained_steps: u64,
}

/// `sin` on even and `cos` on odd coordinates of `t / 10000^(2i/d)`.
pub fn sinusoid(t: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = j / 2;
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn pad_flags(ids: &[usize]) -> Vec<bool> {
    ids.iter().map(|&i| i != PAD).collect()
}

impl EpitopeBert {
    pub fn new(cfg: BertConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::build(cfg, ParamStore::new(), seed))
    }

    /// Parameter count without allocating values.
    pub fn count_parameters(cfg: BertConfig) -> Result<usize> {
        cfg.validate()?;
        Ok(Self::build(cfg, ParamStore::shapes_only(), 0).store.num_parameters())
    }

    fn build(cfg: BertConfig, mut store: ParamStore, seed: u64) -> Self {
        let mut r = rng(seed);
        let d = cfg.d_model;
        let emb = Init::Normal(0.02);
        let tok = store.add("bert.tok_emb", &[VOCAB_SIZE, d], ParamKind::Embedding, emb, &mut r);
        let pos = store.add("bert.pos_emb", &[cfg.max_len, d], ParamKind::Embedding, emb, &mut r);
        let time = match cfg.time {
            TimeKind::Learned => Some(store.add(
                "bert.time_emb",
                &[cfg.steps + 1, d],
                ParamKind::Embedding,
                emb,
                &mut r,
            )),
            TimeKind::Sinusoidal => None,
        };
        let acfg = AttentionConfig {
            d_model: d,
            heads: cfg.heads,
            d_head: cfg.d_head,
        };
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("bert.layer{i}");
                EncoderLayer {
                    attn: MultiHeadAttention::new(&mut store, &format!("{p}.attn"), acfg, d, false, &mut r),
                    ln1: LayerNorm::new(&mut store, &format!("{p}.ln1"), d, &mut r),
                    ffn: GegluFfn::new(&mut store, &format!("{p}.ffn"), d, cfg.d_ff, &mut r),
                    ln2: LayerNorm::new(&mut store, &format!("{p}.ln2"), d, &mut r),
                }
            })
            .collect();
        let decode = Linear::new(&mut store, "bert.decode", d, d, true, &mut r);
        Self {
            cfg,
            store,
            tok,
            pos,
            time,
            layers,
            decode,
            trained_steps: 0,
        }
    }

    pub fn tok_emb(&self) -> ParamId {
        self.tok
    }

    /// Token + position + time embeddings, pad rows zeroed. `[B, S, D]`.
    pub fn embed_with_time(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ids: &[usize],
        batch: usize,
        t: usize,
    ) -> Result<Var> {
        let s = ids.len() / batch.max(1);
        if batch == 0 || s * batch != ids.len() {
            return Err(invalid("ids do not form a [batch, width] grid"));
        }
        if s > self.cfg.max_len {
            return Err(invalid(format!(
                "sequence width {s} exceeds maximum {}",
                self.cfg.max_len
            )));
        }
        if t > self.cfg.steps {
            return Err(invalid(format!("timestep {t} outside 0..={}", self.cfg.steps)));
        }
        let d = self.cfg.d_model;
        let lead = [batch, s];
        let tok = g.param(store, self.tok);
        let x = g.embedding(tok, Rc::new(ids.to_vec()), &lead, true)?;
        let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..s).collect();
        let pos = g.param(store, self.pos);
        let p = g.embedding(pos, Rc::new(pos_ids), &lead, false)?;
        let x = g.add(x, p)?;
        let te = match self.time {
            Some(id) => {
                let table = g.param(store, id);
                g.embedding(table, Rc::new(vec![t; batch * s]), &lead, false)?
            }
            None => {
                let row = sinusoid(t, d);
                let data: Vec<f64> = (0..batch * s).flat_map(|_| row.iter().copied()).collect();
                g.input(Tensor::new(vec![batch, s, d], data)?)
            }
        };
        let x = g.add(x, te)?;
        let keep: Vec<f64> = ids
            .iter()
            .flat_map(|&i| std::iter::repeat_n(if i == PAD { 0.0 } else { 1.0 }, d))
            .collect();
        g.mul_const(x, Rc::new(keep))
    }

    /// Encoder stack over `[batch, width]` ids at timestep `t`.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ids: &[usize],
        batch: usize,
        t: usize,
        mode: &Mode,
    ) -> Result<Var> {
        let mut x = self.embed_with_time(g, store, ids, batch, t)?;
        x = mode.drop(g, x, 0)?;
        let valid = pad_flags(ids);
        let forbidden = key_padding_mask(&valid, &valid, batch);
        for (l, layer) in self.layers.iter().enumerate() {
            let site = 1 + 2 * l as u64;
            let a = layer.attn.forward(g, store, x, x, &forbidden)?;
            let a = mode.drop(g, a, site)?;
            let r = g.add(x, a)?;
            let h = layer.ln1.forward(g, store, r)?;
            x = layer.ffn.forward_post_norm(g, store, h, &layer.ln2, mode, site + 1)?;
        }
        Ok(x)
    }

    /// Logits `[|masked|, V]` at the masked positions only, decoded through
    /// the token embedding.
    pub fn forward_mlm(&self, g: &mut Graph, store: &ParamStore, batch: &MaskedBatch, mode: &Mode) -> Result<Var> {
        if batch.masked.is_empty() {
            return Err(invalid("no masked positions to predict"));
        }
        let h = self.encode(g, store, &batch.ids, batch.batch, batch.t, mode)?;
        let h = g.reshape(h, &[batch.batch * batch.width, self.cfg.d_model])?;
        let h = g.gather_rows(h, Rc::new(batch.masked.clone()))?;
        let z = self.decode.forward(g, store, h)?;
        let z = g.gelu(z);
        let tok = g.param(store, self.tok);
        g.matmul_bt(z, tok)
    }

    fn masked_loss(&self, g: &mut Graph, store: &ParamStore, batch: &MaskedBatch, mode: &Mode) -> Result<Var> {
        let logits = self.forward_mlm(g, store, batch, mode)?;
        mlm_loss(g, logits, &batch.targets())
    }

    /// One pass over `corpus` in shuffled mini-batches; each step draws its
    /// own timestep uniformly from `0..=T`. Returns the mean step loss.
    pub fn train_epoch(
        &mut self,
        corpus: &[TokenSequence],
        candidates: &[MaskCandidates],
        opt: &mut AdamW,
        tc: &TrainConfig,
        epoch: u64,
        log: &mut Vec<LogEntry>,
    ) -> Result<f64> {
        if corpus.is_empty() {
            return Err(invalid("empty epitope corpus"));
        }
        let schedule = self.cfg.schedule()?;
        let mut total = 0.0;
        let order = batches(corpus.len(), tc.batch_size, tc.seed, epoch);
        for (bi, idx) in order.iter().enumerate() {
            let t = rng(derive(tc.seed, &[0x71e, epoch, bi as u64])).gen_range(0..=schedule.steps);
            let seqs: Vec<&TokenSequence> = idx.iter().map(|&i| &corpus[i]).collect();
            let cands: Vec<&MaskCandidates> = idx.iter().map(|&i| &candidates[i]).collect();
            let batch = MaskedBatch::new(&seqs, &cands, t, &schedule)?;
            let mode = Mode::train(tc.dropout, tc.seed, self.trained_steps);
            let mut store = std::mem::take(&mut self.store);
            let this = &*self;
            let res = optimizer_step(&mut store, opt, tc.clip, |g, s| this.masked_loss(g, s, &batch, &mode));
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
        Ok(total / order.len() as f64)
    }

    /// Full training run; returns the per-step log and per-epoch losses.
    pub fn train(&mut self, corpus: &[TokenSequence], tc: &TrainConfig) -> Result<(Vec<LogEntry>, Vec<f64>)> {
        tc.validate()?;
        if corpus.is_empty() {
            return Err(invalid("empty epitope corpus"));
        }
        let candidates = preselect_corpus(corpus, derive(tc.seed, &[0xca4d]))?;
        let mut opt = AdamW::new(tc.optimizer(tc.total_steps(corpus.len())), &self.store);
        let mut log = Vec::new();
        let mut epochs = Vec::with_capacity(tc.epochs);
        for e in 0..tc.epochs {
            epochs.push(self.train_epoch(corpus, &candidates, &mut opt, tc, e as u64, &mut log)?);
        }
        Ok((log, epochs))
    }

    /// Loss and token accuracy at `t_eval = floor(T/2)` with candidates
    /// fixed by `seed`; the training seed reproduces the training
    /// candidates. No dropout, no updates.
    pub fn validate(&self, corpus: &[TokenSequence], seed: u64) -> Result<Validation> {
        if corpus.is_empty() {
            return Err(invalid("empty validation corpus"));
        }
        let schedule = self.cfg.schedule()?;
        let candidates = preselect_corpus(corpus, derive(seed, &[0xca4d]))?;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut count = 0usize;
        for chunk in (0..corpus.len()).collect::<Vec<_>>().chunks(64) {
            let seqs: Vec<&TokenSequence> = chunk.iter().map(|&i| &corpus[i]).collect();
            let cands: Vec<&MaskCandidates> = chunk.iter().map(|&i| &candidates[i]).collect();
            let batch = MaskedBatch::new(&seqs, &cands, schedule.t_eval(), &schedule)?;
            let targets = batch.targets();
            let mut g = Graph::new();
            let logits = self.forward_mlm(&mut g, &self.store, &batch, &Mode::eval())?;
            let l = mlm_loss(&mut g, logits, &targets)?;
            loss_sum += g.value(l).data()[0] * targets.len() as f64;
            let lt = g.value(logits);
            for (r, &tgt) in targets.iter().enumerate() {
                if argmax(lt.row(r)) == tgt {
                    correct += 1;
                }
            }
            count += targets.len();
        }
        Ok(Validation {
            loss: loss_sum / count as f64,
            accuracy: correct as f64 / count as f64,
            predictions: count,
        })
    }

    /// Final hidden states of clean epitopes (`t = 0`, no masking).
    pub fn encode_epitopes(&self, seqs: &[TokenSequence]) -> Result<EncodedEpitopes> {
        if seqs.is_empty() {
            return Err(invalid("no epitopes to encode"));
        }
        let (ids, width) = pad_batch(seqs);
        let mut g = Graph::new();
        let h = self.encode(&mut g, &self.store, &ids, seqs.len(), 0, &Mode::eval())?;
        Ok(EncodedEpitopes {
            states: g.value(h).clone(),
            valid: pad_flags(&ids),
            batch: seqs.len(),
            width,
        })
    }

    pub fn save(&self, dir: &Path, extra: &Meta) -> Result<()> {
        let mut meta = extra.clone();
        self.cfg.write_meta(&mut meta);
        meta.insert("trained_steps".into(), self.trained_steps.to_string());
        checkpoint::save(dir, &self.store, &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = checkpoint::load(dir)?;
        let cfg = BertConfig::from_meta(&ck).map_err(|e| with_path(e, dir))?;
        let mut model = Self::new(cfg, 0)?;
        ck.restore_into(&mut model.store)?;
        model.trained_steps = ck.meta_parse("trained_steps").unwrap_or(0);
        Ok(model)
    }

    /// Loss at a fixed timestep without updates.
    pub fn loss_at(&self, corpus: &[TokenSequence], t: usize, seed: u64) -> Result<f64> {
        let schedule = self.cfg.schedule()?;
        let candidates = preselect_corpus(corpus, derive(seed, &[0xca4d]))?;
        let seqs: Vec<&TokenSequence> = corpus.iter().collect();
        let cands: Vec<&MaskCandidates> = candidates.iter().collect();
        let batch = MaskedBatch::new(&seqs, &cands, t, &schedule)?;
        eval_loss(&self.store, |g, s| self.masked_loss(g, s, &batch, &Mode::eval()))
    }
}

pub(crate) fn with_path(e: Error, dir: &Path) -> Error {
    match e {
        Error::CorruptCheckpoint { message, .. } => Error::CorruptCheckpoint {
            path: dir.to_path_buf(),
            message,
        },
        other => other,
    }
}

/// Mean cross-entropy over the masked positions.
pub fn mlm_loss(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, Rc::new(targets.to_vec()), Rc::new(vec![1.0; targets.len()]))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqdata::vocab::{encode, Scheme};
    use crate::seqdata::sampling::preselect_mask_candidates;

    fn sched() -> DiffusionSchedule {
        DiffusionSchedule::new(20, 0.05, 0.45).unwrap()
    }

    #[test]
    fn proportion_endpoints() {
        let s = sched();
        assert_eq!(s.mask_proportion(0).unwrap(), 0.05);
        assert_eq!(s.mask_proportion(20).unwrap(), 0.45);
        assert!((s.mask_proportion(10).unwrap() - 0.25).abs() < 1e-15);
        assert!(s.mask_proportion(21).is_err());
    }

    #[test]
    fn active_counts() {
        let s = sched();
        assert_eq!(s.active_mask_count(6, 0).unwrap(), 2);
        assert_eq!(s.active_mask_count(6, 20).unwrap(), 6);
        for t in 0..=20 {
            assert_eq!(s.active_mask_count(1, t).unwrap(), 1);
        }
    }

    #[test]
    fn corruption_is_a_nested_prefix() {
        let s = sched();
        let toks = encode("ACDEFGHIKLMNPQRSTVWYACDEFGHIKLMN", Scheme::Plain).unwrap();
        let c = preselect_mask_candidates(&toks, 9).unwrap();
        let mut prev: Vec<usize> = Vec::new();
        for t in 0..=20 {
            let (ids, m) = corrupt(&toks, &c, t, &s).unwrap();
            assert!(prev.iter().all(|p| m.contains(p)));
            for (i, (&a, &b)) in ids.iter().zip(&toks.ids).enumerate() {
                assert_eq!(a == MASK, m.contains(&i));
                if a != MASK {
                    assert_eq!(a, b);
                }
            }
            prev = m;
        }
        assert_eq!(prev.len(), c.count());
    }

    fn tiny() -> EpitopeBert {
        let cfg = BertConfig {
            d_model: 16,
            heads: 2,
            d_head: 8,
            layers: 1,
            d_ff: 32,
            ..BertConfig::desk()
        };
        EpitopeBert::new(cfg, 1).unwrap()
    }

    #[test]
    fn pad_rows_embed_to_zero() {
        let m = tiny();
        let mut g = Graph::new();
        let x = m.embed_with_time(&mut g, &m.store, &[1, 2, 0, 0], 1, 3).unwrap();
        let v = g.value(x);
        assert!(v.row(2).iter().chain(v.row(3)).all(|&z| z == 0.0));
        assert!(v.row(0).iter().any(|&z| z != 0.0));
    }

    #[test]
    fn too_wide_input_rejected() {
        let m = tiny();
        let mut g = Graph::new();
        assert!(m.embed_with_time(&mut g, &m.store, &[1; 33], 1, 0).is_err());
    }

    #[test]
    fn sinusoidal_variant_has_no_time_table() {
        let cfg = BertConfig {
            time: TimeKind::Sinusoidal,
            ..tiny().cfg
        };
        let m = EpitopeBert::new(cfg, 0).unwrap();
        assert!(m.store.id("bert.time_emb").is_none());
        let a = m.encode_epitopes(&[encode("ACDE", Scheme::Plain).unwrap()]).unwrap();
        assert_eq!(a.states.shape(), &[1, 4, 16]);
    }

    #[test]
    fn logits_shape_and_empty_mask() {
        let m = tiny();
        let toks = encode("ACDEFGHIKLMNPQRSTVWY", Scheme::Plain).unwrap();
        let c = preselect_mask_candidates(&toks, 2).unwrap();
        let b = MaskedBatch::new(&[&toks], &[&c], 20, &m.cfg.schedule().unwrap()).unwrap();
        let mut g = Graph::new();
        let l = m.forward_mlm(&mut g, &m.store, &b, &Mode::eval()).unwrap();
        assert_eq!(g.shape(l), &[3, VOCAB_SIZE]);
        let mut empty = b.clone();
        empty.masked.clear();
        assert!(m.forward_mlm(&mut g, &m.store, &empty, &Mode::eval()).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }
}
