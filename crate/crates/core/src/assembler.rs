//! Two-stage full-length chain assembly.
//!
//! Stage 1 classifies V and J genes from a CDR3. Stage 2 is an
//! encoder-decoder that reads `[gene context; CDR3]` and writes the full
//! chain. The same machinery serves both chains.

use std::path::Path;
use std::rc::Rc;

use crate::bert::{argmax, with_path};
use crate::error::{invalid, Error, Result};
use crate::gpt::{lm_loss, sample_token};
use crate::nn::checkpoint::{self, Meta};
use crate::nn::kernels::softmax;
use crate::nn::layers::{causal_pad_mask, key_padding_mask};
use crate::nn::train::{batches, optimizer_step};
use crate::nn::{
    AdamW, AttentionConfig, GeluFfn, Graph, Init, LayerNorm, Linear, LogEntry, Mode, MultiHeadAttention, ParamId,
    ParamKind, ParamStore, Tensor, TrainConfig, Var,
};
use crate::rng::{derive, rng, Rng};
use crate::seqdata::dataset::{Chain, GeneVocab, PairedRecord};
use crate::seqdata::vocab::{decode, encode, pad_batch, Scheme, TokenSequence, Vocabulary, BOS, EOS, PAD, VOCAB_SIZE};

pub const KIND: &str = "tcr-assembler";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssemblerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    /// Encoder layers of the gene predictor.
    pub gene_layers: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_cdr3: usize,
    /// Longest full-length chain, in residues.
    pub max_full: usize,
}

impl AssemblerConfig {
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            d_head: 16,
            d_ff: 256,
            gene_layers: 2,
            enc_layers: 2,
            dec_layers: 2,
            max_cdr3: 32,
            max_full: 160,
        }
    }

    pub fn full() -> Self {
        Self {
            d_model: 512,
            heads: 8,
            d_head: 64,
            d_ff: 2048,
            gene_layers: 4,
            enc_layers: 4,
            dec_layers: 4,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_head == 0 || self.d_ff == 0 {
            return Err(invalid("assembler dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(invalid("gene embeddings split d_model in halves; it must be even"));
        }
        if self.max_cdr3 == 0 || self.max_full == 0 {
            return Err(invalid("maximum lengths must be positive"));
        }
        Ok(())
    }

    fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            heads: self.heads,
            d_head: self.d_head,
        }
    }

    fn entries(&self) -> [(&'static str, usize); 9] {
        [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("gene_layers", self.gene_layers),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("max_cdr3", self.max_cdr3),
            ("max_full", self.max_full),
        ]
    }
}

/// Post-norm encoder layer with a GELU feed-forward.
#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ffn: GeluFfn,
    ln2: LayerNorm,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &AssemblerConfig, r: &mut Rng) -> Self {
        let d = cfg.d_model;
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.attention(), d, false, r),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, r),
            ffn: GeluFfn::new(store, &format!("{name}.ffn"), d, cfg.d_ff, r),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, r),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: &[bool], mode: &Mode, site: u64) -> Result<Var> {
        let a = self.attn.forward(g, store, x, x, mask)?;
        let a = mode.drop(g, a, site)?;
        let r = g.add(x, a)?;
        let h = self.ln1.forward(g, store, r)?;
        let f = self.ffn.forward(g, store, h)?;
        let f = mode.drop(g, f, site + 1)?;
        let r = g.add(h, f)?;
        self.ln2.forward(g, store, r)
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    ln1: LayerNorm,
    cross: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: GeluFfn,
    ln3: LayerNorm,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &AssemblerConfig, r: &mut Rng) -> Self {
        let d = cfg.d_model;
        Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), cfg.attention(), d, false, r),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, r),
            cross: MultiHeadAttention::new(store, &format!("{name}.cross"), cfg.attention(), d, false, r),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, r),
            ffn: GeluFfn::new(store, &format!("{name}.ffn"), d, cfg.d_ff, r),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d, r),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        enc: Var,
        self_mask: &[bool],
        cross_mask: &[bool],
        mode: &Mode,
        site: u64,
    ) -> Result<Var> {
        let a = self.self_attn.forward(g, store, x, x, self_mask)?;
        let a = mode.drop(g, a, site)?;
        let r = g.add(x, a)?;
        let h = self.ln1.forward(g, store, r)?;
        let c = self.cross.forward(g, store, h, enc, cross_mask)?;
        let c = mode.drop(g, c, site + 1)?;
        let r = g.add(h, c)?;
        let h = self.ln2.forward(g, store, r)?;
        let f = self.ffn.forward(g, store, h)?;
        let f = mode.drop(g, f, site + 2)?;
        let r = g.add(h, f)?;
        self.ln3.forward(g, store, r)
    }
}

fn positions(batch: usize, s: usize) -> Rc<Vec<usize>> {
    Rc::new((0..batch).flat_map(|_| 0..s).collect())
}

fn grid(ids: &[usize], batch: usize) -> Result<usize> {
    let s = ids.len() / batch.max(1);
    if batch == 0 || s == 0 || s * batch != ids.len() {
        return Err(invalid("ids do not form a non-empty [batch, width] grid"));
    }
    Ok(s)
}

/// Stage 1: CDR3 encoder with pooled V and J classification heads.
#[derive(Debug, Clone)]
pub struct GenePredictor {
    tok: ParamId,
    pos: ParamId,
    layers: Vec<EncoderLayer>,
    v_head: Linear,
    j_head: Linear,
    max_len: usize,
}

impl GenePredictor {
    fn new(store: &mut ParamStore, cfg: &AssemblerConfig, n_v: usize, n_j: usize, r: &mut Rng) -> Self {
        let d = cfg.d_model;
        let emb = Init::Normal(0.02);
        Self {
            tok: store.add("stage1.tok_emb", &[VOCAB_SIZE, d], ParamKind::Embedding, emb, r),
            pos: store.add("stage1.pos_emb", &[cfg.max_cdr3, d], ParamKind::Embedding, emb, r),
            layers: (0..cfg.gene_layers)
                .map(|i| EncoderLayer::new(store, &format!("stage1.layer{i}"), cfg, r))
                .collect(),
            v_head: Linear::new(store, "stage1.v_head", d, n_v, true, r),
            j_head: Linear::new(store, "stage1.j_head", d, n_j, true, r),
            max_len: cfg.max_cdr3,
        }
    }

    /// Masked mean of the final encoder states over non-pad positions.
    pub fn pooled(&self, g: &mut Graph, store: &ParamStore, ids: &[usize], batch: usize, mode: &Mode) -> Result<Var> {
        let s = grid(ids, batch)?;
        if s > self.max_len {
            return Err(invalid(format!("CDR3 width {s} exceeds maximum {}", self.max_len)));
        }
        let tok = g.param(store, self.tok);
        let x = g.embedding(tok, Rc::new(ids.to_vec()), &[batch, s], true)?;
        let pos = g.param(store, self.pos);
        let p = g.embedding(pos, positions(batch, s), &[batch, s], false)?;
        let mut x = g.add(x, p)?;
        x = mode.drop(g, x, 100)?;
        let valid: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
        let mask = key_padding_mask(&valid, &valid, batch);
        for (l, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x, &mask, mode, 101 + 2 * l as u64)?;
        }
        g.mean_pool(x, Rc::new(valid))
    }

    /// V and J logits, `[B, |V|]` and `[B, |J|]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize], batch: usize, mode: &Mode) -> Result<(Var, Var)> {
        let h = self.pooled(g, store, ids, batch, mode)?;
        Ok((self.v_head.forward(g, store, h)?, self.j_head.forward(g, store, h)?))
    }
}

/// `CE(P_V, y_V) + CE(P_J, y_J)`, each averaged over the batch.
pub fn gene_loss(g: &mut Graph, v_logits: Var, j_logits: Var, y_v: &[usize], y_j: &[usize]) -> Result<Var> {
    let ones = Rc::new(vec![1.0; y_v.len()]);
    let lv = g.cross_entropy(v_logits, Rc::new(y_v.to_vec()), ones.clone())?;
    let lj = g.cross_entropy(j_logits, Rc::new(y_j.to_vec()), ones)?;
    g.add(lv, lj)
}

/// Stage 2: gene-conditioned CDR3-to-chain encoder-decoder.
#[derive(Debug, Clone)]
pub struct Seq2Seq {
    aa: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    e_v: ParamId,
    e_j: ParamId,
    fuse: Linear,
    fuse_ln: LayerNorm,
    enc: Vec<EncoderLayer>,
    dec: Vec<DecoderLayer>,
    out: Linear,
    d: usize,
    max_src: usize,
    max_tgt: usize,
}

impl Seq2Seq {
    fn new(store: &mut ParamStore, cfg: &AssemblerConfig, n_v: usize, n_j: usize, r: &mut Rng) -> Self {
        let d = cfg.d_model;
        let emb = Init::Normal(0.02);
        let max_src = cfg.max_cdr3 + 1;
        let max_tgt = cfg.max_full + 2;
        Self {
            aa: store.add("stage2.aa_emb", &[VOCAB_SIZE, d], ParamKind::Embedding, emb, r),
            enc_pos: store.add("stage2.enc_pos", &[max_src, d], ParamKind::Embedding, emb, r),
            dec_pos: store.add("stage2.dec_pos", &[max_tgt, d], ParamKind::Embedding, emb, r),
            e_v: store.add("stage2.gene_v", &[n_v, d / 2], ParamKind::Embedding, emb, r),
            e_j: store.add("stage2.gene_j", &[n_j, d / 2], ParamKind::Embedding, emb, r),
            fuse: Linear::new(store, "stage2.gene_fuse", d, d, true, r),
            fuse_ln: LayerNorm::new(store, "stage2.gene_ln", d, r),
            enc: (0..cfg.enc_layers)
                .map(|i| EncoderLayer::new(store, &format!("stage2.enc{i}"), cfg, r))
                .collect(),
            dec: (0..cfg.dec_layers)
                .map(|i| DecoderLayer::new(store, &format!("stage2.dec{i}"), cfg, r))
                .collect(),
            out: Linear::new(store, "stage2.out", d, VOCAB_SIZE, true, r),
            d,
            max_src,
            max_tgt,
        }
    }

    /// `LayerNorm(Linear([E_V(v); E_J(j)]))`, one row per example: `[B, d]`.
    pub fn embed_genes(&self, g: &mut Graph, store: &ParamStore, v: &[usize], j: &[usize]) -> Result<Var> {
        let b = v.len();
        let ev = g.param(store, self.e_v);
        let gv = g.embedding(ev, Rc::new(v.to_vec()), &[b], false)?;
        let ej = g.param(store, self.e_j);
        let gj = g.embedding(ej, Rc::new(j.to_vec()), &[b], false)?;
        let cat = g.concat(&[gv, gj], 1)?;
        let h = self.fuse.forward(g, store, cat)?;
        self.fuse_ln.forward(g, store, h)
    }

    /// Encoder over `[g_gene; CDR3]`; returns states `[B, 1 + S, d]` and
    /// the validity flags of the source slots.
    #[allow(clippy::too_many_arguments)]
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cdr3: &[usize],
        batch: usize,
        v: &[usize],
        j: &[usize],
        mode: &Mode,
    ) -> Result<(Var, Vec<bool>)> {
        let s = grid(cdr3, batch)?;
        if s + 1 > self.max_src {
            return Err(invalid(format!("CDR3 width {s} exceeds maximum {}", self.max_src - 1)));
        }
        if v.len() != batch || j.len() != batch {
            return Err(invalid("one V and one J label per example required"));
        }
        let gene = self.embed_genes(g, store, v, j)?;
        let gene = g.reshape(gene, &[batch, 1, self.d])?;
        let aa = g.param(store, self.aa);
        let x = g.embedding(aa, Rc::new(cdr3.to_vec()), &[batch, s], true)?;
        let x = g.concat(&[gene, x], 1)?;
        let pos = g.param(store, self.enc_pos);
        let p = g.embedding(pos, positions(batch, s + 1), &[batch, s + 1], false)?;
        let mut x = g.add(x, p)?;
        x = mode.drop(g, x, 200)?;
        let mut valid = Vec::with_capacity(batch * (s + 1));
        for b in 0..batch {
            valid.push(true);
            valid.extend(cdr3[b * s..(b + 1) * s].iter().map(|&i| i != PAD));
        }
        let mask = key_padding_mask(&valid, &valid, batch);
        for (l, layer) in self.enc.iter().enumerate() {
            x = layer.forward(g, store, x, &mask, mode, 201 + 2 * l as u64)?;
        }
        Ok((x, valid))
    }

    /// Decoder logits `[B, T, V]` for BOS-prefixed targets.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: Var,
        src_valid: &[bool],
        tgt: &[usize],
        batch: usize,
        mode: &Mode,
    ) -> Result<Var> {
        let t = grid(tgt, batch)?;
        if t > self.max_tgt {
            return Err(invalid(format!("target width {t} exceeds {}", self.max_tgt)));
        }
        let aa = g.param(store, self.aa);
        let y = g.embedding(aa, Rc::new(tgt.to_vec()), &[batch, t], true)?;
        let pos = g.param(store, self.dec_pos);
        let p = g.embedding(pos, positions(batch, t), &[batch, t], false)?;
        let mut y = g.add(y, p)?;
        y = mode.drop(g, y, 300)?;
        let valid: Vec<bool> = tgt.iter().map(|&i| i != PAD).collect();
        let self_mask = causal_pad_mask(&valid, batch);
        let cross_mask = key_padding_mask(&valid, src_valid, batch);
        for (l, layer) in self.dec.iter().enumerate() {
            y = layer.forward(g, store, y, enc, &self_mask, &cross_mask, mode, 301 + 3 * l as u64)?;
        }
        self.out.forward(g, store, y)
    }
}

/// One complete training example for a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainExample {
    /// Plain-encoded CDR3.
    pub cdr3: TokenSequence,
    pub v: usize,
    pub j: usize,
    /// BOS/EOS-wrapped full-length chain.
    pub full: TokenSequence,
}

/// Examples for `chain` from records holding all four chain fields and
/// labels known to `genes`. Returns the examples and the number skipped.
pub fn chain_examples(records: &[PairedRecord], chain: Chain, genes: &GeneVocab) -> Result<(Vec<ChainExample>, usize)> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for r in records {
        let Some(view) = r.chain_view(chain) else {
            skipped += 1;
            continue;
        };
        let (Ok(v), Ok(j)) = (genes.v_index(view.v), genes.j_index(view.j)) else {
            skipped += 1;
            continue;
        };
        out.push(ChainExample {
            cdr3: encode(view.cdr3, Scheme::Plain)?,
            v,
            j,
            full: encode(view.full, Scheme::BosEos)?,
        });
    }
    Ok((out, skipped))
}

/// Gene vocabulary from the records that are complete for `chain`.
pub fn gene_vocab(records: &[PairedRecord], chain: Chain) -> GeneVocab {
    let complete: Vec<PairedRecord> = records
        .iter()
        .filter(|r| r.chain_view(chain).is_some())
        .cloned()
        .collect();
    GeneVocab::from_records(&complete, chain)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneProbs {
    pub v: Vec<f64>,
    pub j: Vec<f64>,
}

impl GeneProbs {
    pub fn argmax(&self) -> (usize, usize) {
        (argmax(&self.v), argmax(&self.j))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assembly {
    pub v_gene: String,
    pub j_gene: String,
    pub full: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageReport {
    pub stage1_epochs: Vec<f64>,
    pub stage2_epochs: Vec<f64>,
    /// Stage-1 steps followed by stage-2 steps, numbered continuously.
    pub log: Vec<LogEntry>,
}

#[derive(Debug, Clone)]
pub struct Assembler {
    pub cfg: AssemblerConfig,
    pub chain: Chain,
    pub genes: GeneVocab,
    pub store: ParamStore,
    pub stage1: GenePredictor,
    pub stage2: Seq2Seq,
    pub trained_steps: u64,
}

impl Assembler {
    pub fn new(cfg: AssemblerConfig, chain: Chain, genes: GeneVocab, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if genes.v_labels.is_empty() || genes.j_labels.is_empty() {
            return Err(invalid(format!("no {chain} V/J labels to train on")));
        }
        for l in genes.v_labels.iter().chain(&genes.j_labels) {
            if l.contains([',', '\n', '=']) {
                return Err(invalid(format!("gene label '{l}' contains ',', '=' or a newline")));
            }
        }
        Ok(Self::build(cfg, chain, genes, ParamStore::new(), seed))
    }

    pub fn count_parameters(cfg: AssemblerConfig, n_v: usize, n_j: usize) -> Result<usize> {
        cfg.validate()?;
        let genes = GeneVocab {
            v_labels: (0..n_v).map(|i| i.to_string()).collect(),
            j_labels: (0..n_j).map(|i| i.to_string()).collect(),
        };
        Ok(Self::build(cfg, Chain::Beta, genes, ParamStore::shapes_only(), 0)
            .store
            .num_parameters())
    }

    fn build(cfg: AssemblerConfig, chain: Chain, genes: GeneVocab, mut store: ParamStore, seed: u64) -> Self {
        let mut r = rng(seed);
        let (n_v, n_j) = (genes.v_labels.len(), genes.j_labels.len());
        let stage1 = GenePredictor::new(&mut store, &cfg, n_v, n_j, &mut r);
        let stage2 = Seq2Seq::new(&mut store, &cfg, n_v, n_j, &mut r);
        Self {
            cfg,
            chain,
            genes,
            store,
            stage1,
            stage2,
            trained_steps: 0,
        }
    }

    /// Stage-1 loss on a batch of examples.
    pub fn stage1_loss(&self, g: &mut Graph, store: &ParamStore, ex: &[&ChainExample], mode: &Mode) -> Result<Var> {
        let rows: Vec<TokenSequence> = ex.iter().map(|e| e.cdr3.clone()).collect();
        let (ids, _) = pad_batch(&rows);
        let (lv, lj) = self.stage1.forward(g, store, &ids, ex.len(), mode)?;
        let yv: Vec<usize> = ex.iter().map(|e| e.v).collect();
        let yj: Vec<usize> = ex.iter().map(|e| e.j).collect();
        gene_loss(g, lv, lj, &yv, &yj)
    }

    /// Stage-2 teacher-forced loss with the true genes.
    pub fn stage2_loss(&self, g: &mut Graph, store: &ParamStore, ex: &[&ChainExample], mode: &Mode) -> Result<Var> {
        let cdr3: Vec<TokenSequence> = ex.iter().map(|e| e.cdr3.clone()).collect();
        let full: Vec<TokenSequence> = ex.iter().map(|e| e.full.clone()).collect();
        let (src, _) = pad_batch(&cdr3);
        let (tgt, _) = pad_batch(&full);
        let v: Vec<usize> = ex.iter().map(|e| e.v).collect();
        let j: Vec<usize> = ex.iter().map(|e| e.j).collect();
        let (enc, valid) = self.stage2.encode(g, store, &src, ex.len(), &v, &j, mode)?;
        let logits = self.stage2.decode(g, store, enc, &valid, &tgt, ex.len(), mode)?;
        lm_loss(g, logits, &tgt, ex.len())
    }

    fn run_stage(
        &mut self,
        examples: &[ChainExample],
        tc: &TrainConfig,
        stage: u8,
        log: &mut Vec<LogEntry>,
    ) -> Result<Vec<f64>> {
        let (own, other) = if stage == 1 { ("stage1.*", "stage2.*") } else { ("stage2.*", "stage1.*") };
        debug_assert!(own != other);
        self.store.apply_freeze(&[other.to_string()]);
        let mut opt = AdamW::new(tc.optimizer(tc.total_steps(examples.len())), &self.store);
        let seed = derive(tc.seed, &[stage as u64]);
        let mut epochs = Vec::with_capacity(tc.epochs);
        let mut result = Ok(());
        for e in 0..tc.epochs {
            let mut total = 0.0;
            let order = batches(examples.len(), tc.batch_size, seed, e as u64);
            for idx in &order {
                let ex: Vec<&ChainExample> = idx.iter().map(|&i| &examples[i]).collect();
                let mode = Mode::train(tc.dropout, seed, self.trained_steps);
                let mut store = std::mem::take(&mut self.store);
                let this = &*self;
                let res = optimizer_step(&mut store, &mut opt, tc.clip, |g, s| {
                    if stage == 1 {
                        this.stage1_loss(g, s, &ex, &mode)
                    } else {
                        this.stage2_loss(g, s, &ex, &mode)
                    }
                });
                self.store = store;
                match res {
                    Ok((loss, lr)) => {
                        self.trained_steps += 1;
                        log.push(LogEntry {
                            step: self.trained_steps,
                            loss,
                            lr,
                        });
                        total += loss;
                    }
                    Err(err) => {
                        result = Err(err);
                        break;
                    }
                }
            }
            if result.is_err() {
                break;
            }
            epochs.push(total / order.len() as f64);
        }
        self.store.set_all_trainable(true);
        result.map(|_| epochs)
    }

    /// Stage 1 on (CDR3 -> V, J), then stage 2 on (CDR3, true V, J -> chain).
    pub fn train_two_stage(
        &mut self,
        examples: &[ChainExample],
        stage1: &TrainConfig,
        stage2: &TrainConfig,
    ) -> Result<TwoStageReport> {
        stage1.validate()?;
        stage2.validate()?;
        if examples.is_empty() {
            return Err(invalid(format!("no complete {} records to train on", self.chain)));
        }
        let mut log = Vec::new();
        let stage1_epochs = self.run_stage(examples, stage1, 1, &mut log)?;
        let stage2_epochs = self.run_stage(examples, stage2, 2, &mut log)?;
        Ok(TwoStageReport {
            stage1_epochs,
            stage2_epochs,
            log,
        })
    }

    fn encode_cdr3s<S: AsRef<str>>(cdr3s: &[S]) -> Result<Vec<TokenSequence>> {
        cdr3s.iter().map(|s| encode(s.as_ref(), Scheme::Plain)).collect()
    }

    /// Stage-1 distributions per CDR3.
    pub fn predict_genes<S: AsRef<str>>(&self, cdr3s: &[S]) -> Result<Vec<GeneProbs>> {
        let mut out = Vec::with_capacity(cdr3s.len());
        for chunk in Self::encode_cdr3s(cdr3s)?.chunks(64) {
            let (ids, _) = pad_batch(chunk);
            let mut g = Graph::new();
            let (lv, lj) = self.stage1.forward(&mut g, &self.store, &ids, chunk.len(), &Mode::eval())?;
            let (tv, tj) = (g.value(lv), g.value(lj));
            for r in 0..chunk.len() {
                out.push(GeneProbs {
                    v: softmax(tv.row(r)),
                    j: softmax(tj.row(r)),
                });
            }
        }
        Ok(out)
    }

    /// Full-length chains for CDR3s with the given gene indices. Greedy
    /// when `temperature == 0`.
    pub fn generate_full<S: AsRef<str>>(
        &self,
        cdr3s: &[S],
        v: &[usize],
        j: &[usize],
        temperature: f64,
        seed: u64,
    ) -> Result<Vec<String>> {
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(invalid(format!("temperature must be >= 0, got {temperature}")));
        }
        if v.len() != cdr3s.len() || j.len() != cdr3s.len() {
            return Err(invalid("one V and one J label per CDR3 required"));
        }
        for (&vi, &ji) in v.iter().zip(j) {
            if vi >= self.genes.v_labels.len() || ji >= self.genes.j_labels.len() {
                return Err(invalid(format!("gene index ({vi}, {ji}) outside the vocabulary")));
            }
        }
        let toks = Self::encode_cdr3s(cdr3s)?;
        let mut out = Vec::with_capacity(toks.len());
        for (c, chunk) in toks.chunks(64).enumerate() {
            let base = c * 64;
            let vs = &v[base..base + chunk.len()];
            let js = &j[base..base + chunk.len()];
            out.extend(self.generate_chunk(chunk, vs, js, temperature, seed, base)?);
        }
        Ok(out)
    }

    fn generate_chunk(
        &self,
        cdr3: &[TokenSequence],
        v: &[usize],
        j: &[usize],
        temperature: f64,
        seed: u64,
        offset: usize,
    ) -> Result<Vec<String>> {
        let n = cdr3.len();
        let (src, width) = pad_batch(cdr3);
        let mut g = Graph::new();
        let (enc, valid) = self.stage2.encode(&mut g, &self.store, &src, n, v, j, &Mode::eval())?;
        let enc = g.value(enc).clone();
        let row = (width + 1) * self.cfg.d_model;
        let mut rngs: Vec<Rng> = (0..n).map(|i| rng(derive(seed, &[(offset + i) as u64]))).collect();
        let mut seqs: Vec<Vec<usize>> = vec![vec![BOS]; n];
        let mut done = vec![false; n];
        while done.iter().any(|d| !d) {
            let active: Vec<usize> = (0..n).filter(|&i| !done[i]).collect();
            let t = seqs[active[0]].len();
            let ids: Vec<usize> = active.iter().flat_map(|&i| seqs[i].iter().copied()).collect();
            let mut data = Vec::with_capacity(active.len() * row);
            let mut sv = Vec::with_capacity(active.len() * (width + 1));
            for &i in &active {
                data.extend_from_slice(&enc.data()[i * row..(i + 1) * row]);
                sv.extend_from_slice(&valid[i * (width + 1)..(i + 1) * (width + 1)]);
            }
            let mut g = Graph::new();
            let e = g.input(Tensor::new(vec![active.len(), width + 1, self.cfg.d_model], data)?);
            let logits = self.stage2.decode(&mut g, &self.store, e, &sv, &ids, active.len(), &Mode::eval())?;
            let lt = g.value(logits);
            for (k, &i) in active.iter().enumerate() {
                let residues = t - 1;
                let next = if residues >= self.cfg.max_full {
                    EOS
                } else {
                    sample_token(lt.row(k * t + t - 1), temperature, residues > 0, &mut rngs[i])
                };
                seqs[i].push(next);
                if next == EOS {
                    done[i] = true;
                }
            }
        }
        Ok(seqs.iter().map(|s| decode(&s[1..])).collect())
    }

    /// Stage-1 argmax genes followed by greedy stage-2 generation.
    pub fn assemble<S: AsRef<str>>(&self, cdr3s: &[S]) -> Result<Vec<Assembly>> {
        let probs = self.predict_genes(cdr3s)?;
        let (v, j): (Vec<usize>, Vec<usize>) = probs.iter().map(GeneProbs::argmax).unzip();
        let full = self.generate_full(cdr3s, &v, &j, 0.0, 0)?;
        Ok(v.iter()
            .zip(&j)
            .zip(full)
            .map(|((&vi, &ji), f)| Assembly {
                v_gene: self.genes.v_labels[vi].clone(),
                j_gene: self.genes.j_labels[ji].clone(),
                full: f,
            })
            .collect())
    }

    pub fn save(&self, dir: &Path, extra: &Meta) -> Result<()> {
        let mut meta = extra.clone();
        meta.insert("kind".into(), KIND.into());
        meta.insert("chain".into(), self.chain.name().into());
        for (k, v) in self.cfg.entries() {
            meta.insert(k.into(), v.to_string());
        }
        meta.insert("v_labels".into(), self.genes.v_labels.join(","));
        meta.insert("j_labels".into(), self.genes.j_labels.join(","));
        meta.insert("vocab_size".into(), VOCAB_SIZE.to_string());
        meta.insert("vocab".into(), format!("{:016x}", Vocabulary::new().fingerprint()));
        meta.insert("trained_steps".into(), self.trained_steps.to_string());
        checkpoint::save(dir, &self.store, &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = checkpoint::load(dir)?;
        let parse = || -> Result<(AssemblerConfig, Chain, GeneVocab)> {
            ck.expect_meta("kind", KIND)?;
            ck.expect_meta("vocab_size", &VOCAB_SIZE.to_string())?;
            ck.expect_meta("vocab", &format!("{:016x}", Vocabulary::new().fingerprint()))?;
            let cfg = AssemblerConfig {
                d_model: ck.meta_parse("d_model")?,
                heads: ck.meta_parse("heads")?,
                d_head: ck.meta_parse("d_head")?,
                d_ff: ck.meta_parse("d_ff")?,
                gene_layers: ck.meta_parse("gene_layers")?,
                enc_layers: ck.meta_parse("enc_layers")?,
                dec_layers: ck.meta_parse("dec_layers")?,
                max_cdr3: ck.meta_parse("max_cdr3")?,
                max_full: ck.meta_parse("max_full")?,
            };
            let labels = |k: &str| -> Result<Vec<String>> {
                Ok(ck.meta_str(k)?.split(',').map(str::to_string).collect())
            };
            let genes = GeneVocab {
                v_labels: labels("v_labels")?,
                j_labels: labels("j_labels")?,
            };
            Ok((cfg, Chain::parse(ck.meta_str("chain")?)?, genes))
        };
        let (cfg, chain, genes) = parse().map_err(|e| with_path(e, dir))?;
        let mut m = Self::new(cfg, chain, genes, 0)?;
        ck.restore_into(&mut m.store)?;
        m.trained_steps = ck.meta_parse("trained_steps").unwrap_or(0);
        Ok(m)
    }

    /// Fails unless the model was trained for `chain`.
    pub fn expect_chain(&self, chain: Chain) -> Result<()> {
        if self.chain != chain {
            return Err(Error::Mismatch {
                dimension: "chain".into(),
                expected: chain.name().into(),
                found: self.chain.name().into(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Assembler {
        let cfg = AssemblerConfig {
            d_model: 16,
            heads: 2,
            d_head: 8,
            d_ff: 32,
            gene_layers: 1,
            enc_layers: 1,
            dec_layers: 1,
            max_cdr3: 32,
            max_full: 40,
        };
        let genes = GeneVocab {
            v_labels: vec!["V1".into(), "V2".into(), "V3".into()],
            j_labels: vec!["J1".into(), "J2".into()],
        };
        Assembler::new(cfg, Chain::Beta, genes, 7).unwrap()
    }

    #[test]
    fn pooling_rules() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        let p = g.mean_pool(x, Rc::new(vec![true, true])).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 4.0]);
        let p = g.mean_pool(x, Rc::new(vec![true, false])).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0]);
        assert!(g.mean_pool(x, Rc::new(vec![false, false])).is_err());
    }

    #[test]
    fn gene_distributions_sum_to_one() {
        let m = tiny();
        for p in m.predict_genes(&["CASSLG", "CAW"]).unwrap() {
            assert_eq!(p.v.len(), 3);
            assert_eq!(p.j.len(), 2);
            assert!((p.v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((p.j.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gene_embedding_width() {
        let m = tiny();
        let mut g = Graph::new();
        let e = m.stage2.embed_genes(&mut g, &m.store, &[0, 2], &[1, 0]).unwrap();
        assert_eq!(g.shape(e), &[2, 16]);
    }

    #[test]
    fn greedy_generation_repeats_and_respects_limits() {
        let m = tiny();
        let a = m.generate_full(&["CASSF", "CAW"], &[0, 1], &[1, 0], 0.0, 0).unwrap();
        let b = m.generate_full(&["CASSF", "CAW"], &[0, 1], &[1, 0], 0.0, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| !s.is_empty() && s.len() <= 40));
        assert!(m.generate_full(&["CASSF"], &[3], &[0], 0.0, 0).is_err());
        assert!(m.generate_full(&["CASSF"], &[0], &[0], -0.5, 0).is_err());
    }

    #[test]
    fn assemble_keeps_order_and_count() {
        let m = tiny();
        let out = m.assemble(&["CASSF", "CAW", "CASSQ"]).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out, m.assemble(&["CASSF", "CAW", "CASSQ"]).unwrap());
    }

    #[test]
    fn labels_with_commas_rejected() {
        let genes = GeneVocab {
            v_labels: vec!["V,1".into()],
            j_labels: vec!["J".into()],
        };
        assert!(Assembler::new(AssemblerConfig::desk(), Chain::Alpha, genes, 0).is_err());
    }

    fn labelled(n_v: usize, n_j: usize, seed: u64) -> Assembler {
        let genes = GeneVocab {
            v_labels: (0..n_v).map(|i| format!("V{i}")).collect(),
            j_labels: (0..n_j).map(|i| format!("J{i}")).collect(),
        };
        let mut cfg = tiny().cfg;
        cfg.d_model = 32;
        cfg.d_head = 16;
        Assembler::new(cfg, Chain::Alpha, genes, seed).unwrap()
    }

    #[test]
    fn gene_loss_is_exact_sum() {
        let mut g = Graph::new();
        let lv = vec![0.3, -1.2, 2.0, 0.1, 0.7, 0.0];
        let lj = vec![1.5, -0.5, 0.25, -2.0];
        let v = g.input(Tensor::new(vec![2, 3], lv.clone()).unwrap());
        let j = g.input(Tensor::new(vec![2, 2], lj.clone()).unwrap());
        let l = gene_loss(&mut g, v, j, &[2, 0], &[1, 0]).unwrap();
        let ce = |rows: &[f64], w: usize, y: &[usize]| -> f64 {
            y.iter()
                .enumerate()
                .map(|(r, &t)| {
                    let row = &rows[r * w..(r + 1) * w];
                    row.iter().map(|x| x.exp()).sum::<f64>().ln() - row[t]
                })
                .sum::<f64>()
                / y.len() as f64
        };
        let want = ce(&lv, 3, &[2, 0]) + ce(&lj, 2, &[1, 0]);
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);

        let mut g = Graph::new();
        let v = g.input(Tensor::zeros(&[1, 5]));
        let j = g.input(Tensor::zeros(&[1, 3]));
        let l = gene_loss(&mut g, v, j, &[4], &[0]).unwrap();
        assert!((g.value(l).data()[0] - (5f64.ln() + 3f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn zeroed_gene_path_yields_norm_bias() {
        let mut m = tiny();
        for p in m.store.iter_mut() {
            if p.name.starts_with("stage2.gene_v") || p.name.starts_with("stage2.gene_j") || p.name.starts_with("stage2.gene_fuse") {
                p.value = Tensor::zeros(p.value.shape());
            }
            if p.name == "stage2.gene_ln.bias" {
                p.value = Tensor::new(vec![16], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
            }
        }
        let mut g = Graph::new();
        let e = m.stage2.embed_genes(&mut g, &m.store, &[1], &[0]).unwrap();
        let want: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        assert!(g.value(e).data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn gene_pairs_embed_distinctly_and_steer_decoding() {
        let m = labelled(10, 10, 3);
        let mut g = Graph::new();
        let v: Vec<usize> = (0..100).map(|i| i / 10).collect();
        let j: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let e = m.stage2.embed_genes(&mut g, &m.store, &v, &j).unwrap();
        let t = g.value(e);
        for a in 0..100 {
            for b in a + 1..100 {
                assert_ne!(t.row(a), t.row(b), "pairs {a} and {b} collide");
            }
        }
        let step0 = |v: usize| {
            let mut g = Graph::new();
            let src = encode("CAVRDG", Scheme::Plain).unwrap().ids;
            let (enc, valid) = m.stage2.encode(&mut g, &m.store, &src, 1, &[v], &[0], &Mode::eval()).unwrap();
            let l = m.stage2.decode(&mut g, &m.store, enc, &valid, &[BOS], 1, &Mode::eval()).unwrap();
            g.value(l).data().to_vec()
        };
        assert_ne!(step0(0), step0(1));
    }

    #[test]
    fn decoder_is_causal() {
        let m = tiny();
        let logits = |tgt: &[usize]| {
            let mut g = Graph::new();
            let src = encode("CASSF", Scheme::Plain).unwrap().ids;
            let (enc, valid) = m.stage2.encode(&mut g, &m.store, &src, 1, &[0], &[1], &Mode::eval()).unwrap();
            let l = m.stage2.decode(&mut g, &m.store, enc, &valid, tgt, 1, &Mode::eval()).unwrap();
            g.value(l).data().to_vec()
        };
        let a = logits(&[BOS, 1, 2, 3, 4]);
        let b = logits(&[BOS, 1, 2, 9, 17]);
        let keep = 3 * VOCAB_SIZE;
        assert!(a[..keep].iter().zip(&b[..keep]).all(|(x, y)| (x - y).abs() < 1e-10));
        assert!(a[keep..].iter().zip(&b[keep..]).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn encoder_is_order_sensitive() {
        let m = tiny();
        let pooled = |s: &str| {
            let mut g = Graph::new();
            let ids = encode(s, Scheme::Plain).unwrap().ids;
            let h = m.stage1.pooled(&mut g, &m.store, &ids, 1, &Mode::eval()).unwrap();
            g.value(h).data().to_vec()
        };
        assert_ne!(pooled("CASSLF"), pooled("CASSFL"));
    }

    #[test]
    fn untrained_gene_heads_are_near_uniform() {
        for seed in 0..5 {
            let m = labelled(24, 20, seed);
            for p in m.predict_genes(&["CASSLGQETQYF", "CAVRDGNKLVF", "CSARDRGYEQYF"]).unwrap() {
                assert!(p.v.iter().all(|&x| x < 5.0 / 24.0));
                assert!(p.j.iter().all(|&x| x < 5.0 / 20.0));
            }
        }
    }

    #[test]
    fn incomplete_records_are_skipped() {
        let full = PairedRecord {
            epitope: "GILGFVFTL".into(),
            cdr3_alpha: Some("CAVRDG".into()),
            cdr3_beta: Some("CASSF".into()),
            v_alpha: Some("TRAV1".into()),
            j_alpha: Some("TRAJ1".into()),
            v_beta: Some("TRBV1".into()),
            j_beta: Some("TRBJ1".into()),
            full_alpha: Some("MKCAVRDGFG".into()),
            full_beta: None,
        };
        let genes = gene_vocab(std::slice::from_ref(&full), Chain::Alpha);
        let (ex, skipped) = chain_examples(std::slice::from_ref(&full), Chain::Alpha, &genes).unwrap();
        assert_eq!((ex.len(), skipped), (1, 0));
        assert!(gene_vocab(std::slice::from_ref(&full), Chain::Beta).v_labels.is_empty());
        let (ex, skipped) = chain_examples(&[full], Chain::Beta, &genes).unwrap();
        assert_eq!((ex.len(), skipped), (0, 1));
    }
}
