use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Result};
use rayon::prelude::*;

use lsmtcr_core::assembler::{chain_examples, gene_vocab, Assembler, AssemblerConfig};
use lsmtcr_core::bert::{BertConfig, EpitopeBert, TimeKind};
use lsmtcr_core::error::Error as CoreError;
use lsmtcr_core::gpt::{CdrGpt, FreezePolicy, GptConfig, SamplerConfig};
use lsmtcr_core::metrics::{composite_scores, diversity_report, similarity_report, DiversityReport, DIVERSITY_HEADER};
use lsmtcr_core::nn::checkpoint::{self, Meta};
use lsmtcr_core::nn::TrainConfig;
use lsmtcr_core::rng::derive;
use lsmtcr_core::seqdata::{decode, encode, load_corpus, load_dataset, Chain, Scheme, TokenSequence};

use crate::inputs::{read_cdr3s, read_repertoires, GENERATION_HEADER};
use crate::output::{write_csv, write_log, write_metrics, Staging};
use crate::settings::Settings;

fn full_preset(s: &Settings) -> Result<bool> {
    match s.get("preset", "desk".to_string())?.as_str() {
        "desk" => Ok(false),
        "full" => Ok(true),
        other => bail!("unknown preset '{other}' (expected desk or full)"),
    }
}

fn seed(s: &Settings) -> Result<u64> {
    s.get("seed", 0)
}

fn chain(s: &Settings) -> Result<Chain> {
    Ok(Chain::parse(&s.get("chain", "beta".to_string())?)?)
}

fn bert_config(s: &Settings) -> Result<BertConfig> {
    let mut c = if full_preset(s)? { BertConfig::full() } else { BertConfig::desk() };
    c.d_model = s.get("d_model", c.d_model)?;
    c.heads = s.get("heads", c.heads)?;
    c.d_head = s.get("d_head", c.d_head)?;
    c.layers = s.get("layers", c.layers)?;
    c.d_ff = s.get("d_ff", c.d_ff)?;
    c.max_len = s.get("max_len", c.max_len)?;
    c.steps = s.get("steps", c.steps)?;
    c.p_min = s.get("p_min", c.p_min)?;
    c.p_max = s.get("p_max", c.p_max)?;
    c.time = TimeKind::parse(&s.get("time_embedding", c.time.name().to_string())?)?;
    c.validate()?;
    Ok(c)
}

fn gpt_config(s: &Settings) -> Result<GptConfig> {
    let mut c = if full_preset(s)? { GptConfig::full() } else { GptConfig::desk() };
    c.d_model = s.get("d_model", c.d_model)?;
    c.heads = s.get("heads", c.heads)?;
    c.d_head = s.get("d_head", c.d_head)?;
    c.layers = s.get("layers", c.layers)?;
    c.d_ff = s.get("d_ff", c.d_ff)?;
    c.max_len = s.get("max_len", c.max_len)?;
    c.validate()?;
    Ok(c)
}

fn assembler_config(s: &Settings) -> Result<AssemblerConfig> {
    let mut c = if full_preset(s)? { AssemblerConfig::full() } else { AssemblerConfig::desk() };
    c.d_model = s.get("d_model", c.d_model)?;
    c.heads = s.get("heads", c.heads)?;
    c.d_head = s.get("d_head", c.d_head)?;
    c.d_ff = s.get("d_ff", c.d_ff)?;
    c.gene_layers = s.get("gene_layers", c.gene_layers)?;
    c.enc_layers = s.get("enc_layers", c.enc_layers)?;
    c.dec_layers = s.get("dec_layers", c.dec_layers)?;
    c.max_cdr3 = s.get("max_cdr3", c.max_cdr3)?;
    c.max_full = s.get("max_full", c.max_full)?;
    c.validate()?;
    Ok(c)
}

fn train_config(s: &Settings, epochs_key: &str, epochs: usize, batch_size: usize) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let tc = TrainConfig {
        epochs: s.get(epochs_key, s.get("epochs", epochs)?)?,
        batch_size: s.get("batch_size", batch_size)?,
        lr: s.get("lr", d.lr)?,
        weight_decay: s.get("weight_decay", d.weight_decay)?,
        warmup_fraction: s.get("warmup_fraction", d.warmup_fraction)?,
        clip: s.get("clip", d.clip)?,
        dropout: s.get("dropout", d.dropout)?,
        seed: seed(s)?,
    };
    tc.validate()?;
    Ok(tc)
}

fn encode_all(seqs: &[String], scheme: Scheme) -> Result<Vec<TokenSequence>> {
    Ok(seqs.iter().map(|x| encode(x, scheme)).collect::<Result<_, _>>()?)
}

fn run_meta(s: &Settings, command: &str) -> Meta {
    let mut m = s.snapshot();
    m.insert("command".into(), command.into());
    m
}

fn chain_meta(meta: &mut Meta, chain: Chain) {
    meta.insert("chain".into(), chain.name().into());
}

/// Chain recorded in a checkpoint; older or foreign checkpoints default
/// to beta.
fn checkpoint_chain(dir: &Path) -> Result<Chain> {
    let meta = checkpoint::read_meta(dir)?;
    Ok(Chain::parse(meta.get("chain").map(String::as_str).unwrap_or("beta"))?)
}

fn expect_chain(dir: &Path, expected: Chain) -> Result<()> {
    let found = checkpoint_chain(dir)?;
    if found != expected {
        return Err(CoreError::Mismatch {
            dimension: "chain".into(),
            expected: expected.name().into(),
            found: found.name().into(),
        }
        .into());
    }
    Ok(())
}

fn mismatch(dimension: &str, expected: impl ToString, found: impl ToString) -> anyhow::Error {
    CoreError::Mismatch {
        dimension: dimension.into(),
        expected: expected.to_string(),
        found: found.to_string(),
    }
    .into()
}

pub fn pretrain_epitope(s: &Settings, out: &Path) -> Result<()> {
    let corpus_path = s.input("corpus")?;
    let val_path = match s.raw("val_corpus") {
        Some(_) => Some(s.input("val_corpus")?),
        None => None,
    };
    let cfg = bert_config(s)?;
    let tc = train_config(s, "epochs", 40, 8)?;
    s.finish()?;

    let corpus = encode_all(&load_corpus(&corpus_path)?, Scheme::Plain)?;
    let val = match &val_path {
        Some(p) => encode_all(&load_corpus(p)?, Scheme::Plain)?,
        None => corpus.clone(),
    };
    let stage = Staging::begin(out)?;
    let mut m = EpitopeBert::new(cfg, tc.seed)?;
    let (log, _) = m.train(&corpus, &tc)?;
    let v = m.validate(&val, tc.seed)?;
    m.save(stage.path(), &run_meta(s, "pretrain-epitope"))?;
    write_log(&stage.file("train_log.csv"), &log)?;
    write_metrics(
        &stage.file("validation.csv"),
        &[
            ("t_eval", cfg.schedule()?.t_eval().to_string()),
            ("loss", v.loss.to_string()),
            ("accuracy", v.accuracy.to_string()),
            ("masked_tokens", v.predictions.to_string()),
        ],
    )?;
    let dir = stage.commit()?;
    eprintln!(
        "epitope encoder: {} steps, validation accuracy {:.4}, loss {:.4} -> {}",
        log.len(),
        v.accuracy,
        v.loss,
        dir.display()
    );
    Ok(())
}

pub fn pretrain_cdr3(s: &Settings, out: &Path) -> Result<()> {
    let corpus_path = s.input("corpus")?;
    let chain = chain(s)?;
    let cfg = gpt_config(s)?;
    let tc = train_config(s, "epochs", 30, 16)?;
    s.finish()?;

    let corpus = encode_all(&load_corpus(&corpus_path)?, Scheme::BosEos)?;
    let stage = Staging::begin(out)?;
    let mut m = CdrGpt::new(cfg, tc.seed)?;
    let (log, _) = m.train(&corpus, None, &tc)?;
    let loss = m.corpus_loss(&corpus, None)?;
    let mut meta = run_meta(s, "pretrain-cdr3");
    chain_meta(&mut meta, chain);
    m.save(stage.path(), &meta)?;
    write_log(&stage.file("train_log.csv"), &log)?;
    write_metrics(&stage.file("summary.csv"), &[("final_loss", loss.to_string())])?;
    let dir = stage.commit()?;
    eprintln!("{chain} CDR3 decoder: {} steps, loss {loss:.4} -> {}", log.len(), dir.display());
    Ok(())
}

pub fn transfer_alpha(s: &Settings, out: &Path) -> Result<()> {
    let init = s.input("init")?;
    let corpus_path = s.input("corpus")?;
    let tc = train_config(s, "epochs", 10, 16)?;
    s.finish()?;

    expect_chain(&init, Chain::Beta)?;
    let mut m = CdrGpt::load(&init)?;
    if m.is_conditioned() {
        return Err(mismatch("d_cond", 0, m.cfg.d_cond));
    }
    let corpus = encode_all(&load_corpus(&corpus_path)?, Scheme::BosEos)?;
    let stage = Staging::begin(out)?;
    let initial = m.corpus_loss(&corpus, None)?;
    m.trained_steps = 0;
    let (log, _) = m.train(&corpus, None, &tc)?;
    let last = m.corpus_loss(&corpus, None)?;
    let mut meta = run_meta(s, "transfer-alpha");
    chain_meta(&mut meta, Chain::Alpha);
    m.save(stage.path(), &meta)?;
    write_log(&stage.file("train_log.csv"), &log)?;
    write_metrics(
        &stage.file("summary.csv"),
        &[("initial_loss", initial.to_string()), ("final_loss", last.to_string())],
    )?;
    let dir = stage.commit()?;
    eprintln!("alpha transfer: loss {initial:.4} -> {last:.4} -> {}", dir.display());
    Ok(())
}

fn freeze_policy(name: &str, cfg: &GptConfig) -> Result<FreezePolicy> {
    Ok(match name {
        "default" => FreezePolicy::default_for(cfg),
        "adapters" => FreezePolicy::adapters_only(),
        "none" => FreezePolicy::none(),
        other => bail!("unknown freeze policy '{other}' (expected default, adapters or none)"),
    })
}

fn conditioned_pair(bert: &EpitopeBert, gpt: &CdrGpt) -> Result<()> {
    if gpt.cfg.d_cond != bert.cfg.d_model {
        return Err(mismatch("d_cond", bert.cfg.d_model, gpt.cfg.d_cond));
    }
    Ok(())
}

pub fn finetune(s: &Settings, out: &Path) -> Result<()> {
    let data = s.input("data")?;
    let chain = chain(s)?;
    let epitope_model = s.input("epitope_model")?;
    let cdr3_model = s.input("cdr3_model")?;
    let freeze = s.get("freeze", "default".to_string())?;
    let limit: Option<usize> = s.opt("limit")?;
    let tc = train_config(s, "epochs", 150, 16)?;
    s.finish()?;

    let bert = EpitopeBert::load(&epitope_model)?;
    expect_chain(&cdr3_model, chain)?;
    let base = CdrGpt::load(&cdr3_model)?;
    let mut gpt = if base.is_conditioned() {
        conditioned_pair(&bert, &base)?;
        base
    } else {
        base.with_conditioning(bert.cfg.d_model, tc.seed)?
    };
    let policy = freeze_policy(&freeze, &gpt.cfg)?;
    let mut pairs = Vec::new();
    for r in load_dataset(&data)? {
        if let Some(c) = r.cdr3(chain) {
            pairs.push((encode(&r.epitope, Scheme::Plain)?, encode(c, Scheme::BosEos)?));
        }
    }
    pairs.truncate(limit.unwrap_or(usize::MAX));
    if pairs.is_empty() {
        bail!("{} holds no {chain} CDR3s to fine-tune on", data.display());
    }

    let stage = Staging::begin(out)?;
    let (log, _) = gpt.finetune_conditional(&bert, &pairs, &policy, &tc)?;
    let epitopes: Vec<TokenSequence> = pairs.iter().map(|p| p.0.clone()).collect();
    let states = bert.encode_epitopes(&epitopes)?;
    let targets: Vec<TokenSequence> = pairs.iter().map(|p| p.1.clone()).collect();
    let loss = gpt.corpus_loss(&targets, Some(&states))?;
    let sc = SamplerConfig {
        temperature: 0.0,
        max_len: gpt.cfg.max_len,
        samples: 1,
        seed: 0,
    };
    let hits = (0..pairs.len())
        .into_par_iter()
        .map(|i| {
            let got = gpt.generate(Some(&states.select(&[i])?), &sc)?;
            Ok(usize::from(got[0].cdr3 == decode(&pairs[i].1.ids)))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();

    let mut meta = run_meta(s, "finetune");
    chain_meta(&mut meta, chain);
    gpt.save(stage.path(), &meta)?;
    write_log(&stage.file("train_log.csv"), &log)?;
    write_metrics(
        &stage.file("summary.csv"),
        &[
            ("pairs", pairs.len().to_string()),
            ("final_loss", loss.to_string()),
            ("greedy_reproduced", hits.to_string()),
            ("greedy_rate", (hits as f64 / pairs.len() as f64).to_string()),
        ],
    )?;
    let dir = stage.commit()?;
    eprintln!(
        "conditional fine-tune: loss {loss:.4}, greedy reproduces {hits}/{} -> {}",
        pairs.len(),
        dir.display()
    );
    Ok(())
}

pub fn generate(s: &Settings, out: &Path) -> Result<()> {
    let cdr3_model = s.input("cdr3_model")?;
    let temperatures: Vec<f64> = s.list("temperature")?.unwrap_or_else(|| vec![1.0]);
    let samples: usize = s.get("samples", 50)?;
    let max_len: Option<usize> = s.opt("max_len")?;
    let listed: Option<Vec<String>> = s.list("epitopes")?;
    let from_file = match s.raw("epitopes_file") {
        Some(_) => Some(s.input("epitopes_file")?),
        None => None,
    };
    let epitope_model = match s.raw("epitope_model") {
        Some(_) => Some(s.input("epitope_model")?),
        None => None,
    };
    let seed = seed(s)?;
    s.finish()?;

    if temperatures.is_empty() {
        bail!("empty temperature list");
    }
    for &t in &temperatures {
        if !(t >= 0.0 && t.is_finite()) {
            bail!("temperature must be >= 0, got {t}");
        }
    }
    let gpt = CdrGpt::load(&cdr3_model)?;
    let chain = checkpoint_chain(&cdr3_model)?;
    let max_len = max_len.unwrap_or(gpt.cfg.max_len);
    let mut epitopes = listed.unwrap_or_default();
    if let Some(p) = &from_file {
        epitopes.extend(load_corpus(p)?);
    }

    let encoded = if gpt.is_conditioned() {
        let path = epitope_model.ok_or_else(|| anyhow!("a conditioned model needs --set epitope_model=DIR"))?;
        if epitopes.is_empty() {
            bail!("a conditioned model needs epitopes (--set epitopes=A,B or epitopes_file=PATH)");
        }
        let bert = EpitopeBert::load(&path)?;
        conditioned_pair(&bert, &gpt)?;
        let toks = encode_all(&epitopes, Scheme::Plain)?;
        (0..toks.len())
            .map(|i| Ok(Some(bert.encode_epitopes(&toks[i..=i])?)))
            .collect::<Result<Vec<_>>>()?
    } else {
        if !epitopes.is_empty() || epitope_model.is_some() {
            bail!("{} is unconditioned; drop the epitope settings", cdr3_model.display());
        }
        epitopes.push(String::new());
        vec![None]
    };

    let jobs: Vec<(usize, usize)> = (0..epitopes.len())
        .flat_map(|e| (0..temperatures.len()).map(move |t| (e, t)))
        .collect();
    let blocks = jobs
        .par_iter()
        .map(|&(e, t)| {
            let sc = SamplerConfig {
                temperature: temperatures[t],
                max_len,
                samples,
                seed: derive(seed, &[e as u64, t as u64]),
            };
            Ok(gpt.generate(encoded[e].as_ref(), &sc)?)
        })
        .collect::<Result<Vec<_>>>()?;

    let stage = Staging::begin(out)?;
    let mut rows = Vec::new();
    for (&(e, t), block) in jobs.iter().zip(blocks) {
        let mut order: Vec<usize> = (0..block.len()).collect();
        order.sort_by(|&a, &b| block[b].logprob.total_cmp(&block[a].logprob).then(a.cmp(&b)));
        for (rank, &i) in order.iter().enumerate() {
            rows.push(vec![
                epitopes[e].clone(),
                chain.name().to_string(),
                (rank + 1).to_string(),
                block[i].cdr3.clone(),
                block[i].logprob.to_string(),
                temperatures[t].to_string(),
                seed.to_string(),
            ]);
        }
    }
    write_csv(&stage.file("generated.csv"), GENERATION_HEADER, &rows)?;
    let dir = stage.commit()?;
    eprintln!("generated {} {chain} CDR3s -> {}", rows.len(), dir.display());
    Ok(())
}

fn accuracy(hits: usize, n: usize) -> String {
    if n == 0 {
        "NaN".into()
    } else {
        (hits as f64 / n as f64).to_string()
    }
}

pub fn predict_genes(s: &Settings, out: &Path) -> Result<()> {
    let model_path = s.input("assembler_model")?;
    let input = s.input("input")?;
    s.finish()?;

    let m = Assembler::load(&model_path)?;
    let data = read_cdr3s(&input, m.chain, false)?;
    let stage = Staging::begin(out)?;
    let probs = m.predict_genes(&data.cdr3s)?;
    let mut rows = Vec::with_capacity(probs.len());
    for (c, p) in data.cdr3s.iter().zip(&probs) {
        let (v, j) = p.argmax();
        rows.push(vec![
            m.chain.name().to_string(),
            c.clone(),
            m.genes.v_labels[v].clone(),
            p.v[v].to_string(),
            m.genes.j_labels[j].clone(),
            p.j[j].to_string(),
        ]);
    }
    write_csv(&stage.file("genes.csv"), "chain,cdr3,v_gene,v_prob,j_gene,j_prob", &rows)?;
    if let Some(records) = &data.records {
        let (mut vh, mut vn, mut jh, mut jn) = (0, 0, 0, 0);
        for (r, row) in records.iter().zip(&rows) {
            let (v, j) = r.genes(m.chain);
            if let Some(v) = v.filter(|v| m.genes.v_index(v).is_ok()) {
                vn += 1;
                vh += usize::from(v == row[2]);
            }
            if let Some(j) = j.filter(|j| m.genes.j_index(j).is_ok()) {
                jn += 1;
                jh += usize::from(j == row[4]);
            }
        }
        write_metrics(
            &stage.file("gene_metrics.csv"),
            &[
                ("v_accuracy", accuracy(vh, vn)),
                ("v_evaluated", vn.to_string()),
                ("j_accuracy", accuracy(jh, jn)),
                ("j_evaluated", jn.to_string()),
            ],
        )?;
    }
    let dir = stage.commit()?;
    eprintln!("predicted genes for {} CDR3s -> {}", rows.len(), dir.display());
    Ok(())
}

pub fn train_assembler(s: &Settings, out: &Path) -> Result<()> {
    let data = s.input("data")?;
    let chain = chain(s)?;
    let cfg = assembler_config(s)?;
    let tc1 = train_config(s, "stage1_epochs", 30, 8)?;
    let tc2 = train_config(s, "stage2_epochs", 120, 8)?;
    s.finish()?;

    let records = load_dataset(&data)?;
    let genes = gene_vocab(&records, chain);
    let (examples, skipped) = chain_examples(&records, chain, &genes)?;
    if skipped > 0 {
        eprintln!("skipped {skipped} record(s) without a complete {chain} chain");
    }
    let stage = Staging::begin(out)?;
    let mut m = Assembler::new(cfg, chain, genes, tc1.seed)?;
    let report = m.train_two_stage(&examples, &tc1, &tc2)?;
    m.save(stage.path(), &run_meta(s, "train-assembler"))?;
    write_log(&stage.file("train_log.csv"), &report.log)?;
    let last = |v: &[f64]| v.last().map_or("NaN".to_string(), f64::to_string);
    write_metrics(
        &stage.file("summary.csv"),
        &[
            ("records_used", examples.len().to_string()),
            ("records_skipped", skipped.to_string()),
            ("v_genes", m.genes.v_labels.len().to_string()),
            ("j_genes", m.genes.j_labels.len().to_string()),
            ("stage1_final_loss", last(&report.stage1_epochs)),
            ("stage2_final_loss", last(&report.stage2_epochs)),
        ],
    )?;
    let dir = stage.commit()?;
    eprintln!("{chain} assembler trained on {} records -> {}", examples.len(), dir.display());
    Ok(())
}

pub fn assemble(s: &Settings, out: &Path) -> Result<()> {
    let model_path = s.input("assembler_model")?;
    let input = s.input("input")?;
    let plain_source = s.get("source", "known".to_string())?;
    let temperature: f64 = s.get("decode_temperature", 0.0)?;
    let seed = seed(s)?;
    s.finish()?;

    let plain_is_denovo = match plain_source.as_str() {
        "known" => false,
        "denovo" => true,
        other => bail!("unknown source '{other}' (expected known or denovo)"),
    };
    let m = Assembler::load(&model_path)?;
    let data = read_cdr3s(&input, m.chain, plain_is_denovo)?;
    let chunks: Vec<&[String]> = data.cdr3s.chunks(64).collect();
    let parts = chunks
        .par_iter()
        .enumerate()
        .map(|(c, chunk)| {
            let probs = m.predict_genes(chunk)?;
            let (v, j): (Vec<usize>, Vec<usize>) = probs.iter().map(|p| p.argmax()).unzip();
            let full = m.generate_full(chunk, &v, &j, temperature, derive(seed, &[c as u64]))?;
            Ok((v, j, full))
        })
        .collect::<Result<Vec<_>>>()?;

    let stage = Staging::begin(out)?;
    let source = if data.denovo { "denovo" } else { "known" };
    let mut rows = Vec::with_capacity(data.cdr3s.len());
    let mut predicted = Vec::with_capacity(data.cdr3s.len());
    for (chunk, (v, j, full)) in chunks.iter().zip(parts) {
        for (k, cdr3) in chunk.iter().enumerate() {
            rows.push(vec![
                m.chain.name().to_string(),
                cdr3.clone(),
                m.genes.v_labels[v[k]].clone(),
                m.genes.j_labels[j[k]].clone(),
                full[k].clone(),
                source.to_string(),
            ]);
            predicted.push(full[k].clone());
        }
    }
    write_csv(&stage.file("assembly.csv"), "chain,cdr3,v_gene,j_gene,full_sequence,source", &rows)?;

    if let Some(records) = &data.records {
        let mut pred_pairs = Vec::new();
        let mut true_in = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (r, got) in records.iter().zip(&predicted) {
            let Some(view) = r.chain_view(m.chain) else { continue };
            pred_pairs.push((got.clone(), view.full.to_string()));
            if let (Ok(v), Ok(j)) = (m.genes.v_index(view.v), m.genes.j_index(view.j)) {
                true_in.0.push(view.cdr3.to_string());
                true_in.1.push(v);
                true_in.2.push(j);
                true_in.3.push(view.full.to_string());
            }
        }
        let mut metrics = vec![("references", pred_pairs.len().to_string())];
        if !pred_pairs.is_empty() {
            let sim = similarity_report(&pred_pairs)?;
            metrics.push(("exact_match_predicted_genes", sim.exact_match_rate.to_string()));
            metrics.push(("mean_norm_levenshtein", sim.mean_norm_levenshtein.to_string()));
            metrics.push(("mean_norm_hamming", sim.mean_norm_hamming.to_string()));
            metrics.push(("jaccard3", sim.jaccard3.to_string()));
            metrics.push(("js3", sim.js3.to_string()));
        }
        if !true_in.0.is_empty() {
            let full = m.generate_full(&true_in.0, &true_in.1, &true_in.2, temperature, derive(seed, &[u64::MAX]))?;
            let pairs: Vec<(String, String)> = full.into_iter().zip(true_in.3).collect();
            let sim = similarity_report(&pairs)?;
            metrics.push(("exact_match_true_genes", sim.exact_match_rate.to_string()));
        }
        write_metrics(&stage.file("assembly_metrics.csv"), &metrics)?;
    }
    let dir = stage.commit()?;
    eprintln!("assembled {} {} chains ({source}) -> {}", rows.len(), m.chain, dir.display());
    Ok(())
}

pub fn evaluate(s: &Settings, out: &Path) -> Result<()> {
    let reference = s.input("reference")?;
    let inputs: Vec<String> = s.list("inputs")?.ok_or_else(|| anyhow!("missing required setting 'inputs'"))?;
    let chain = chain(s)?;
    let seed = seed(s)?;
    s.finish()?;

    let mut conditions: Vec<(String, Vec<String>)> = Vec::new();
    for p in &inputs {
        let path = Path::new(p);
        if !path.exists() {
            return Err(CoreError::MissingInput(path.to_path_buf()).into());
        }
        for (mut name, rep) in read_repertoires(path, chain)? {
            if conditions.iter().any(|c| c.0 == name) {
                name = format!("{name}#{}", conditions.len() + 1);
            }
            conditions.push((name, rep));
        }
    }
    if conditions.len() < 2 {
        bail!("evaluation compares at least two conditions; got {}", conditions.len());
    }
    if let Some(empty) = conditions.iter().find(|c| c.1.is_empty()) {
        bail!("condition '{}' holds no {chain} sequences", empty.0);
    }
    let refs = read_cdr3s(&reference, chain, false)?.cdr3s;
    let mut reports = conditions
        .par_iter()
        .map(|(_, rep)| Ok(diversity_report(rep, &refs, seed)?))
        .collect::<Result<Vec<DiversityReport>>>()?;
    composite_scores(&mut reports)?;

    let stage = Staging::begin(out)?;
    let mut rows = Vec::new();
    for (i, ((name, _), r)) in conditions.iter().zip(&reports).enumerate() {
        let mut row = vec![name.clone()];
        row.extend(r.metrics().iter().map(f64::to_string));
        row.push(r.composite.to_string());
        rows.push(row);
        let mut named = vec![("condition", name.clone())];
        named.extend(
            DiversityReport::names()
                .iter()
                .zip(r.metrics().iter().chain([&r.composite]))
                .map(|(k, v)| (*k, v.to_string())),
        );
        write_metrics(&stage.file(&format!("report_{}.csv", i + 1)), &named)?;
    }
    write_csv(&stage.file("diversity.csv"), DIVERSITY_HEADER, &rows)?;
    let dir = stage.commit()?;
    eprintln!("evaluated {} conditions -> {}", rows.len(), dir.display());
    Ok(())
}

fn module_counts(ck: &checkpoint::Checkpoint) -> BTreeMap<String, usize> {
    let mut groups = BTreeMap::new();
    for e in &ck.entries {
        let key: Vec<&str> = e.name.splitn(3, '.').take(2).collect();
        *groups.entry(key.join(".")).or_insert(0) += e.shape.iter().product::<usize>();
    }
    groups
}

pub fn inspect(s: &Settings, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            s.finish()?;
            let ck = checkpoint::load(p)?;
            println!("checkpoint: {}", p.display());
            for (k, v) in &ck.meta {
                if !k.starts_with("config.") {
                    println!("  {k} = {v}");
                }
            }
            println!("parameters by module:");
            for (k, n) in module_counts(&ck) {
                println!("  {k:<28} {n:>12}");
            }
            println!("total parameters: {}", ck.num_parameters());
        }
        None => {
            let full = full_preset(s)?;
            let n_v: usize = s.get("n_v", 48)?;
            let n_j: usize = s.get("n_j", 14)?;
            s.finish()?;
            let (bert, gpt, asm) = if full {
                (BertConfig::full(), GptConfig::full(), AssemblerConfig::full())
            } else {
                (BertConfig::desk(), GptConfig::desk(), AssemblerConfig::desk())
            };
            let counts = [
                ("epitope-bert", EpitopeBert::count_parameters(bert)?),
                ("cdr3-gpt (unconditioned)", CdrGpt::count_parameters(gpt)?),
                ("cdr3-gpt (conditioned)", CdrGpt::count_parameters(gpt.conditioned(bert.d_model))?),
                ("tcr-assembler (one chain)", Assembler::count_parameters(asm, n_v, n_j)?),
            ];
            println!("preset: {}", if full { "full" } else { "desk" });
            for (name, n) in counts {
                println!("  {name:<28} {n:>12}");
            }
        }
    }
    Ok(())
}
