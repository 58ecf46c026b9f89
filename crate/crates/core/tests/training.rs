mod common;

use common::{corpus, pairs};
use lsmtcr_core::assembler::{chain_examples, gene_vocab, Assembler, AssemblerConfig};
use lsmtcr_core::bert::{BertConfig, EpitopeBert};
use lsmtcr_core::gpt::{CdrGpt, FreezePolicy, GptConfig};
use lsmtcr_core::nn::TrainConfig;
use lsmtcr_core::seqdata::{encode, Chain, Scheme};

fn tc(epochs: usize, batch_size: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        seed,
        ..Default::default()
    }
}

#[test]
fn bert_memorizes_toy_epitopes() {
    let eps = corpus("epitopes.txt", Scheme::Plain);
    let mut m = EpitopeBert::new(BertConfig::desk(), 0).unwrap();
    let (_, epochs) = m.train(&eps, &tc(40, 8, 0)).unwrap();
    assert!(epochs.last().unwrap() < &epochs[0]);
    let v = m.validate(&eps, 0).unwrap();
    assert!(v.accuracy >= 0.9, "accuracy {}", v.accuracy);
}

#[test]
fn losses_fall_for_every_seed() {
    let eps = corpus("epitopes.txt", Scheme::Plain);
    let beta = corpus("cdr3_beta.txt", Scheme::BosEos);
    for seed in 0..3 {
        let mut bert = EpitopeBert::new(BertConfig::desk(), seed).unwrap();
        let (_, e) = bert.train(&eps, &tc(6, 8, seed)).unwrap();
        assert!(e[5] < e[0], "bert seed {seed}: {e:?}");

        let mut gpt = CdrGpt::new(GptConfig::desk(), seed).unwrap();
        let before = gpt.corpus_loss(&beta, None).unwrap();
        gpt.train(&beta, None, &tc(3, 16, seed)).unwrap();
        let after = gpt.corpus_loss(&beta, None).unwrap();
        assert!(after < before, "gpt seed {seed}: {before} -> {after}");
    }
}

#[test]
fn assembler_stages_both_learn() {
    let recs = pairs();
    let genes = gene_vocab(&recs, Chain::Alpha);
    let (ex, skipped) = chain_examples(&recs, Chain::Alpha, &genes).unwrap();
    assert_eq!(skipped, 0);
    let cfg = AssemblerConfig {
        d_model: 32,
        heads: 2,
        d_head: 16,
        d_ff: 64,
        gene_layers: 1,
        enc_layers: 1,
        dec_layers: 1,
        ..AssemblerConfig::desk()
    };
    let mut m = Assembler::new(cfg, Chain::Alpha, genes, 3).unwrap();
    let r = m.train_two_stage(&ex, &tc(8, 8, 3), &tc(8, 8, 3)).unwrap();
    assert!(r.stage1_epochs[7] < r.stage1_epochs[0]);
    assert!(r.stage2_epochs[7] < r.stage2_epochs[0]);
    assert_eq!(r.log.len(), 64);
    assert!(r.log.windows(2).all(|w| w[1].step == w[0].step + 1));
}

#[test]
fn finetune_keeps_frozen_parameters_fixed() {
    let recs = pairs();
    let bert = EpitopeBert::new(BertConfig::desk(), 0).unwrap();
    let base = CdrGpt::new(GptConfig::desk(), 0).unwrap();
    let mut gpt = base.with_conditioning(bert.cfg.d_model, 1).unwrap();
    let before = gpt.store.clone();
    let pairs: Vec<_> = recs[..8]
        .iter()
        .map(|r| {
            (
                encode(&r.epitope, Scheme::Plain).unwrap(),
                encode(r.cdr3(Chain::Beta).unwrap(), Scheme::BosEos).unwrap(),
            )
        })
        .collect();
    let policy = FreezePolicy::default_for(&gpt.cfg);
    gpt.finetune_conditional(&bert, &pairs, &policy, &tc(2, 8, 0)).unwrap();
    let mut frozen = 0;
    let mut moved = 0;
    for p in gpt.store.iter() {
        let same = before.value(before.id(&p.name).unwrap()) == &p.value;
        if policy.matches(&p.name) {
            frozen += 1;
            assert!(same, "{} changed while frozen", p.name);
        } else if !same {
            moved += 1;
        }
        if p.name.ends_with(".gate") {
            assert!(!same, "{} never left zero", p.name);
        }
    }
    assert!(frozen > 0 && moved > 0);
    assert!(gpt.store.iter().all(|p| p.trainable));
}
