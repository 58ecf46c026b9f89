mod common;

use std::fs;

use common::pairs;
use lsmtcr_core::assembler::{gene_vocab, Assembler, AssemblerConfig};
use lsmtcr_core::bert::{BertConfig, EpitopeBert};
use lsmtcr_core::error::Error;
use lsmtcr_core::gpt::{CdrGpt, GptConfig, SamplerConfig};
use lsmtcr_core::nn::checkpoint::Meta;
use lsmtcr_core::seqdata::{encode, Chain, Scheme};

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn bert_round_trip_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let m = EpitopeBert::new(BertConfig::desk(), 4).unwrap();
    m.save(&dir.path().join("a"), &Meta::new()).unwrap();
    let a = EpitopeBert::load(&dir.path().join("a")).unwrap();
    a.save(&dir.path().join("b"), &Meta::new()).unwrap();
    let b = EpitopeBert::load(&dir.path().join("b")).unwrap();
    assert_eq!(a.cfg, m.cfg);
    let seqs = [encode("GILGFVFTL", Scheme::Plain).unwrap()];
    let (x, y, z) = (
        m.encode_epitopes(&seqs).unwrap(),
        a.encode_epitopes(&seqs).unwrap(),
        b.encode_epitopes(&seqs).unwrap(),
    );
    assert_eq!(y.states.data(), z.states.data());
    assert!(close(x.states.data(), y.states.data(), 1e-4));
}

#[test]
fn gpt_round_trip_reproduces_samples() {
    let dir = tempfile::tempdir().unwrap();
    let m = CdrGpt::new(GptConfig::desk(), 2).unwrap();
    m.save(dir.path(), &Meta::new()).unwrap();
    let a = CdrGpt::load(dir.path()).unwrap();
    let sc = SamplerConfig {
        temperature: 1.0,
        max_len: 20,
        samples: 5,
        seed: 9,
    };
    let (s, t) = (m.generate(None, &sc).unwrap(), a.generate(None, &sc).unwrap());
    for (x, y) in s.iter().zip(&t) {
        assert_eq!(x.cdr3, y.cdr3);
        assert!((x.logprob - y.logprob).abs() < 1e-3);
    }
    let other = GptConfig {
        layers: 3,
        ..GptConfig::desk()
    };
    match CdrGpt::load_expecting(dir.path(), &other) {
        Err(Error::Mismatch { dimension, .. }) => assert_eq!(dimension, "layers"),
        r => panic!("expected a mismatch, got {:?}", r.map(|_| ())),
    }
}

#[test]
fn assembler_round_trip_keeps_labels() {
    let dir = tempfile::tempdir().unwrap();
    let recs = pairs();
    let genes = gene_vocab(&recs, Chain::Beta);
    let m = Assembler::new(AssemblerConfig::desk(), Chain::Beta, genes.clone(), 1).unwrap();
    m.save(dir.path(), &Meta::new()).unwrap();
    let a = Assembler::load(dir.path()).unwrap();
    assert_eq!(a.genes, genes);
    assert_eq!(a.chain, Chain::Beta);
    assert!(a.expect_chain(Chain::Alpha).is_err());
    let p = m.predict_genes(&["CASSLGQETQYF"]).unwrap();
    let q = a.predict_genes(&["CASSLGQETQYF"]).unwrap();
    assert!(close(&p[0].v, &q[0].v, 1e-4));
}

#[test]
fn damaged_checkpoints_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let m = CdrGpt::new(GptConfig::desk(), 0).unwrap();
    m.save(dir.path(), &Meta::new()).unwrap();

    assert!(matches!(EpitopeBert::load(dir.path()), Err(Error::Mismatch { .. })));

    let weights = dir.path().join("weights.bin");
    let bytes = fs::read(&weights).unwrap();
    fs::write(&weights, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(CdrGpt::load(dir.path()), Err(Error::CorruptCheckpoint { .. })));

    fs::write(dir.path().join("manifest.txt"), "nonsense\n").unwrap();
    assert!(matches!(CdrGpt::load(dir.path()), Err(Error::CorruptCheckpoint { .. })));

    let missing = dir.path().join("absent");
    assert!(matches!(CdrGpt::load(&missing), Err(Error::MissingInput(_))));
}
