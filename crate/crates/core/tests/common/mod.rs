#![allow(dead_code)]

use std::path::PathBuf;

use lsmtcr_core::seqdata::{encode, load_corpus, load_dataset, PairedRecord, Scheme, TokenSequence};

pub fn toy(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/toy").join(name)
}

pub fn corpus(name: &str, scheme: Scheme) -> Vec<TokenSequence> {
    load_corpus(&toy(name))
        .unwrap()
        .iter()
        .map(|s| encode(s, scheme).unwrap())
        .collect()
}

pub fn pairs() -> Vec<PairedRecord> {
    load_dataset(&toy("pairs.csv")).unwrap()
}
