//! Vocabulary, tokenization and dataset plumbing.

pub mod dataset;
pub mod sampling;
pub mod vocab;

pub use dataset::{load_corpus, load_dataset, write_dataset, Chain, ChainRecord, GeneVocab, PairedRecord, CSV_HEADER};
pub use sampling::{make_negatives, preselect_corpus, preselect_mask_candidates, split, MaskCandidates, P_REF};
pub use vocab::{decode, encode, encode_batch, Scheme, TokenSequence, Vocabulary};
