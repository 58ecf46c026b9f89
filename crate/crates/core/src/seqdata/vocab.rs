//! Fixed amino-acid vocabulary shared by every model in the pipeline.
//!
//! Layout: `PAD=0`, the twenty canonical residues `A..Y` in alphabetical
//! one-letter order at `1..=20`, then `MASK=21`, `BOS=22`, `EOS=23`,
//! `UNK=24`. The layout never changes, so checkpoints are portable.

use crate::error::{Error, Result};

pub const AMINO_ACIDS: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";

pub const PAD: usize = 0;
pub const MASK: usize = 21;
pub const BOS: usize = 22;
pub const EOS: usize = 23;
pub const UNK: usize = 24;
pub const VOCAB_SIZE: usize = 25;

/// How a residue string is wrapped when encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Residues only.
    Plain,
    /// `BOS residues EOS`.
    BosEos,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut symbols = Vec::with_capacity(VOCAB_SIZE);
        symbols.push("<pad>".to_string());
        symbols.extend(AMINO_ACIDS.iter().map(|&c| (c as char).to_string()));
        for s in ["<mask>", "<bos>", "<eos>", "<unk>"] {
            symbols.push(s.to_string());
        }
        Self { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn pad_id(&self) -> usize {
        PAD
    }
    pub fn mask_id(&self) -> usize {
        MASK
    }
    pub fn bos_id(&self) -> usize {
        BOS
    }
    pub fn eos_id(&self) -> usize {
        EOS
    }
    pub fn unk_id(&self) -> usize {
        UNK
    }

    /// Stable FNV-1a hash of the symbol table, recorded in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for s in &self.symbols {
            for b in s.bytes().chain(std::iter::once(0u8)) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Token id of a canonical residue, if it is one.
pub fn residue_id(c: char) -> Option<usize> {
    if !c.is_ascii() {
        return None;
    }
    AMINO_ACIDS
        .iter()
        .position(|&a| a == c as u8)
        .map(|i| i + 1)
}

pub fn is_residue(id: usize) -> bool {
    (1..=20).contains(&id)
}

/// Checks that every character of `seq` is a canonical residue.
pub fn validate_residues(seq: &str) -> Result<()> {
    for (position, ch) in seq.chars().enumerate() {
        if residue_id(ch).is_none() {
            return Err(Error::InvalidResidue {
                ch,
                position: position + 1,
            });
        }
    }
    Ok(())
}

/// Integer-encoded sequence. Trailing pads only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Number of non-pad tokens.
    pub length: usize,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<usize>) -> Self {
        let length = ids.iter().filter(|&&i| i != PAD).count();
        Self { ids, length }
    }

    /// Right-pads with `PAD` up to `len`.
    pub fn padded(&self, len: usize) -> Vec<usize> {
        let mut ids = self.ids.clone();
        ids.resize(len.max(ids.len()), PAD);
        ids
    }
}

/// Encodes a residue string. Rejects non-canonical characters with their
/// one-based position.
pub fn encode(seq: &str, scheme: Scheme) -> Result<TokenSequence> {
    if seq.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    let mut ids = Vec::with_capacity(seq.len() + 2);
    if scheme == Scheme::BosEos {
        ids.push(BOS);
    }
    for (position, ch) in seq.chars().enumerate() {
        match residue_id(ch) {
            Some(id) => ids.push(id),
            None => {
                return Err(Error::InvalidResidue {
                    ch,
                    position: position + 1,
                })
            }
        }
    }
    if scheme == Scheme::BosEos {
        ids.push(EOS);
    }
    Ok(TokenSequence::from_ids(ids))
}

/// Decodes residue ids back to a string; specials and pads are dropped,
/// decoding stops at the first `EOS`.
pub fn decode(ids: &[usize]) -> String {
    let mut out = String::with_capacity(ids.len());
    for &id in ids {
        if id == EOS {
            break;
        }
        if is_residue(id) {
            out.push(AMINO_ACIDS[id - 1] as char);
        }
    }
    out
}

/// Encodes a batch and right-pads every row to the longest one.
/// Returns the row-major `[batch, max_len]` ids and `max_len`.
pub fn encode_batch<S: AsRef<str>>(seqs: &[S], scheme: Scheme) -> Result<(Vec<usize>, usize)> {
    let encoded = seqs
        .iter()
        .map(|s| encode(s.as_ref(), scheme))
        .collect::<Result<Vec<_>>>()?;
    Ok(pad_batch(&encoded))
}

pub fn pad_batch(seqs: &[TokenSequence]) -> (Vec<usize>, usize) {
    let width = seqs.iter().map(|s| s.ids.len()).max().unwrap_or(0);
    let mut out = Vec::with_capacity(width * seqs.len());
    for s in seqs {
        out.extend(s.padded(width));
    }
    (out, width)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alphabetical_layout() {
        assert_eq!(encode("AC", Scheme::Plain).unwrap().ids, vec![1, 2]);
        assert_eq!(residue_id('Y'), Some(20));
        let v = Vocabulary::new();
        assert_eq!(v.len(), VOCAB_SIZE);
        assert_eq!(v.pad_id(), 0);
        assert_eq!(v.symbols()[MASK], "<mask>");
    }

    #[test]
    fn bos_eos_wraps() {
        assert_eq!(
            encode("AC", Scheme::BosEos).unwrap().ids,
            vec![BOS, 1, 2, EOS]
        );
    }

    #[test]
    fn rejects_noncanonical_with_position() {
        match encode("AXC", Scheme::Plain) {
            Err(Error::InvalidResidue { ch: 'X', position: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let msg = encode("AXC", Scheme::Plain).unwrap_err().to_string();
        assert!(msg.contains('X'));
        assert!(encode("", Scheme::Plain).is_err());
    }

    #[test]
    fn batch_is_right_padded() {
        let (ids, w) = encode_batch(&["A", "ACD"], Scheme::Plain).unwrap();
        assert_eq!(w, 3);
        assert_eq!(ids, vec![1, 0, 0, 1, 2, 3]);
    }

    #[test]
    fn decode_stops_at_eos() {
        assert_eq!(decode(&[BOS, 1, 2, EOS, 3, PAD]), "AC");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip(seq in "[ACDEFGHIKLMNPQRSTVWY]{1,40}") {
            for scheme in [Scheme::Plain, Scheme::BosEos] {
                let t = encode(&seq, scheme).unwrap();
                proptest::prop_assert_eq!(decode(&t.ids), seq.clone());
                proptest::prop_assert_eq!(decode(&t.padded(t.ids.len() + 3)), seq.clone());
            }
        }
    }
}
