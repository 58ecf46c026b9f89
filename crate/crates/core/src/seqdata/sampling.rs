//! Seeded splitting, negative construction and mask-candidate preselection.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;

use crate::error::{invalid, Result};
use crate::rng::{derive, rng};
use crate::seqdata::vocab::{is_residue, TokenSequence};

/// Reference masking ratio used when preselecting candidates.
pub const P_REF: f64 = 0.15;

const NEGATIVE_ATTEMPTS: u64 = 1000;

/// Seeded shuffle then cut at `round(ratio * n)` (half away from zero).
pub fn split<T: Clone>(records: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(invalid(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let n = records.len();
    if n < 2 {
        return Err(invalid(format!("need at least 2 records to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(seed));
    let n_train = (ratio * n as f64).round() as usize;
    let train = order[..n_train].iter().map(|&i| records[i].clone()).collect();
    let eval = order[n_train..].iter().map(|&i| records[i].clone()).collect();
    Ok((train, eval))
}

/// Shuffles the CDR3 column until no output pair coincides with any
/// positive pair. Each attempt shuffles under an incremented seed, then
/// repairs remaining collisions by swapping with rows where the exchange
/// clears both; the result is always a permutation of the column.
pub fn make_negatives(pairs: &[(String, String)], seed: u64) -> Result<Vec<(String, String)>> {
    let distinct: HashSet<&str> = pairs.iter().map(|(_, c)| c.as_str()).collect();
    if distinct.len() < 2 {
        return Err(invalid(
            "negative construction needs at least 2 distinct CDR3 values",
        ));
    }
    let positives: HashSet<(&str, &str)> =
        pairs.iter().map(|(e, c)| (e.as_str(), c.as_str())).collect();
    let epitopes: Vec<&str> = pairs.iter().map(|(e, _)| e.as_str()).collect();
    let cdr3s: Vec<&str> = pairs.iter().map(|(_, c)| c.as_str()).collect();
    let clash = |i: usize, c: &str| positives.contains(&(epitopes[i], c));
    for attempt in 0..NEGATIVE_ATTEMPTS {
        let mut r = rng(seed.wrapping_add(attempt));
        let mut col = cdr3s.clone();
        col.shuffle(&mut r);
        let mut order: Vec<usize> = (0..col.len()).collect();
        order.shuffle(&mut r);
        for i in 0..col.len() {
            if !clash(i, col[i]) {
                continue;
            }
            if let Some(&j) = order
                .iter()
                .find(|&&j| j != i && !clash(i, col[j]) && !clash(j, col[i]))
            {
                col.swap(i, j);
            }
        }
        if (0..col.len()).all(|i| !clash(i, col[i])) {
            return Ok(pairs
                .iter()
                .zip(col)
                .map(|((e, _), c)| (e.clone(), c.to_string()))
                .collect());
        }
    }
    Err(invalid(format!(
        "no derangement against the positive set found in {NEGATIVE_ATTEMPTS} attempts"
    )))
}

/// Positions eligible for masking in one sequence, in sampling order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskCandidates {
    pub positions: Vec<usize>,
}

impl MaskCandidates {
    pub fn count(&self) -> usize {
        self.positions.len()
    }
}

pub fn candidate_count(length: usize) -> usize {
    ((P_REF * length as f64).round() as usize).max(1)
}

/// Samples `max(1, round(0.15 * length))` residue positions without
/// replacement. Pads and special tokens are never candidates.
pub fn preselect_mask_candidates(tokens: &TokenSequence, seed: u64) -> Result<MaskCandidates> {
    let eligible: Vec<usize> = tokens
        .ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| is_residue(id))
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(invalid("mask candidates need at least one residue"));
    }
    let m = candidate_count(eligible.len());
    let picked = rand::seq::index::sample(&mut rng(seed), eligible.len(), m);
    Ok(MaskCandidates {
        positions: picked.iter().map(|k| eligible[k]).collect(),
    })
}

/// Candidate sets for a whole corpus; sequence `i` uses a seed derived
/// from `(seed, i)` so sets stay fixed across epochs.
pub fn preselect_corpus(tokens: &[TokenSequence], seed: u64) -> Result<Vec<MaskCandidates>> {
    tokens
        .iter()
        .enumerate()
        .map(|(i, t)| preselect_mask_candidates(t, derive(seed, &[i as u64])))
        .collect()
}

/// Multiset of items, for marginal checks.
pub fn multiset<'a, I: IntoIterator<Item = &'a str>>(items: I) -> HashMap<&'a str, usize> {
    let mut m = HashMap::new();
    for s in items {
        *m.entry(s).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqdata::vocab::{encode, Scheme, PAD};
    use proptest::prelude::*;

    #[test]
    fn split_sizes() {
        let v: Vec<u32> = (0..10).collect();
        let (a, b) = split(&v, 0.8, 1).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let v: Vec<u32> = (0..5).collect();
        let (a, b) = split(&v, 0.8, 1).unwrap();
        assert_eq!((a.len(), b.len()), (4, 1));
        assert_eq!(split(&v, 0.8, 3).unwrap(), split(&v, 0.8, 3).unwrap());
        assert!(split(&[1], 0.8, 1).is_err());
        assert!(split(&v, 1.0, 1).is_err());
    }

    #[test]
    fn two_pair_negative_is_the_swap() {
        let pairs = vec![
            ("e1".to_string(), "c1".to_string()),
            ("e2".to_string(), "c2".to_string()),
        ];
        let neg = make_negatives(&pairs, 0).unwrap();
        assert_eq!(
            neg,
            vec![
                ("e1".to_string(), "c2".to_string()),
                ("e2".to_string(), "c1".to_string())
            ]
        );
    }

    #[test]
    fn identical_cdr3s_rejected() {
        let pairs = vec![
            ("e1".to_string(), "c".to_string()),
            ("e2".to_string(), "c".to_string()),
        ];
        assert!(make_negatives(&pairs, 0).is_err());
    }

    #[test]
    fn hundred_random_pairs_have_no_overlap() {
        use rand::Rng;
        let mut r = rng(42);
        let pairs: Vec<(String, String)> = (0..100)
            .map(|_| {
                (
                    format!("E{}", r.gen_range(0..10)),
                    format!("C{}", r.gen_range(0..60)),
                )
            })
            .collect();
        let neg = make_negatives(&pairs, 5).unwrap();
        let pos: HashSet<_> = pairs.iter().collect();
        assert_eq!(neg.iter().filter(|p| pos.contains(p)).count(), 0);
        assert_eq!(
            multiset(neg.iter().map(|(_, c)| c.as_str())),
            multiset(pairs.iter().map(|(_, c)| c.as_str()))
        );
        assert_eq!(
            multiset(neg.iter().map(|(e, _)| e.as_str())),
            multiset(pairs.iter().map(|(e, _)| e.as_str()))
        );
    }

    #[test]
    fn candidate_counts() {
        let s20 = encode(&"A".repeat(20), Scheme::Plain).unwrap();
        assert_eq!(preselect_mask_candidates(&s20, 0).unwrap().count(), 3);
        let s1 = encode("A", Scheme::Plain).unwrap();
        assert_eq!(preselect_mask_candidates(&s1, 0).unwrap().positions, vec![0]);
        let s7 = encode(&"A".repeat(7), Scheme::Plain).unwrap();
        assert_eq!(preselect_mask_candidates(&s7, 0).unwrap().count(), 1);
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 2usize..60, ratio in 0.05f64..0.95, seed in any::<u64>()) {
            let v: Vec<usize> = (0..n).collect();
            let (a, b) = split(&v, ratio, seed).unwrap();
            prop_assert_eq!(a.len(), (ratio * n as f64).round() as usize);
            let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
            all.sort();
            prop_assert_eq!(all, v);
        }

        #[test]
        fn candidates_avoid_pads(len in 1usize..40, pad in 0usize..8, seed in any::<u64>()) {
            let mut ids = vec![3usize; len];
            ids.extend(std::iter::repeat_n(PAD, pad));
            let t = TokenSequence::from_ids(ids);
            let c = preselect_mask_candidates(&t, seed).unwrap();
            prop_assert_eq!(c.count(), candidate_count(len));
            let uniq: HashSet<_> = c.positions.iter().collect();
            prop_assert_eq!(uniq.len(), c.count());
            prop_assert!(c.positions.iter().all(|&p| p < len));
        }
    }
}
