mod common;

use common::toy;
use lsmtcr_core::metrics::{composite_scores, diversity_report, novel_ratio, similarity_report};
use lsmtcr_core::seqdata::load_corpus;

#[test]
fn reference_against_itself() {
    let beta = load_corpus(&toy("cdr3_beta.txt")).unwrap();
    let r = diversity_report(&beta, &beta, 0).unwrap();
    assert_eq!(novel_ratio(&beta, &beta).unwrap(), 0.0);
    assert_eq!(r.novel_ratio, 0.0);
    for v in [r.shannon_rel, r.simpson_rel] {
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }
    assert!(r.length_realism > 0.99);
}

#[test]
fn composite_prefers_the_broader_repertoire() {
    let beta = load_corpus(&toy("cdr3_beta.txt")).unwrap();
    let narrow: Vec<&str> = beta.iter().take(4).cycle().take(40).map(String::as_str).collect();
    let broad: Vec<&str> = beta.iter().take(40).map(String::as_str).collect();
    let mut reports = vec![
        diversity_report(&narrow, &beta, 1).unwrap(),
        diversity_report(&broad, &beta, 1).unwrap(),
    ];
    composite_scores(&mut reports).unwrap();
    assert!(reports[1].composite > reports[0].composite);
}

#[test]
fn identical_pairs_are_perfect() {
    let beta = load_corpus(&toy("cdr3_beta.txt")).unwrap();
    let pairs: Vec<(&str, &str)> = beta.iter().map(|s| (s.as_str(), s.as_str())).collect();
    let r = similarity_report(&pairs).unwrap();
    assert_eq!(r.exact_match_rate, 1.0);
    assert_eq!(r.mean_norm_levenshtein, 0.0);
    assert_eq!(r.jaccard3, 1.0);
    assert!(r.js3.abs() < 1e-12);
}
