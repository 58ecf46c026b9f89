//! Repertoire diversity, sequence similarity and k-mer spectrum metrics.
//!
//! All logarithms are natural; `0 ln 0` is taken as 0.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::index::sample;

use crate::error::{invalid, Result};
use crate::rng::rng;
use crate::seqdata::vocab::AMINO_ACIDS;

/// Normalized k-mer frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct KmerSpectrum {
    pub k: usize,
    pub freq: BTreeMap<String, f64>,
}

pub fn kmer_set<S: AsRef<str>>(seqs: &[S], k: usize) -> Result<BTreeSet<String>> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    let mut set = BTreeSet::new();
    let mut any = false;
    for s in seqs {
        let s = s.as_ref().as_bytes();
        if s.len() >= k {
            any = true;
            for w in s.windows(k) {
                set.insert(String::from_utf8_lossy(w).into_owned());
            }
        }
    }
    if !any {
        return Err(invalid(format!("no sequence has length >= {k}")));
    }
    Ok(set)
}

pub fn kmer_spectrum<S: AsRef<str>>(seqs: &[S], k: usize) -> Result<KmerSpectrum> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0usize;
    for s in seqs {
        let s = s.as_ref().as_bytes();
        if s.len() >= k {
            for w in s.windows(k) {
                *counts
                    .entry(String::from_utf8_lossy(w).into_owned())
                    .or_insert(0) += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(invalid(format!("no sequence has length >= {k}")));
    }
    Ok(KmerSpectrum {
        k,
        freq: counts
            .into_iter()
            .map(|(km, c)| (km, c as f64 / total as f64))
            .collect(),
    })
}

pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> Result<f64> {
    if a.is_empty() && b.is_empty() {
        return Err(invalid("jaccard of two empty sets is undefined"));
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    Ok(inter as f64 / union as f64)
}

/// Unique sequences over total sequences.
pub fn diversity_ratio<S: AsRef<str>>(rep: &[S]) -> Result<f64> {
    if rep.is_empty() {
        return Err(invalid("empty repertoire"));
    }
    let uniq: HashSet<&str> = rep.iter().map(|s| s.as_ref()).collect();
    Ok(uniq.len() as f64 / rep.len() as f64)
}

/// Share of unique sequences absent from the reference.
pub fn novel_ratio<S: AsRef<str>, R: AsRef<str>>(rep: &[S], reference: &[R]) -> Result<f64> {
    if rep.is_empty() {
        return Err(invalid("empty repertoire"));
    }
    let reference: HashSet<&str> = reference.iter().map(|s| s.as_ref()).collect();
    let uniq: HashSet<&str> = rep.iter().map(|s| s.as_ref()).collect();
    let novel = uniq.iter().filter(|s| !reference.contains(*s)).count();
    Ok(novel as f64 / uniq.len() as f64)
}

fn frequencies<S: AsRef<str>>(rep: &[S]) -> Vec<f64> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in rep {
        *counts.entry(s.as_ref()).or_insert(0) += 1;
    }
    let n = rep.len() as f64;
    counts.values().map(|&c| c as f64 / n).collect()
}

/// Shannon entropy of the sequence-identity distribution.
pub fn shannon<S: AsRef<str>>(rep: &[S]) -> Result<f64> {
    if rep.is_empty() {
        return Err(invalid("empty repertoire"));
    }
    Ok(-frequencies(rep)
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>())
}

/// Gini-Simpson index `1 - sum p_i^2` of the sequence-identity distribution.
pub fn simpson<S: AsRef<str>>(rep: &[S]) -> Result<f64> {
    if rep.is_empty() {
        return Err(invalid("empty repertoire"));
    }
    Ok(1.0 - frequencies(rep).iter().map(|p| p * p).sum::<f64>())
}

/// Reference subsampled (without replacement) to `n` sequences; the whole
/// reference when it is not larger than `n`.
pub fn subsample<R: AsRef<str>>(reference: &[R], n: usize, seed: u64) -> Vec<&str> {
    if reference.len() <= n {
        return reference.iter().map(|s| s.as_ref()).collect();
    }
    let mut idx: Vec<usize> = sample(&mut rng(seed), reference.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| reference[i].as_ref()).collect()
}

/// `metric(generated) / metric(reference subsample)`; NaN when the
/// reference value is zero.
pub fn relative<S: AsRef<str>, R: AsRef<str>>(
    rep: &[S],
    reference: &[R],
    seed: u64,
    metric: fn(&[&str]) -> Result<f64>,
) -> Result<f64> {
    let gen: Vec<&str> = rep.iter().map(|s| s.as_ref()).collect();
    let sub = subsample(reference, gen.len(), seed);
    let den = metric(&sub)?;
    if den == 0.0 {
        return Ok(f64::NAN);
    }
    Ok(metric(&gen)? / den)
}

/// Entropy of pooled residue frequencies divided by `ln 20`.
pub fn aa_div<S: AsRef<str>>(rep: &[S]) -> Result<f64> {
    if rep.is_empty() {
        return Err(invalid("empty repertoire"));
    }
    let mut counts = [0usize; 20];
    let mut total = 0usize;
    for s in rep {
        for b in s.as_ref().bytes() {
            if let Some(i) = AMINO_ACIDS.iter().position(|&a| a == b) {
                counts[i] += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(invalid("repertoire holds no residues"));
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    Ok(h / 20f64.ln())
}

fn mean_std(lengths: &[f64]) -> (f64, f64) {
    let n = lengths.len() as f64;
    let mean = lengths.iter().sum::<f64>() / n;
    let var = lengths.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `exp(-|mean_gen - mean_ref| / std_ref)`, population standard deviation.
/// A zero-spread reference scores 1 on equal means and 0 otherwise.
pub fn length_realism<S: AsRef<str>, R: AsRef<str>>(rep: &[S], reference: &[R]) -> Result<f64> {
    if rep.is_empty() || reference.is_empty() {
        return Err(invalid("length realism needs non-empty repertoires"));
    }
    let gen: Vec<f64> = rep.iter().map(|s| s.as_ref().len() as f64).collect();
    let refl: Vec<f64> = reference.iter().map(|s| s.as_ref().len() as f64).collect();
    let (mg, _) = mean_std(&gen);
    let (mr, sr) = mean_std(&refl);
    if sr == 0.0 {
        return Ok(if mg == mr { 1.0 } else { 0.0 });
    }
    Ok((-(mg - mr).abs() / sr).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiversityReport {
    pub jaccard2: f64,
    pub diversity_ratio: f64,
    pub novel_ratio: f64,
    pub shannon_rel: f64,
    pub simpson_rel: f64,
    pub aa_div: f64,
    pub length_realism: f64,
    /// Filled by [`composite_scores`]; NaN until then.
    pub composite: f64,
}

pub const DIVERSITY_HEADER: &str =
    "condition,jaccard2,diversity_ratio,novel_ratio,shannon_rel,simpson_rel,aa_div,length_realism,composite";

impl DiversityReport {
    pub fn metrics(&self) -> [f64; 7] {
        [
            self.jaccard2,
            self.diversity_ratio,
            self.novel_ratio,
            self.shannon_rel,
            self.simpson_rel,
            self.aa_div,
            self.length_realism,
        ]
    }

    pub fn names() -> [&'static str; 8] {
        [
            "jaccard2",
            "diversity_ratio",
            "novel_ratio",
            "shannon_rel",
            "simpson_rel",
            "aa_div",
            "length_realism",
            "composite",
        ]
    }

    pub fn from_metrics(m: [f64; 7]) -> Self {
        Self {
            jaccard2: m[0],
            diversity_ratio: m[1],
            novel_ratio: m[2],
            shannon_rel: m[3],
            simpson_rel: m[4],
            aa_div: m[5],
            length_realism: m[6],
            composite: f64::NAN,
        }
    }
}

/// The seven per-repertoire metrics against a reference repertoire.
pub fn diversity_report<S: AsRef<str>, R: AsRef<str>>(
    rep: &[S],
    reference: &[R],
    seed: u64,
) -> Result<DiversityReport> {
    let gen2 = kmer_set(rep, 2)?;
    let ref2 = kmer_set(reference, 2)?;
    Ok(DiversityReport::from_metrics([
        jaccard(&gen2, &ref2)?,
        diversity_ratio(rep)?,
        novel_ratio(rep, reference)?,
        relative(rep, reference, seed, |s| shannon(s))?,
        relative(rep, reference, seed, |s| simpson(s))?,
        aa_div(rep)?,
        length_realism(rep, reference)?,
    ]))
}

/// Min-max normalizes each metric across conditions (a constant metric
/// maps to 0.5, an undefined value to 0.5) and averages the seven.
pub fn composite_scores(reports: &mut [DiversityReport]) -> Result<()> {
    if reports.len() < 2 {
        return Err(invalid(
            "composite score needs at least 2 conditions to normalize across",
        ));
    }
    let mut totals = vec![0.0; reports.len()];
    for m in 0..7 {
        let vals: Vec<f64> = reports.iter().map(|r| r.metrics()[m]).collect();
        let defined = vals.iter().copied().filter(|v| v.is_finite());
        let lo = defined.clone().fold(f64::INFINITY, f64::min);
        let hi = defined.fold(f64::NEG_INFINITY, f64::max);
        for (t, v) in totals.iter_mut().zip(&vals) {
            *t += if !v.is_finite() || hi <= lo {
                0.5
            } else {
                (v - lo) / (hi - lo)
            };
        }
    }
    for (r, t) in reports.iter_mut().zip(totals) {
        r.composite = t / 7.0;
    }
    Ok(())
}

/// Unit-cost edit distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a = a.as_bytes();
    let b = b.as_bytes();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn norm_levenshtein(a: &str, b: &str) -> f64 {
    let m = a.len().max(b.len());
    if m == 0 {
        return 0.0;
    }
    levenshtein(a, b) as f64 / m as f64
}

/// Mismatches over the common prefix length plus the length gap, divided
/// by the longer length.
pub fn norm_hamming(a: &str, b: &str) -> f64 {
    let m = a.len().max(b.len());
    if m == 0 {
        return 0.0;
    }
    let mism = a
        .bytes()
        .zip(b.bytes())
        .filter(|(x, y)| x != y)
        .count();
    (mism + a.len().abs_diff(b.len())) as f64 / m as f64
}

pub fn exact_match_rate<A: AsRef<str>, B: AsRef<str>>(pairs: &[(A, B)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(invalid("exact-match rate of zero pairs"));
    }
    let hits = pairs
        .iter()
        .filter(|(a, b)| a.as_ref() == b.as_ref())
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

fn kl_to_mixture(p: &BTreeMap<String, f64>, q: &BTreeMap<String, f64>) -> f64 {
    p.iter()
        .filter(|(_, &pv)| pv > 0.0)
        .map(|(k, &pv)| {
            let m = 0.5 * (pv + q.get(k).copied().unwrap_or(0.0));
            pv * (pv / m).ln()
        })
        .sum()
}

/// Jensen-Shannon divergence in nats, in `[0, ln 2]`.
pub fn js_divergence(a: &KmerSpectrum, b: &KmerSpectrum) -> Result<f64> {
    if a.k != b.k {
        return Err(invalid(format!("k mismatch: {} vs {}", a.k, b.k)));
    }
    let v = 0.5 * kl_to_mixture(&a.freq, &b.freq) + 0.5 * kl_to_mixture(&b.freq, &a.freq);
    Ok(v.clamp(0.0, std::f64::consts::LN_2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityReport {
    pub exact_match_rate: f64,
    pub mean_norm_hamming: f64,
    pub mean_norm_levenshtein: f64,
    pub jaccard3: f64,
    pub js2: f64,
    pub js3: f64,
}

/// Aligned (generated, reference) full-length comparison.
pub fn similarity_report<A: AsRef<str>, B: AsRef<str>>(pairs: &[(A, B)]) -> Result<SimilarityReport> {
    let n = pairs.len() as f64;
    let exact = exact_match_rate(pairs)?;
    let ham = pairs
        .iter()
        .map(|(a, b)| norm_hamming(a.as_ref(), b.as_ref()))
        .sum::<f64>()
        / n;
    let lev = pairs
        .iter()
        .map(|(a, b)| norm_levenshtein(a.as_ref(), b.as_ref()))
        .sum::<f64>()
        / n;
    let gen: Vec<&str> = pairs.iter().map(|(a, _)| a.as_ref()).collect();
    let refs: Vec<&str> = pairs.iter().map(|(_, b)| b.as_ref()).collect();
    let j3 = jaccard(&kmer_set(&gen, 3)?, &kmer_set(&refs, 3)?)?;
    let js2 = js_divergence(&kmer_spectrum(&gen, 2)?, &kmer_spectrum(&refs, 2)?)?;
    let js3 = js_divergence(&kmer_spectrum(&gen, 3)?, &kmer_spectrum(&refs, 3)?)?;
    Ok(SimilarityReport {
        exact_match_rate: exact,
        mean_norm_hamming: ham,
        mean_norm_levenshtein: lev,
        jaccard3: j3,
        js2,
        js3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn kmers() {
        assert_eq!(kmer_set(&["CAS"], 2).unwrap(), set(&["CA", "AS"]));
        let sp = kmer_spectrum(&["AA", "AA"], 2).unwrap();
        assert_eq!(sp.freq.len(), 1);
        assert_eq!(sp.freq["AA"], 1.0);
        let sp = kmer_spectrum(&["CAS", "AST"], 2).unwrap();
        assert_eq!(sp.freq["CA"], 0.25);
        assert_eq!(sp.freq["AS"], 0.5);
        assert_eq!(sp.freq["ST"], 0.25);
        assert!(kmer_set(&["A"], 2).is_err());
        assert!(kmer_spectrum(&["A", "C"], 2).is_err());
    }

    #[test]
    fn jaccard_values() {
        let a = set(&["CA", "AS", "SS"]);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &set(&["QQ"])).unwrap(), 0.0);
        assert_eq!(jaccard(&a, &set(&["CA", "AS", "ST"])).unwrap(), 0.5);
        assert!(jaccard::<String>(&BTreeSet::new(), &BTreeSet::new()).is_err());
    }

    #[test]
    fn ratios() {
        let same = vec!["CASSF"; 10];
        assert!((diversity_ratio(&same).unwrap() - 0.1).abs() < 1e-15);
        let uniq = ["A", "C", "D"];
        assert_eq!(diversity_ratio(&uniq).unwrap(), 1.0);
        assert_eq!(novel_ratio(&uniq, &["Q"]).unwrap(), 1.0);
        assert_eq!(novel_ratio(&["a", "b", "c", "d"], &["a", "b"]).unwrap(), 0.5);
    }

    #[test]
    fn entropy_indices() {
        let five = ["A", "C", "D", "E", "F"];
        assert!((shannon(&five).unwrap() - 5f64.ln()).abs() < 1e-15);
        let one = ["A"; 4];
        assert_eq!(shannon(&one).unwrap(), 0.0);
        assert_eq!(simpson(&one).unwrap(), 0.0);
        assert_eq!(simpson(&["A", "C"]).unwrap(), 0.5);
        assert!(relative(&["A", "C"], &["A", "A"], 0, |s| shannon(s))
            .unwrap()
            .is_nan());
    }

    #[test]
    fn aa_div_values() {
        assert!((aa_div(&["ACDEFGHIKLMNPQRSTVWY"]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(aa_div(&["AAAA"]).unwrap(), 0.0);
        let v = aa_div(&["ACAC"]).unwrap();
        assert!((v - 2f64.ln() / 20f64.ln()).abs() < 1e-15);
        assert!((v - 0.2314).abs() < 1e-4);
    }

    #[test]
    fn length_realism_values() {
        assert_eq!(length_realism(&["AAA"], &["AA", "AAAA"]).unwrap(), 1.0);
        // reference lengths 2 and 4: mean 3, std 1
        let v = length_realism(&["AAAA"], &["AA", "AAAA"]).unwrap();
        assert!((v - (-1f64).exp()).abs() < 1e-15);
        assert!(length_realism(&["A".repeat(500)], &["AA", "AAAA"]).unwrap() < 1e-100);
        assert_eq!(length_realism(&["AA"], &["AA", "AA"]).unwrap(), 1.0);
        assert_eq!(length_realism(&["A"], &["AA", "AA"]).unwrap(), 0.0);
    }

    #[test]
    fn composite_laws() {
        let best = DiversityReport::from_metrics([0.9; 7]);
        let worst = DiversityReport::from_metrics([0.1; 7]);
        let mid = DiversityReport::from_metrics([0.5, 0.2, 0.8, 0.5, 0.5, 0.5, 0.5]);
        let mut rs = vec![best, worst, mid];
        composite_scores(&mut rs).unwrap();
        assert_eq!(rs[0].composite, 1.0);
        assert_eq!(rs[1].composite, 0.0);

        let a = DiversityReport::from_metrics([0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
        let mut b = a;
        b.novel_ratio = 0.9;
        let mut rs = vec![a, b];
        composite_scores(&mut rs).unwrap();
        assert!((rs[0].composite - (0.5 - 0.5 / 7.0)).abs() < 1e-15);
        assert!((rs[1].composite - (0.5 + 0.5 / 7.0)).abs() < 1e-15);

        assert!(composite_scores(&mut [a]).is_err());
    }

    #[test]
    fn distances() {
        assert_eq!(levenshtein("CASSL", "CASSL"), 0);
        assert_eq!(levenshtein("CASSL", "CASSF"), 1);
        assert_eq!(levenshtein("", "ABC"), 3);
        assert_eq!(norm_levenshtein("", ""), 0.0);
        assert_eq!(norm_hamming("ACD", "ACD"), 0.0);
        assert_eq!(norm_hamming("ACD", "CDE"), 1.0);
        assert_eq!(norm_hamming("AAAA", "AAA"), 0.25);
        assert_eq!(norm_hamming("", ""), 0.0);
    }

    #[test]
    fn exact_match() {
        let p = [("a", "a"), ("b", "b"), ("c", "c"), ("d", "x"), ("e", "y")];
        assert!((exact_match_rate(&p).unwrap() - 0.6).abs() < 1e-15);
        assert!(exact_match_rate::<&str, &str>(&[]).is_err());
    }

    #[test]
    fn js_values() {
        let sp = |pairs: &[(&str, f64)]| KmerSpectrum {
            k: 1,
            freq: pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        };
        let a = sp(&[("a", 1.0)]);
        let b = sp(&[("a", 0.5), ("b", 0.5)]);
        assert_eq!(js_divergence(&a, &a).unwrap(), 0.0);
        assert!((js_divergence(&a, &sp(&[("b", 1.0)])).unwrap() - 2f64.ln()).abs() < 1e-15);
        // direct sum: M = {a: .75, b: .25}
        let kl_pm = 1.0 * (1.0f64 / 0.75).ln();
        let kl_qm = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        let want = 0.5 * kl_pm + 0.5 * kl_qm;
        assert!((js_divergence(&a, &b).unwrap() - want).abs() < 1e-15);
        let mut c = a.clone();
        c.k = 2;
        assert!(js_divergence(&a, &c).is_err());
    }

    fn residues(max: usize) -> impl Strategy<Value = String> {
        proptest::collection::vec(proptest::sample::select(b"ACDE".to_vec()), 0..=max)
            .prop_map(|v| String::from_utf8(v).unwrap())
    }

    proptest! {
        #[test]
        fn triangle_inequality(a in residues(10), b in residues(10), c in residues(10)) {
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        }

        #[test]
        fn levenshtein_bounded_by_hamming(a in residues(10), b in residues(10)) {
            let m = a.len().max(b.len()) as f64;
            let ham = (norm_hamming(&a, &b) * m).round() as usize;
            prop_assert!(levenshtein(&a, &b) <= ham);
        }

        #[test]
        fn jaccard_symmetric(a in proptest::collection::btree_set(0u8..20, 0..10),
                             b in proptest::collection::btree_set(0u8..20, 1..10)) {
            prop_assert_eq!(jaccard(&a, &b).unwrap(), jaccard(&b, &a).unwrap());
        }
    }
}
