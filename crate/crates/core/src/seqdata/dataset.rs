//! Paired-record CSV and plain-text corpora.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};
use crate::seqdata::vocab::validate_residues;

pub const CSV_HEADER: [&str; 9] = [
    "epitope",
    "cdr3_alpha",
    "cdr3_beta",
    "v_alpha",
    "j_alpha",
    "v_beta",
    "j_beta",
    "full_alpha",
    "full_beta",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Chain {
    Alpha,
    Beta,
}

impl Chain {
    pub fn name(self) -> &'static str {
        match self {
            Chain::Alpha => "alpha",
            Chain::Beta => "beta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alpha" | "a" | "TRA" => Ok(Chain::Alpha),
            "beta" | "b" | "TRB" => Ok(Chain::Beta),
            other => Err(Error::InvalidArgument(format!(
                "unknown chain '{other}' (expected alpha or beta)"
            ))),
        }
    }
}

impl std::fmt::Display for Chain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One dataset row.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairedRecord {
    pub epitope: String,
    pub cdr3_alpha: Option<String>,
    pub cdr3_beta: Option<String>,
    pub v_alpha: Option<String>,
    pub j_alpha: Option<String>,
    pub v_beta: Option<String>,
    pub j_beta: Option<String>,
    pub full_alpha: Option<String>,
    pub full_beta: Option<String>,
}

/// The chain-specific view of a record used by the assembler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainRecord<'a> {
    pub cdr3: &'a str,
    pub v: &'a str,
    pub j: &'a str,
    pub full: &'a str,
}

impl PairedRecord {
    pub fn cdr3(&self, chain: Chain) -> Option<&str> {
        match chain {
            Chain::Alpha => self.cdr3_alpha.as_deref(),
            Chain::Beta => self.cdr3_beta.as_deref(),
        }
    }

    pub fn genes(&self, chain: Chain) -> (Option<&str>, Option<&str>) {
        match chain {
            Chain::Alpha => (self.v_alpha.as_deref(), self.j_alpha.as_deref()),
            Chain::Beta => (self.v_beta.as_deref(), self.j_beta.as_deref()),
        }
    }

    pub fn full(&self, chain: Chain) -> Option<&str> {
        match chain {
            Chain::Alpha => self.full_alpha.as_deref(),
            Chain::Beta => self.full_beta.as_deref(),
        }
    }

    /// All four chain fields, or `None` if any is absent.
    pub fn chain_view(&self, chain: Chain) -> Option<ChainRecord<'_>> {
        let (v, j) = self.genes(chain);
        Some(ChainRecord {
            cdr3: self.cdr3(chain)?,
            v: v?,
            j: j?,
            full: self.full(chain)?,
        })
    }

    /// Checks residues and the CDR3-within-full-chain invariant.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.epitope.is_empty() {
            return Err("empty epitope".into());
        }
        let seqs = [
            ("epitope", Some(&self.epitope)),
            ("cdr3_alpha", self.cdr3_alpha.as_ref()),
            ("cdr3_beta", self.cdr3_beta.as_ref()),
            ("full_alpha", self.full_alpha.as_ref()),
            ("full_beta", self.full_beta.as_ref()),
        ];
        for (col, s) in seqs {
            if let Some(s) = s {
                validate_residues(s).map_err(|e| format!("{col}: {e}"))?;
            }
        }
        for chain in [Chain::Alpha, Chain::Beta] {
            if let (Some(cdr3), Some(full)) = (self.cdr3(chain), self.full(chain)) {
                if !full.contains(cdr3) {
                    return Err(format!(
                        "cdr3_{chain} '{cdr3}' is not a substring of full_{chain}"
                    ));
                }
            }
        }
        Ok(())
    }
}

fn opt(s: &str) -> Option<String> {
    let t = s.trim();
    (!t.is_empty()).then(|| t.to_string())
}

/// Loads the paired-record CSV. Errors carry the 1-based file line.
pub fn load_dataset(path: &Path) -> Result<Vec<PairedRecord>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_path(path)?;
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 9];
    for (k, name) in CSV_HEADER.iter().enumerate() {
        idx[k] = headers
            .iter()
            .position(|h| h.trim() == *name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }
    let width = headers.len();
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() != width {
            return Err(Error::Dataset {
                line,
                message: format!("expected {width} fields, found {}", row.len()),
            });
        }
        let f = |k: usize| row.get(idx[k]).unwrap_or("");
        let epitope = f(0).trim().to_string();
        let rec = PairedRecord {
            epitope,
            cdr3_alpha: opt(f(1)),
            cdr3_beta: opt(f(2)),
            v_alpha: opt(f(3)),
            j_alpha: opt(f(4)),
            v_beta: opt(f(5)),
            j_beta: opt(f(6)),
            full_alpha: opt(f(7)),
            full_beta: opt(f(8)),
        };
        rec.validate()
            .map_err(|message| Error::Dataset { line, message })?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes records with the canonical header.
pub fn write_dataset(path: &Path, records: &[PairedRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in records {
        let o = |s: &Option<String>| s.clone().unwrap_or_default();
        w.write_record([
            r.epitope.clone(),
            o(&r.cdr3_alpha),
            o(&r.cdr3_beta),
            o(&r.v_alpha),
            o(&r.j_alpha),
            o(&r.v_beta),
            o(&r.j_beta),
            o(&r.full_alpha),
            o(&r.full_beta),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a one-sequence-per-line corpus. Blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let s = line.trim();
        if s.is_empty() {
            continue;
        }
        validate_residues(s).map_err(|e| Error::Dataset {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(s.to_string());
    }
    Ok(out)
}

/// Per-chain V and J label vocabularies, sorted for stability.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneVocab {
    pub v_labels: Vec<String>,
    pub j_labels: Vec<String>,
}

impl GeneVocab {
    /// Builds the vocabulary from training records for one chain.
    pub fn from_records(records: &[PairedRecord], chain: Chain) -> Self {
        let mut v = BTreeSet::new();
        let mut j = BTreeSet::new();
        for r in records {
            let (rv, rj) = r.genes(chain);
            if let Some(x) = rv {
                v.insert(x.to_string());
            }
            if let Some(x) = rj {
                j.insert(x.to_string());
            }
        }
        Self {
            v_labels: v.into_iter().collect(),
            j_labels: j.into_iter().collect(),
        }
    }

    pub fn v_index(&self, label: &str) -> Result<usize> {
        self.v_labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel {
                kind: "V gene",
                label: label.to_string(),
            })
    }

    pub fn j_index(&self, label: &str) -> Result<usize> {
        self.j_labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel {
                kind: "J gene",
                label: label.to_string(),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    const HEADER: &str =
        "epitope,cdr3_alpha,cdr3_beta,v_alpha,j_alpha,v_beta,j_beta,full_alpha,full_beta\n";

    #[test]
    fn loads_rows_in_order() {
        let f = write(&format!(
            "{HEADER}GILGFVFTL,CAVF,CASSF,TRAV1,TRAJ1,TRBV1,TRBJ1,MKCAVFG,MACASSFQ\n\
             NLVPMVATV,,CASRF,,,TRBV2,TRBJ2,,\n\
             KLGGALQAK,CAGF,,TRAV2,TRAJ2,,,,\n"
        ));
        let recs = load_dataset(f.path()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].epitope, "GILGFVFTL");
        assert_eq!(recs[1].cdr3_alpha, None);
        assert_eq!(recs[1].v_alpha, None);
        assert_eq!(recs[2].cdr3_beta, None);
        assert!(recs[0].chain_view(Chain::Beta).is_some());
        assert!(recs[1].chain_view(Chain::Beta).is_none());
    }

    #[test]
    fn substring_violation_reports_line() {
        let f = write(&format!(
            "{HEADER}GILGFVFTL,,CASSF,,,TRBV1,TRBJ1,,MAAAAAQ\n"
        ));
        match load_dataset(f.path()) {
            Err(Error::Dataset { line: 2, message }) => assert!(message.contains("substring")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_and_columns() {
        let f = write(&format!("{HEADER}GILGFVFTL,CAVF\n"));
        assert!(matches!(
            load_dataset(f.path()),
            Err(Error::Dataset { line: 2, .. })
        ));
        let f = write("epitope,cdr3_beta\nGIL,CAS\n");
        assert!(matches!(load_dataset(f.path()), Err(Error::MissingColumn(_))));
        let f = write(&format!("{HEADER}GILGFVFTL,,CASZF,,,,,,\n"));
        assert!(matches!(
            load_dataset(f.path()),
            Err(Error::Dataset { line: 2, .. })
        ));
    }

    #[test]
    fn corpus_skips_blank_lines() {
        let f = write("CASSF\n\nCASRF\n");
        assert_eq!(load_corpus(f.path()).unwrap(), vec!["CASSF", "CASRF"]);
        let f = write("CASSF\nCAB\n");
        assert!(matches!(
            load_corpus(f.path()),
            Err(Error::Dataset { line: 2, .. })
        ));
    }

    #[test]
    fn gene_vocab_is_sorted_and_total() {
        let recs = vec![
            PairedRecord {
                epitope: "A".into(),
                v_beta: Some("TRBV9".into()),
                j_beta: Some("TRBJ1".into()),
                ..Default::default()
            },
            PairedRecord {
                epitope: "A".into(),
                v_beta: Some("TRBV2".into()),
                j_beta: Some("TRBJ1".into()),
                ..Default::default()
            },
        ];
        let gv = GeneVocab::from_records(&recs, Chain::Beta);
        assert_eq!(gv.v_labels, vec!["TRBV2", "TRBV9"]);
        assert_eq!(gv.j_labels.len(), 1);
        assert_eq!(gv.v_index("TRBV9").unwrap(), 1);
        assert!(gv.v_index("TRBV7").is_err());
    }
}
