//! Readers for the three sequence file layouts the commands accept: the
//! paired dataset CSV, the generation CSV and plain one-per-line corpora.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use lsmtcr_core::error::Error as CoreError;
use lsmtcr_core::seqdata::{load_corpus, load_dataset, Chain, PairedRecord, CSV_HEADER};

pub const GENERATION_HEADER: &str = "epitope,chain,rank,cdr3,logprob,temperature,seed";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Dataset,
    Generation,
    Corpus,
}

pub fn layout(path: &Path) -> Result<Layout> {
    if !path.exists() {
        return Err(CoreError::MissingInput(path.to_path_buf()).into());
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first = text.lines().next().unwrap_or("").trim();
    Ok(if first == CSV_HEADER.join(",") {
        Layout::Dataset
    } else if first == GENERATION_HEADER {
        Layout::Generation
    } else {
        Layout::Corpus
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedRow {
    pub epitope: String,
    pub chain: String,
    pub cdr3: String,
    pub temperature: String,
}

pub fn read_generation(path: &Path) -> Result<Vec<GeneratedRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).map(str::to_string);
        let (Some(epitope), Some(chain), Some(cdr3), Some(temperature)) = (field(0), field(1), field(3), field(5)) else {
            return Err(CoreError::Dataset {
                line: i + 2,
                message: "generation row has too few fields".into(),
            }
            .into());
        };
        out.push(GeneratedRow {
            epitope,
            chain,
            cdr3,
            temperature,
        });
    }
    Ok(out)
}

/// CDR3s to assemble or classify, with references when the input is a
/// dataset.
#[derive(Debug, Clone)]
pub struct Cdr3Input {
    pub cdr3s: Vec<String>,
    pub denovo: bool,
    pub records: Option<Vec<PairedRecord>>,
}

pub fn read_cdr3s(path: &Path, chain: Chain, plain_is_denovo: bool) -> Result<Cdr3Input> {
    match layout(path)? {
        Layout::Dataset => {
            let records: Vec<PairedRecord> = load_dataset(path)?
                .into_iter()
                .filter(|r| r.cdr3(chain).is_some())
                .collect();
            Ok(Cdr3Input {
                cdr3s: records.iter().filter_map(|r| r.cdr3(chain).map(str::to_string)).collect(),
                denovo: false,
                records: Some(records),
            })
        }
        Layout::Generation => {
            let rows = read_generation(path)?;
            let cdr3s: Vec<String> = rows
                .iter()
                .filter(|r| r.chain == chain.name())
                .map(|r| r.cdr3.clone())
                .collect();
            if cdr3s.is_empty() && !rows.is_empty() {
                return Err(CoreError::Mismatch {
                    dimension: "chain".into(),
                    expected: chain.name().into(),
                    found: rows[0].chain.clone(),
                }
                .into());
            }
            Ok(Cdr3Input {
                cdr3s,
                denovo: true,
                records: None,
            })
        }
        Layout::Corpus => Ok(Cdr3Input {
            cdr3s: load_corpus(path)?,
            denovo: plain_is_denovo,
            records: None,
        }),
    }
}

/// Named repertoires in a file. Generation files yield one repertoire per
/// temperature; other layouts yield one.
pub fn read_repertoires(path: &Path, chain: Chain) -> Result<Vec<(String, Vec<String>)>> {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into());
    match layout(path)? {
        Layout::Generation => {
            let mut groups: Vec<(String, Vec<String>)> = Vec::new();
            for r in read_generation(path)? {
                if r.chain != chain.name() {
                    continue;
                }
                let name = format!("{stem}@tau={}", r.temperature);
                match groups.iter_mut().find(|g| g.0 == name) {
                    Some(g) => g.1.push(r.cdr3),
                    None => groups.push((name, vec![r.cdr3])),
                }
            }
            Ok(groups)
        }
        _ => Ok(vec![(stem, read_cdr3s(path, chain, false)?.cdr3s)]),
    }
}
