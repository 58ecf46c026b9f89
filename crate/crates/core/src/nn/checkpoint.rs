//! On-disk parameter format.
//!
//! A checkpoint directory holds:
//! - `manifest.txt`: one line per tensor, `name<TAB>f32<TAB>d0,d1,..<TAB>byte-offset`
//! - `weights.bin`: little-endian `f32` values, row-major, in manifest order
//! - `meta.txt`: `key=value` lines (model kind, dimensions, vocab hash,
//!   step count, configuration snapshot)

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

pub const MANIFEST: &str = "manifest.txt";
pub const WEIGHTS: &str = "weights.bin";
pub const META: &str = "meta.txt";

/// Sorted key/value metadata.
pub type Meta = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub entries: Vec<ManifestEntry>,
    pub tensors: Vec<Tensor>,
    pub meta: Meta,
}

impl Checkpoint {
    pub fn num_parameters(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::CorruptCheckpoint {
                path: PathBuf::new(),
                message: format!("meta key '{key}' missing"),
            })
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let s = self.meta_str(key)?;
        s.parse().map_err(|_| Error::CorruptCheckpoint {
            path: PathBuf::new(),
            message: format!("meta key '{key}' has unparsable value '{s}'"),
        })
    }

    /// Fails with a mismatch naming `key` unless the stored value equals
    /// `expected`.
    pub fn expect_meta(&self, key: &str, expected: &str) -> Result<()> {
        let found = self.meta_str(key)?;
        if found != expected {
            return Err(Error::Mismatch {
                dimension: key.to_string(),
                expected: expected.to_string(),
                found: found.to_string(),
            });
        }
        Ok(())
    }

    /// Copies every tensor into `store`; names and shapes must match
    /// exactly in both directions.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.entries.len() != store.len() {
            return Err(Error::Mismatch {
                dimension: "parameter count".into(),
                expected: store.len().to_string(),
                found: self.entries.len().to_string(),
            });
        }
        for (e, t) in self.entries.iter().zip(&self.tensors) {
            let id = store.id(&e.name).ok_or_else(|| Error::Mismatch {
                dimension: format!("parameter {}", e.name),
                expected: "present in model".into(),
                found: "absent".into(),
            })?;
            if store.value(id).shape() != t.shape() {
                return Err(Error::Mismatch {
                    dimension: format!("shape of {}", e.name),
                    expected: format!("{:?}", store.value(id).shape()),
                    found: format!("{:?}", t.shape()),
                });
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }
}

/// Writes the store and metadata into `dir` (created if absent).
pub fn save(dir: &Path, store: &ParamStore, meta: &Meta) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let mut weights = Vec::with_capacity(store.num_parameters() * 4);
    for p in store.iter() {
        let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "{}\tf32\t{}\t{}\n",
            p.name,
            shape.join(","),
            weights.len()
        ));
        for &v in p.value.data() {
            weights.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut meta_txt = String::new();
    for (k, v) in meta {
        meta_txt.push_str(&format!("{k}={v}\n"));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    fs::write(dir.join(WEIGHTS), weights)?;
    fs::write(dir.join(META), meta_txt)?;
    Ok(())
}

fn corrupt(dir: &Path, message: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        path: dir.to_path_buf(),
        message: message.into(),
    }
}

pub fn read_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join(META);
    let text = fs::read_to_string(&path).map_err(|_| corrupt(dir, "meta.txt unreadable"))?;
    let mut meta = Meta::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| corrupt(dir, format!("meta.txt line {} has no '='", i + 1)))?;
        meta.insert(k.to_string(), v.to_string());
    }
    Ok(meta)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|_| corrupt(dir, "manifest.txt unreadable"))?;
    let mut entries = Vec::new();
    let mut expected_offset = 0u64;
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |m: &str| corrupt(dir, format!("manifest line {}: {m}", i + 1));
        if fields.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        if fields[1] != "f32" {
            return Err(bad("unsupported dtype"));
        }
        let shape = if fields[2].is_empty() {
            Vec::new()
        } else {
            fields[2]
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("bad shape"))?
        };
        let offset: u64 = fields[3].parse().map_err(|_| bad("bad offset"))?;
        if offset != expected_offset {
            return Err(bad("offset out of sequence"));
        }
        expected_offset += 4 * shape.iter().product::<usize>() as u64;
        entries.push(ManifestEntry {
            name: fields[0].to_string(),
            dtype: fields[1].to_string(),
            shape,
            offset,
        });
    }
    Ok(entries)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    if !dir.exists() {
        return Err(Error::MissingInput(dir.to_path_buf()));
    }
    let entries = read_manifest(dir)?;
    let meta = read_meta(dir)?;
    let bytes = fs::read(dir.join(WEIGHTS)).map_err(|_| corrupt(dir, "weights.bin unreadable"))?;
    let total: usize = entries
        .iter()
        .map(|e| 4 * e.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != total {
        return Err(corrupt(
            dir,
            format!("weights.bin holds {} bytes, manifest needs {total}", bytes.len()),
        ));
    }
    let mut tensors = Vec::with_capacity(entries.len());
    for e in &entries {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let data = bytes[start..start + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push(Tensor::new(e.shape.clone(), data)?);
    }
    Ok(Checkpoint {
        entries,
        tensors,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamKind};
    use crate::rng::rng;

    #[test]
    fn round_trip_and_format() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        let mut r = rng(1);
        s.add("a.weight", &[2, 3], ParamKind::Weight, Init::Normal(1.0), &mut r);
        s.add("a.bias", &[3], ParamKind::Bias, Init::Ones, &mut r);
        let mut meta = Meta::new();
        meta.insert("kind".into(), "test".into());
        save(dir.path(), &s, &meta).unwrap();
        let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(manifest, "a.weight\tf32\t2,3\t0\na.bias\tf32\t3\t24\n");
        assert_eq!(fs::metadata(dir.path().join(WEIGHTS)).unwrap().len(), 36);

        let ck = load(dir.path()).unwrap();
        assert_eq!(ck.num_parameters(), 9);
        assert_eq!(ck.meta_str("kind").unwrap(), "test");
        let mut s2 = s.clone();
        s2.iter_mut().for_each(|p| p.value.data_mut().fill(0.0));
        ck.restore_into(&mut s2).unwrap();
        for (a, b) in s.iter().zip(s2.iter()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn truncated_weights_are_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.add("w", &[4], ParamKind::Weight, Init::Ones, &mut rng(0));
        save(dir.path(), &s, &Meta::new()).unwrap();
        fs::write(dir.path().join(WEIGHTS), [0u8; 5]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::CorruptCheckpoint { .. })));
        fs::write(dir.path().join(MANIFEST), "w\tf32\n").unwrap();
        assert!(matches!(load(dir.path()), Err(Error::CorruptCheckpoint { .. })));
    }
}
