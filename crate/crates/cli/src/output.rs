//! Output directories are written in a hidden staging sibling and renamed
//! into place only when the command succeeds.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lsmtcr_core::nn::LogEntry;

pub struct Staging {
    dir: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl Staging {
    pub fn begin(target: &Path) -> Result<Self> {
        let name = target
            .file_name()
            .with_context(|| format!("output path {} has no final component", target.display()))?
            .to_string_lossy()
            .into_owned();
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent)?;
        let dir = parent.join(format!(".{name}.partial"));
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir(&dir)?;
        Ok(Self {
            dir,
            target: target.to_path_buf(),
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target)
                .with_context(|| format!("replacing {}", self.target.display()))?;
        }
        fs::rename(&self.dir, &self.target)?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

pub fn write_csv<R: AsRef<[String]>>(path: &Path, header: &str, rows: &[R]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header.split(','))?;
    for r in rows {
        w.write_record(r.as_ref())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_log(path: &Path, log: &[LogEntry]) -> Result<()> {
    let rows: Vec<[String; 3]> = log
        .iter()
        .map(|e| [e.step.to_string(), e.loss.to_string(), e.lr.to_string()])
        .collect();
    write_csv(path, "step,loss,lr", &rows)
}

pub fn write_metrics(path: &Path, metrics: &[(&str, String)]) -> Result<()> {
    let rows: Vec<[String; 2]> = metrics.iter().map(|(k, v)| [k.to_string(), v.clone()]).collect();
    write_csv(path, "metric,value", &rows)
}
