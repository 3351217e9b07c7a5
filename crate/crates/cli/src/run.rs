//! Run directories: manifest, lock file and line-delimited metric logs.
//!
//! Every subcommand writes into a fresh directory under the run root and never
//! touches another run's files. The manifest is written once when the run
//! opens and rewritten in place when it finishes.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use jointok_core::autograd::Scalar;
use jointok_core::{Dataset, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.jsonl";
const LOCK: &str = ".lock";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: TrainConfig,
    pub seed: u64,
    pub code_version: String,
    pub dataset_fingerprint: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
    pub args: Vec<String>,
    /// subcommand-specific fields (source checkpoint, ordering permutation, ...)
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// SHA-256 over the dataset shape, labels and pixel bit patterns.
pub fn dataset_fingerprint<T: Scalar>(parts: &[&Dataset<T>]) -> String {
    let mut h = Sha256::new();
    for d in parts {
        h.update((d.len() as u64).to_le_bytes());
        h.update((d.image_size as u64).to_le_bytes());
        for &l in &d.labels {
            h.update((l as u64).to_le_bytes());
        }
        for img in &d.images {
            for v in img.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// An open, locked run directory.
pub struct RunDir {
    pub path: PathBuf,
    pub manifest: RunManifest,
    metrics: Option<BufWriter<File>>,
}

impl RunDir {
    /// Creates `root/name`, takes the lock and writes the manifest.
    pub fn create(root: &Path, name: &str, manifest: RunManifest) -> Result<Self> {
        let path = root.join(name);
        if path.join(MANIFEST).exists() {
            bail!("run directory {} already holds a run", path.display());
        }
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut run = Self::lock(path, manifest)?;
        run.write_manifest()?;
        Ok(run)
    }

    /// Re-opens an existing run directory for resumption.
    pub fn reopen(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path.join(MANIFEST)).with_context(|| format!("no run manifest in {}", path.display()))?;
        let manifest: RunManifest = serde_json::from_str(&text).context("malformed run manifest")?;
        Self::lock(path.to_path_buf(), manifest)
    }

    fn lock(path: PathBuf, manifest: RunManifest) -> Result<Self> {
        let lock = path.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => writeln!(f, "{}", std::process::id())?,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!("run directory {} is locked by another process ({})", path.display(), lock.display())
            }
            Err(e) => return Err(e).with_context(|| format!("creating {}", lock.display())),
        }
        Ok(Self { path, manifest, metrics: None })
    }

    pub fn write_manifest(&mut self) -> Result<()> {
        let tmp = self.path.join(".manifest.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&self.manifest)?)?;
        fs::rename(&tmp, self.path.join(MANIFEST))?;
        Ok(())
    }

    pub fn finish(&mut self, status: &str) -> Result<()> {
        self.flush()?;
        self.manifest.finished_unix = Some(unix_now());
        self.manifest.status = status.to_string();
        self.write_manifest()
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_json<S: Serialize>(&self, name: &str, value: &S) -> Result<()> {
        fs::write(self.file(name), serde_json::to_string_pretty(value)?).with_context(|| format!("writing {name}"))
    }

    /// Appends one record to the metric log.
    pub fn log(&mut self, record: &serde_json::Value) -> Result<()> {
        if self.metrics.is_none() {
            let f = OpenOptions::new().create(true).append(true).open(self.file(METRICS))?;
            self.metrics = Some(BufWriter::new(f));
        }
        let w = self.metrics.as_mut().expect("metric log open");
        serde_json::to_writer(&mut *w, record)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.metrics {
            w.flush()?;
        }
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = self.flush();
        if self.manifest.status == "running" {
            let _ = self.finish("failed");
        }
        let _ = fs::remove_file(self.path.join(LOCK));
    }
}

/// Reads a metric log back, one map per record.
pub fn read_metrics(path: &Path) -> Result<Vec<serde_json::Map<String, serde_json::Value>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| match serde_json::from_str(l)? {
            serde_json::Value::Object(m) => Ok(m),
            _ => bail!("metric record is not an object"),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> RunManifest {
        RunManifest {
            subcommand: "train".into(),
            config: TrainConfig::default(),
            seed: 0,
            code_version: "test".into(),
            dataset_fingerprint: String::new(),
            started_unix: 0,
            finished_unix: None,
            status: "running".into(),
            args: vec![],
            extra: serde_json::Value::Null,
        }
    }

    #[test]
    fn fingerprint_sees_pixels_and_labels() {
        let a = Dataset::<f32>::synthetic(8, 8, 2, 0);
        let mut b = a.clone();
        assert_eq!(dataset_fingerprint(&[&a]), dataset_fingerprint(&[&b]));
        b.labels[3] = 0;
        b.labels[2] = 1;
        assert_ne!(dataset_fingerprint(&[&a]), dataset_fingerprint(&[&b]));
        assert_ne!(dataset_fingerprint(&[&a]), dataset_fingerprint(&[&Dataset::<f32>::synthetic(8, 8, 2, 1)]));
    }

    #[test]
    fn metric_log_round_trip_and_lock() {
        let tmp = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(tmp.path(), "r", manifest()).unwrap();
        assert!(RunDir::reopen(&run.path).is_err(), "second writer must see the lock");
        run.log(&serde_json::json!({"step": 0, "total": 1.5})).unwrap();
        run.log(&serde_json::json!({"step": 1, "total": 0.5})).unwrap();
        run.finish("completed").unwrap();
        let path = run.path.clone();
        drop(run);
        let recs = read_metrics(&path.join(METRICS)).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1]["total"], 0.5);
        let again = RunDir::reopen(&path).unwrap();
        assert_eq!(again.manifest.status, "completed");
        assert!(RunDir::create(tmp.path(), "r", manifest()).is_err());
    }

    #[test]
    fn dropped_run_is_marked_failed() {
        let tmp = tempfile::tempdir().unwrap();
        let path = RunDir::create(tmp.path(), "r", manifest()).unwrap().path.clone();
        let m: RunManifest = serde_json::from_str(&fs::read_to_string(path.join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(m.status, "failed");
        assert!(!path.join(LOCK).exists());
    }
}
