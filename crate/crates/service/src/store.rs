//! On-disk layout of a session.
//!
//! ```text
//! {root}/sessions/{id}/
//!     session.json           SessionMeta
//!     labels.jsonl           one LabelEntry per line, appended and fsynced
//!     checkpoints/ckpt-{k}.tma
//!     tasks/batch-{b}.json   BatchTasks
//! ```
//!
//! JSON documents are replaced by writing a sibling temporary file and
//! renaming it over the old one.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tma_core::adaptation::{BatchSelection, PairRef, SessionManifest};
use tma_core::checkpoint::Checkpoint;
use tma_core::Label;

use crate::error::{Result, ServiceError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub id: String,
    /// Dataset manifest the session was created from.
    pub manifest: PathBuf,
    pub session: SessionManifest,
    /// Update batches in the order their updates finished.
    pub completed: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskState {
    Pending,
    Labeled,
    Skipped,
}

/// One probe/gallery pair waiting for (or holding) an annotator's answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub batch: usize,
    pub probe_id: String,
    pub gallery_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gallery_image_path: Option<String>,
    pub state: TaskState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    pub pair: PairRef,
}

/// The tasks issued for one update batch, with the selection they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchTasks {
    pub batch: usize,
    pub selection: BatchSelection,
    pub tasks: Vec<AnnotationTask>,
}

impl BatchTasks {
    pub fn pending(&self) -> usize {
        self.tasks.iter().filter(|t| t.state == TaskState::Pending).count()
    }
}

#[derive(Clone, Debug)]
pub struct SessionPaths {
    pub dir: PathBuf,
}

impl SessionPaths {
    pub fn new(root: &Path, id: &str) -> Self {
        Self { dir: root.join("sessions").join(id) }
    }

    pub fn meta(&self) -> PathBuf {
        self.dir.join("session.json")
    }

    pub fn labels(&self) -> PathBuf {
        self.dir.join("labels.jsonl")
    }

    pub fn checkpoint(&self, k: usize) -> PathBuf {
        self.dir.join("checkpoints").join(format!("ckpt-{k}.tma"))
    }

    pub fn tasks(&self, batch: usize) -> PathBuf {
        self.dir.join("tasks").join(format!("batch-{batch}.json"))
    }

    pub fn exists(&self) -> bool {
        self.meta().is_file()
    }

    pub fn create_dirs(&self) -> Result<()> {
        fs::create_dir_all(self.dir.join("checkpoints"))?;
        fs::create_dir_all(self.dir.join("tasks"))?;
        Ok(())
    }

    /// Every batch with a tasks file.
    pub fn task_batches(&self) -> Result<Vec<usize>> {
        let dir = self.dir.join("tasks");
        if !dir.is_dir() {
            return Ok(vec![]);
        }
        let mut out = Vec::new();
        for entry in fs::read_dir(dir)? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(b) = name.strip_prefix("batch-").and_then(|s| s.strip_suffix(".json")) {
                if let Ok(b) = b.parse() {
                    out.push(b);
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

fn replace_with(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let tmp = temp_path(path);
    let mut w = BufWriter::new(File::create(&tmp)?);
    write(&mut w)?;
    let file = w.into_inner().map_err(|e| ServiceError::Io(e.into_error()))?;
    file.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    replace_with(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    replace_with(path, |w| Ok(checkpoint.write_to(w)?))
}
