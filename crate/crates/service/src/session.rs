//! One annotation session: the adaptation state, its task queues and the
//! files that make it survive a restart.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tma_core::adaptation::{replay, AdaptConfig, AdaptationSession, BatchSelection, LabelEntry, LabelLog};
use tma_core::checkpoint::Checkpoint;
use tma_core::data::{load_dataset, ProbeGallery, SplitKind};
use tma_core::eval::{EvalReport, ReportRow};
use tma_core::{Label, LabelSource};

use crate::error::{Result, ServiceError};
use crate::store::{read_json, write_checkpoint, write_json, AnnotationTask, BatchTasks, SessionMeta, SessionPaths, TaskState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Ready,
    Updating,
}

/// Test-split scores of one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub name: String,
    /// Update batch that produced it; 0 is the off-line model.
    pub batch: usize,
    pub labeled_pairs: usize,
    pub labeled_percent: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
}

/// What `GET /sessions/{id}/status` returns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusDoc {
    pub session_id: String,
    pub dataset: String,
    pub phase: Phase,
    pub num_batches: usize,
    pub completed_batches: Vec<usize>,
    /// Update batch whose tasks are out, if any.
    pub open_batch: Option<usize>,
    pub pending: usize,
    pub labeled: usize,
    pub skipped: usize,
    /// Size `n` of the training pair universe.
    pub total_pairs: usize,
    /// Queried labels so far, including the fully labeled first batch.
    pub labeled_pairs: usize,
    pub effort_percent: f64,
    /// Share of `n` spent on the first batch.
    pub offline_percent: f64,
    pub latest: Option<CheckpointSummary>,
    pub checkpoints: Vec<CheckpointSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

/// Answer to a label or skip submission.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelAck {
    pub task: AnnotationTask,
    /// Tasks of the same batch still pending.
    pub batch_pending: usize,
    /// Phase right after the submission: `updating` when it closed the batch.
    pub phase: Phase,
}

/// Body of `POST /sessions/{id}/tasks/{tid}/label`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub skip: bool,
}

pub struct SessionData {
    pub meta: SessionMeta,
    pub paths: SessionPaths,
    pub session: AdaptationSession,
    pub test: ProbeGallery,
    /// Directory image paths are relative to.
    pub dataset_dir: PathBuf,
    pub images: HashSet<String>,
    pub tasks: BTreeMap<usize, BatchTasks>,
    pub report: EvalReport,
    pub last_error: Option<String>,
}

fn dataset_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

impl SessionData {
    /// Loads the dataset, trains the off-line model and persists everything.
    pub fn create(root: &Path, id: &str, manifest: &Path, config: AdaptConfig) -> Result<Self> {
        let manifest = std::path::absolute(manifest)?;
        let dataset = load_dataset(&manifest).map_err(|e| ServiceError::bad_request("manifest", e))?;
        config.validate().map_err(|e| ServiceError::bad_request("config", e))?;
        let train = dataset.split(SplitKind::Train);
        let test = dataset.split(SplitKind::Test);
        let session = AdaptationSession::start(train.probes, train.gallery, config).map_err(|e| ServiceError::bad_request("config", e))?;
        let paths = SessionPaths::new(root, id);
        paths.create_dirs()?;
        let meta = SessionMeta {
            id: id.to_string(),
            manifest: manifest.clone(),
            session: session.manifest(dataset.manifest.name.clone()),
            completed: vec![],
        };
        session.label_log.write_jsonl(paths.labels())?;
        let checkpoint = Checkpoint { state: session.model.clone(), config: session.config.trainer.clone() };
        write_checkpoint(&paths.checkpoint(0), &checkpoint)?;
        write_json(&paths.meta(), &meta)?;
        let report = session.report(&meta.session.dataset, &test.probes, &test.gallery)?;
        let images = dataset.records.iter().filter_map(|r| r.image_path.clone()).collect();
        Ok(Self { meta, paths, session, test, dataset_dir: dataset_dir(&manifest), images, tasks: BTreeMap::new(), report, last_error: None })
    }

    /// Rebuilds a persisted session by replaying its label log, then checks
    /// the result against the last checkpoint file.
    pub fn restore(root: &Path, id: &str) -> Result<Self> {
        let paths = SessionPaths::new(root, id);
        let meta: SessionMeta = read_json(&paths.meta())?;
        let dataset = load_dataset(&meta.manifest)?;
        let train = dataset.split(SplitKind::Train);
        let test = dataset.split(SplitKind::Test);
        let log = if paths.labels().is_file() { LabelLog::read_jsonl(paths.labels())? } else { LabelLog::default() };
        let mut session = replay(&meta.session, train.probes, train.gallery, &log, &meta.completed)?;
        session.label_log = log;
        session.events.clear();
        let k = session.checkpoints.len() - 1;
        let saved = Checkpoint::load(paths.checkpoint(k))?;
        if saved.state != session.model {
            return Err(ServiceError::Internal(format!("replayed model differs from checkpoint {k} of session {id}")));
        }
        let mut tasks = BTreeMap::new();
        for b in paths.task_batches()? {
            if meta.completed.contains(&b) {
                continue;
            }
            let mut bt: BatchTasks = read_json(&paths.tasks(b))?;
            // a label may have reached the log just before a crash
            for t in &mut bt.tasks {
                if t.state == TaskState::Pending {
                    if let Some(e) = session.label_log.get(&t.probe_id, &t.gallery_id) {
                        t.state = TaskState::Labeled;
                        t.label = Some(e.label);
                    }
                }
            }
            tasks.insert(b, bt);
        }
        let report = session.report(&meta.session.dataset, &test.probes, &test.gallery)?;
        let images = dataset.records.iter().filter_map(|r| r.image_path.clone()).collect();
        Ok(Self { dataset_dir: dataset_dir(&meta.manifest), meta, paths, session, test, images, tasks, report, last_error: None })
    }

    pub fn num_batches(&self) -> usize {
        self.session.partition.batches.len()
    }

    pub fn is_completed(&self, b: usize) -> bool {
        b == 0 || self.meta.completed.contains(&b)
    }

    /// The update batch with tasks issued and no update applied yet.
    pub fn open_batch(&self) -> Option<usize> {
        self.tasks.keys().copied().find(|&b| !self.is_completed(b))
    }

    /// Open batch whose every task is answered or skipped.
    pub fn resolved_open_batch(&self) -> Option<usize> {
        self.open_batch().filter(|b| self.tasks[b].pending() == 0)
    }

    pub fn check_batch(&self, b: usize) -> Result<()> {
        if b == 0 || b >= self.num_batches() {
            return Err(ServiceError::bad_request(
                "batch",
                format!("update batches are 1..{} (batch 0 is the off-line batch)", self.num_batches()),
            ));
        }
        Ok(())
    }

    pub fn pending_tasks(&self, b: usize) -> Vec<AnnotationTask> {
        self.tasks
            .get(&b)
            .map(|bt| bt.tasks.iter().filter(|t| t.state == TaskState::Pending).cloned().collect())
            .unwrap_or_default()
    }

    /// Turns a selection into tasks and persists them. Pairs that already
    /// have a label come out resolved.
    pub fn install_selection(&mut self, sel: BatchSelection) -> Result<()> {
        let b = sel.batch;
        let tasks = sel
            .queries
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let (p, g) = self.session.pair(r);
                let known = self.session.label_log.get(&p.person_id, &g.person_id).map(|e| e.label);
                AnnotationTask {
                    task_id: format!("b{b}-t{i}"),
                    batch: b,
                    probe_id: p.person_id.clone(),
                    gallery_id: g.person_id.clone(),
                    probe_image_path: p.image_path.clone(),
                    gallery_image_path: g.image_path.clone(),
                    state: if known.is_some() { TaskState::Labeled } else { TaskState::Pending },
                    label: known,
                    pair: r,
                }
            })
            .collect();
        let bt = BatchTasks { batch: b, selection: sel, tasks };
        write_json(&self.paths.tasks(b), &bt)?;
        self.tasks.insert(b, bt);
        Ok(())
    }

    /// Applies a label or skip to a pending task. Returns the task and the
    /// number of tasks of its batch still pending.
    pub fn submit(&mut self, task_id: &str, req: &LabelRequest) -> Result<(AnnotationTask, usize)> {
        let b = task_id
            .strip_prefix('b')
            .and_then(|s| s.split_once("-t"))
            .and_then(|(b, _)| b.parse::<usize>().ok())
            .ok_or_else(|| ServiceError::NotFound(format!("no task {task_id}")))?;
        let bt = self.tasks.get(&b).ok_or_else(|| ServiceError::NotFound(format!("no task {task_id}")))?;
        let i = bt
            .tasks
            .iter()
            .position(|t| t.task_id == task_id)
            .ok_or_else(|| ServiceError::NotFound(format!("no task {task_id}")))?;
        let task = &bt.tasks[i];
        if task.state != TaskState::Pending {
            return Err(ServiceError::Conflict(format!("task {task_id} is already {:?}", task.state).to_lowercase()));
        }
        let (state, label) = match (req.label, req.skip) {
            (Some(_), true) => return Err(ServiceError::bad_request("skip", "give either a label or skip, not both")),
            (Some(l), false) => (TaskState::Labeled, Some(l)),
            (None, true) => (TaskState::Skipped, None),
            (None, false) => return Err(ServiceError::bad_request("label", "expected a label of 1 or -1, or skip: true")),
        };
        if let Some(l) = label {
            let entry = LabelEntry::new(&task.probe_id, &task.gallery_id, l, LabelSource::Human, b);
            LabelLog::append_jsonl(self.paths.labels(), &entry)?;
            self.session.label_log.append(entry);
        }
        let bt = self.tasks.get_mut(&b).expect("looked up above");
        bt.tasks[i].state = state;
        bt.tasks[i].label = label;
        write_json(&self.paths.tasks(b), bt)?;
        Ok((bt.tasks[i].clone(), bt.pending()))
    }

    /// Installs the model produced by an update of batch `b`. The checkpoint
    /// file is written before the session document names the batch
    /// completed.
    pub fn finish_update(&mut self, b: usize, session: AdaptationSession, row: ReportRow) -> Result<()> {
        let k = session.checkpoints.len() - 1;
        let checkpoint = Checkpoint { state: session.model.clone(), config: session.config.trainer.clone() };
        write_checkpoint(&self.paths.checkpoint(k), &checkpoint)?;
        self.meta.completed.push(b);
        write_json(&self.paths.meta(), &self.meta)?;
        // labels submitted while the update ran are already in our log
        let log = std::mem::take(&mut self.session.label_log);
        self.session = session;
        self.session.label_log = log;
        self.report.rows.push(row);
        self.last_error = None;
        Ok(())
    }

    pub fn status(&self, phase: Phase) -> StatusDoc {
        let checkpoints: Vec<CheckpointSummary> = self
            .report
            .rows
            .iter()
            .zip(&self.session.checkpoints)
            .map(|(row, ck)| CheckpointSummary {
                name: row.name.clone(),
                batch: ck.batch,
                labeled_pairs: row.labeled_pairs,
                labeled_percent: row.labeled_percent,
                rank1: row.rank(1),
                rank5: row.rank(5),
                rank10: row.rank(10),
                map: row.map,
            })
            .collect();
        let open = self.open_batch();
        let count = |s: TaskState| open.map_or(0, |b| self.tasks[&b].tasks.iter().filter(|t| t.state == s).count());
        let n = self.session.total_pairs();
        let percent = |k: usize| if n == 0 { 0.0 } else { 100.0 * k as f64 / n as f64 };
        StatusDoc {
            session_id: self.meta.id.clone(),
            dataset: self.meta.session.dataset.clone(),
            phase,
            num_batches: self.num_batches(),
            completed_batches: self.meta.completed.clone(),
            open_batch: open,
            pending: count(TaskState::Pending),
            labeled: count(TaskState::Labeled),
            skipped: count(TaskState::Skipped),
            total_pairs: n,
            labeled_pairs: self.session.label_log.queried(),
            effort_percent: 100.0 * self.session.effort(),
            offline_percent: percent(self.session.partition.batches[0].pair_count()),
            latest: checkpoints.last().cloned(),
            checkpoints,
            last_error: self.last_error.clone(),
        }
    }
}
