//! Batch-incremental model adaptation with a human (or simulated) annotator.
//!
//! The training identities are split into disjoint batches. The first batch
//! is fully labeled and trains the initial model off-line. For every later
//! batch each probe's relevant set is extracted with the current model, only
//! those probe/gallery pairs are sent to the oracle, and the model is
//! warm-restarted on the newly labeled pairs. Checkpoint `b` (named
//! `TMA_{b+1}`) is the model after `b + 1` batches.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::{train, Iterations, TrainerConfig};
use crate::dominant::{probe_relevant_set, Projected, SelectionParams};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::metric::{FeatureRecord, Label, LabelSource, LabeledPair, ModelState};
use crate::platt::PlattCalibrator;

/// Indices into the session's training probe and gallery lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub probes: Vec<usize>,
    pub gallery: Vec<usize>,
}

impl Batch {
    /// `z`, the size of this batch's probe × gallery pair universe.
    pub fn pair_count(&self) -> usize {
        self.probes.len() * self.gallery.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPartition {
    pub batches: Vec<Batch>,
    pub seed: u64,
}

/// Seeded split of the person identities into `num_batches` disjoint groups
/// of near-equal size. A batch holds the probe and gallery records of its
/// identities, so a probe's true match lands in the same batch.
pub fn partition(probes: &[Arc<FeatureRecord>], gallery: &[Arc<FeatureRecord>], num_batches: usize, seed: u64) -> Result<BatchPartition> {
    let ids: BTreeSet<&str> = probes.iter().chain(gallery).map(|r| r.person_id.as_str()).collect();
    if num_batches == 0 {
        return Err(Error::InvalidArgument("need at least one batch".into()));
    }
    if num_batches > ids.len() {
        return Err(Error::InvalidArgument(format!(
            "{num_batches} batches for {} identities",
            ids.len()
        )));
    }
    let mut ids: Vec<&str> = ids.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let group: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i % num_batches)).collect();
    let mut batches = vec![Batch { probes: vec![], gallery: vec![] }; num_batches];
    for (i, r) in probes.iter().enumerate() {
        batches[group[r.person_id.as_str()]].probes.push(i);
    }
    for (i, r) in gallery.iter().enumerate() {
        batches[group[r.person_id.as_str()]].gallery.push(i);
    }
    Ok(BatchPartition { batches, seed })
}

/// Something that can label probe/gallery pairs.
pub trait LabelOracle {
    fn label(&mut self, probe: &FeatureRecord, gallery: &FeatureRecord) -> Result<(Label, LabelSource)>;
}

/// Labels by person-id equality.
#[derive(Clone, Copy, Debug, Default)]
pub struct GroundTruthOracle;

impl LabelOracle for GroundTruthOracle {
    fn label(&mut self, probe: &FeatureRecord, gallery: &FeatureRecord) -> Result<(Label, LabelSource)> {
        Ok((Label::from_match(probe.person_id == gallery.person_id), LabelSource::GroundTruth))
    }
}

/// Ground truth with each label flipped independently with probability `C`.
#[derive(Clone, Debug)]
pub struct SimulatedOracle {
    error_rate: f64,
    rng: ChaCha8Rng,
}

impl SimulatedOracle {
    pub fn new(error_rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&error_rate) {
            return Err(Error::InvalidArgument(format!("error rate must be in [0, 1), got {error_rate}")));
        }
        Ok(Self::with_any_rate(error_rate, seed))
    }

    /// Accepts `C = 1`; only meant for tests.
    pub fn with_any_rate(error_rate: f64, seed: u64) -> Self {
        Self { error_rate, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl LabelOracle for SimulatedOracle {
    fn label(&mut self, probe: &FeatureRecord, gallery: &FeatureRecord) -> Result<(Label, LabelSource)> {
        let truth = Label::from_match(probe.person_id == gallery.person_id);
        let flip = self.rng.random_bool(self.error_rate.clamp(0.0, 1.0));
        Ok((if flip { truth.flipped() } else { truth }, LabelSource::SimulatedNoisy))
    }
}

/// Answers from a recorded label log; unknown pairs fail.
#[derive(Clone, Debug, Default)]
pub struct LogOracle {
    labels: HashMap<(String, String), (Label, LabelSource)>,
}

impl LogOracle {
    pub fn new(entries: &[LabelEntry]) -> Self {
        let mut labels = HashMap::new();
        for e in entries {
            labels.entry((e.probe_id.clone(), e.gallery_id.clone())).or_insert((e.label, e.source));
        }
        Self { labels }
    }
}

impl LabelOracle for LogOracle {
    fn label(&mut self, probe: &FeatureRecord, gallery: &FeatureRecord) -> Result<(Label, LabelSource)> {
        self.labels
            .get(&(probe.person_id.clone(), gallery.person_id.clone()))
            .copied()
            .ok_or_else(|| Error::Oracle(format!("no recorded label for ({}, {})", probe.person_id, gallery.person_id)))
    }
}

/// One line of the label log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub probe_id: String,
    pub gallery_id: String,
    pub label: Label,
    pub source: LabelSource,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub batch: usize,
}

impl LabelEntry {
    pub fn new(probe_id: impl Into<String>, gallery_id: impl Into<String>, label: Label, source: LabelSource, batch: usize) -> Self {
        Self {
            probe_id: probe_id.into(),
            gallery_id: gallery_id.into(),
            label,
            source,
            timestamp: now_millis(),
            batch,
        }
    }
}

fn now_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Append-only label store, deduplicated on `(probe_id, gallery_id)`: the
/// first label recorded for a pair wins.
#[derive(Clone, Debug, Default)]
pub struct LabelLog {
    entries: Vec<LabelEntry>,
    index: HashMap<(String, String), usize>,
}

impl LabelLog {
    pub fn entries(&self) -> &[LabelEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, probe_id: &str, gallery_id: &str) -> Option<&LabelEntry> {
        self.index.get(&(probe_id.to_string(), gallery_id.to_string())).map(|&i| &self.entries[i])
    }

    /// Returns `false` and leaves the log unchanged when the pair already
    /// has a label.
    pub fn append(&mut self, entry: LabelEntry) -> bool {
        let key = (entry.probe_id.clone(), entry.gallery_id.clone());
        if self.index.contains_key(&key) {
            return false;
        }
        self.index.insert(key, self.entries.len());
        self.entries.push(entry);
        true
    }

    /// Labels that cost an annotator query, i.e. everything not assigned
    /// automatically by a baseline criterion.
    pub fn queried(&self) -> usize {
        self.entries.iter().filter(|e| e.source != LabelSource::Automatic).count()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = LabelEntry>) -> Self {
        let mut log = Self::default();
        for e in entries {
            log.append(e);
        }
        log
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: LabelEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                location: format!("{}:{}", path.display(), i + 1),
                message: e.to_string(),
            })?;
            entries.push(entry);
        }
        Ok(Self::from_entries(entries))
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Appends one entry to a JSON-lines file and syncs it.
    pub fn append_jsonl(path: impl AsRef<Path>, entry: &LabelEntry) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        let mut line = serde_json::to_vec(entry)?;
        line.push(b'\n');
        f.write_all(&line)?;
        f.sync_data()?;
        Ok(())
    }
}

/// How an update batch chooses the pairs it trains on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionCriterion {
    /// Query the probe's dominant set.
    #[default]
    DominantSet,
    /// Threshold calibrated probabilities at 0.5, no queries.
    Unsupervised,
    /// Auto-label the top and bottom ranked pairs of each probe, query the rest.
    SemiSupervised,
    /// Query every pair of the batch.
    Supervised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    /// Off-line training on the first batch (`S`, `T` and the shared
    /// `α, β, η, ρ`).
    pub trainer: TrainerConfig,
    /// `Ŝ`, epochs per incremental update.
    pub update_epochs: usize,
    /// `T̂`, resolved against the batch pair universe `z`.
    pub update_iters: Iterations,
    pub selection: SelectionParams,
    pub criterion: SelectionCriterion,
    /// Auto-labeled pairs at each end of a probe's ranking for
    /// [`SelectionCriterion::SemiSupervised`].
    pub semi_supervised_k: usize,
    pub num_batches: usize,
    pub partition_seed: u64,
    /// Train each update on the whole label log instead of the batch's new
    /// labels.
    pub cumulative_replay: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            trainer: TrainerConfig::default(),
            update_epochs: 150,
            update_iters: Iterations::default(),
            selection: SelectionParams::default(),
            criterion: SelectionCriterion::DominantSet,
            semi_supervised_k: 20,
            num_batches: 4,
            partition_seed: 0,
            cumulative_replay: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        if !(self.selection.epsilon > 0.0) {
            return Err(Error::InvalidArgument("selection.epsilon must be positive".into()));
        }
        if self.num_batches == 0 {
            return Err(Error::InvalidArgument("num_batches must be at least 1".into()));
        }
        if let Iterations::PairsMultiple { pairs_multiple } = self.update_iters {
            if !(pairs_multiple > 0.0) {
                return Err(Error::InvalidArgument("update_iters multiple must be positive".into()));
            }
        }
        Ok(())
    }

    fn update_trainer(&self, batch: usize, z: usize) -> TrainerConfig {
        TrainerConfig {
            epochs: self.update_epochs,
            iters_per_epoch: Iterations::Fixed(self.update_iters.resolve(z)),
            seed: self.trainer.seed.wrapping_add(batch as u64),
            ..self.trainer.clone()
        }
    }
}

/// A probe/gallery pair by position in the session's training lists.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairRef {
    pub probe: usize,
    pub gallery: usize,
}

/// Pairs chosen for one batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchSelection {
    pub batch: usize,
    /// Pairs needing a label from the annotator, in probe order.
    pub queries: Vec<PairRef>,
    /// Pairs labeled by the criterion itself.
    pub automatic: Vec<(PairRef, Label)>,
    /// Probes whose relevant set came out empty.
    pub empty_probes: usize,
    /// Probes whose replicator dynamics hit the iteration cap.
    pub truncated_probes: usize,
    pub degenerate_probes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionCheckpoint {
    /// Batches consumed minus one: 0 is the off-line model.
    pub batch: usize,
    pub state: ModelState,
    /// Queried labels in the log when the checkpoint was taken.
    pub labeled_pairs: usize,
    /// Pairs the update trained on (all of batch 0 for the first).
    pub trained_pairs: usize,
}

/// Something noteworthy but not fatal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SessionEvent {
    OracleFailed { batch: usize, probe_id: String, gallery_id: String, reason: String },
    NoUpdate { batch: usize },
    EmptyRelevantSets { batch: usize, probes: usize },
    DegenerateGraphs { batch: usize, probes: usize },
    TruncatedDynamics { batch: usize, probes: usize },
}

/// Enough to rebuild a session exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub dataset: String,
    pub config: AdaptConfig,
    pub probe_ids: Vec<String>,
    pub gallery_ids: Vec<String>,
    pub partition: BatchPartition,
}

#[derive(Clone, Debug)]
pub struct AdaptationSession {
    pub config: AdaptConfig,
    pub probes: Vec<Arc<FeatureRecord>>,
    pub gallery: Vec<Arc<FeatureRecord>>,
    pub partition: BatchPartition,
    pub model: ModelState,
    pub label_log: LabelLog,
    pub checkpoints: Vec<SessionCheckpoint>,
    pub events: Vec<SessionEvent>,
    /// Batches whose update has been applied.
    pub completed: BTreeSet<usize>,
}

impl AdaptationSession {
    /// Partitions the training split and trains the off-line model on the
    /// fully labeled first batch.
    pub fn start(probes: Vec<Arc<FeatureRecord>>, gallery: Vec<Arc<FeatureRecord>>, config: AdaptConfig) -> Result<Self> {
        config.validate()?;
        let partition = partition(&probes, &gallery, config.num_batches, config.partition_seed)?;
        Self::start_with_partition(probes, gallery, config, partition)
    }

    pub fn start_with_partition(
        probes: Vec<Arc<FeatureRecord>>,
        gallery: Vec<Arc<FeatureRecord>>,
        config: AdaptConfig,
        partition: BatchPartition,
    ) -> Result<Self> {
        config.validate()?;
        let first = partition
            .batches
            .first()
            .ok_or_else(|| Error::InvalidArgument("partition has no batches".into()))?
            .clone();
        let mut log = LabelLog::default();
        let mut data = Vec::with_capacity(first.pair_count());
        for &p in &first.probes {
            for &g in &first.gallery {
                let (pr, gr) = (&probes[p], &gallery[g]);
                let label = Label::from_match(pr.person_id == gr.person_id);
                log.append(LabelEntry::new(&pr.person_id, &gr.person_id, label, LabelSource::GroundTruth, 0));
                data.push(LabeledPair::new(pr.clone(), gr.clone(), label, LabelSource::GroundTruth)?);
            }
        }
        let model = train(&data, &config.trainer, None)?.state;
        let checkpoints = vec![SessionCheckpoint {
            batch: 0,
            state: model.clone(),
            labeled_pairs: log.queried(),
            trained_pairs: data.len(),
        }];
        Ok(Self {
            config,
            probes,
            gallery,
            partition,
            model,
            label_log: log,
            checkpoints,
            events: Vec::new(),
            completed: BTreeSet::from([0]),
        })
    }

    /// `n = |𝒫|·|𝒢|` of the training split.
    pub fn total_pairs(&self) -> usize {
        self.probes.len() * self.gallery.len()
    }

    /// Queried labels as a fraction of `n`.
    pub fn effort(&self) -> f64 {
        match self.total_pairs() {
            0 => 0.0,
            n => self.label_log.queried() as f64 / n as f64,
        }
    }

    pub fn manifest(&self, dataset: impl Into<String>) -> SessionManifest {
        SessionManifest {
            dataset: dataset.into(),
            config: self.config.clone(),
            probe_ids: self.probes.iter().map(|r| r.person_id.clone()).collect(),
            gallery_ids: self.gallery.iter().map(|r| r.person_id.clone()).collect(),
            partition: self.partition.clone(),
        }
    }

    fn batch(&self, b: usize) -> Result<&Batch> {
        self.partition
            .batches
            .get(b)
            .ok_or_else(|| Error::InvalidArgument(format!("no batch {b} (have {})", self.partition.batches.len())))
    }

    /// Calibrator fitted on every queried label so far, scored by the
    /// current model.
    pub fn calibrator(&self) -> Result<PlattCalibrator> {
        let by_id = |records: &[Arc<FeatureRecord>]| -> HashMap<String, usize> {
            records.iter().enumerate().map(|(i, r)| (r.person_id.clone(), i)).collect()
        };
        let (pi, gi) = (by_id(&self.probes), by_id(&self.gallery));
        let mut entries: Vec<&LabelEntry> = self
            .label_log
            .entries()
            .iter()
            .filter(|e| e.source != LabelSource::Automatic && pi.contains_key(&e.probe_id) && gi.contains_key(&e.gallery_id))
            .collect();
        // a fixed order keeps the fit identical however the log was written
        entries.sort_by(|a, b| (&a.probe_id, &a.gallery_id).cmp(&(&b.probe_id, &b.gallery_id)));
        let pp = Projected::new(&self.model, entries.iter().map(|e| self.probes[pi[&e.probe_id]].as_ref()))?;
        let gp = Projected::new(&self.model, entries.iter().map(|e| self.gallery[gi[&e.gallery_id]].as_ref()))?;
        let scores: Vec<f64> = (0..entries.len()).map(|i| pp.margin(i, &gp, i)).collect();
        let labels: Vec<Label> = entries.iter().map(|e| e.label).collect();
        Ok(PlattCalibrator::fit_or_default(&scores, &labels))
    }

    /// Chooses the pairs of batch `b` with the configured criterion.
    pub fn select_batch(&self, b: usize) -> Result<BatchSelection> {
        selection_baselines(self, b, self.config.criterion)
    }

    pub fn pair(&self, r: PairRef) -> (&Arc<FeatureRecord>, &Arc<FeatureRecord>) {
        (&self.probes[r.probe], &self.gallery[r.gallery])
    }

    /// Records a label unless the pair already has one; returns whether it
    /// was added.
    pub fn record_label(&mut self, r: PairRef, label: Label, source: LabelSource, batch: usize) -> bool {
        let (p, g) = self.pair(r);
        let entry = LabelEntry::new(&p.person_id, &g.person_id, label, source, batch);
        self.label_log.append(entry)
    }

    /// Labeled training pairs for a selection: automatic labels plus every
    /// query with a label in the log, in selection order.
    pub fn training_pairs(&self, sel: &BatchSelection) -> Result<Vec<LabeledPair>> {
        let mut out = Vec::new();
        for &(r, label) in &sel.automatic {
            let (p, g) = self.pair(r);
            out.push(LabeledPair::new(p.clone(), g.clone(), label, LabelSource::Automatic)?);
        }
        for &r in &sel.queries {
            let (p, g) = self.pair(r);
            if let Some(e) = self.label_log.get(&p.person_id, &g.person_id) {
                out.push(LabeledPair::new(p.clone(), g.clone(), e.label, e.source)?);
            }
        }
        Ok(out)
    }

    /// Everything in the log that belongs to this session's training lists.
    pub fn all_logged_pairs(&self) -> Result<Vec<LabeledPair>> {
        let pi: HashMap<&str, usize> = self.probes.iter().enumerate().map(|(i, r)| (r.person_id.as_str(), i)).collect();
        let gi: HashMap<&str, usize> = self.gallery.iter().enumerate().map(|(i, r)| (r.person_id.as_str(), i)).collect();
        let mut out = Vec::new();
        for e in self.label_log.entries() {
            if let (Some(&p), Some(&g)) = (pi.get(e.probe_id.as_str()), gi.get(e.gallery_id.as_str())) {
                out.push(LabeledPair::new(self.probes[p].clone(), self.gallery[g].clone(), e.label, e.source)?);
            }
        }
        Ok(out)
    }

    /// Warm-restart update for batch `b` from the labels available for
    /// `sel`, then checkpoint. With no labeled pair the model is kept and a
    /// [`SessionEvent::NoUpdate`] is recorded.
    pub fn apply_update(&mut self, b: usize, sel: &BatchSelection) -> Result<()> {
        let z = self.batch(b)?.pair_count();
        let data = if self.config.cumulative_replay {
            let mut all = self.all_logged_pairs()?;
            all.extend(self.training_pairs(&BatchSelection { queries: vec![], ..sel.clone() })?);
            all
        } else {
            self.training_pairs(sel)?
        };
        if data.is_empty() {
            self.events.push(SessionEvent::NoUpdate { batch: b });
        } else {
            let cfg = self.config.update_trainer(b, z);
            self.model = train(&data, &cfg, Some(self.model.clone()))?.state;
        }
        self.checkpoints.push(SessionCheckpoint {
            batch: b,
            state: self.model.clone(),
            labeled_pairs: self.label_log.queried(),
            trained_pairs: data.len(),
        });
        self.completed.insert(b);
        Ok(())
    }

    fn note_selection(&mut self, sel: &BatchSelection) {
        let b = sel.batch;
        if sel.empty_probes > 0 {
            self.events.push(SessionEvent::EmptyRelevantSets { batch: b, probes: sel.empty_probes });
        }
        if sel.degenerate_probes > 0 {
            self.events.push(SessionEvent::DegenerateGraphs { batch: b, probes: sel.degenerate_probes });
        }
        if sel.truncated_probes > 0 {
            self.events.push(SessionEvent::TruncatedDynamics { batch: b, probes: sel.truncated_probes });
        }
    }

    /// Evaluates every checkpoint on a test split.
    pub fn report(&self, dataset: &str, probes: &[Arc<FeatureRecord>], gallery: &[Arc<FeatureRecord>]) -> Result<EvalReport> {
        let mut report = EvalReport { dataset: dataset.to_string(), total_pairs: self.total_pairs(), rows: Vec::new() };
        for (i, ck) in self.checkpoints.iter().enumerate() {
            report.push_model(format!("TMA_{}", i + 1), &ck.state, probes, gallery, ck.labeled_pairs)?;
        }
        Ok(report)
    }
}

/// Runs the update loop over `update_batches`, querying `oracle` for every
/// selected pair without a stored label. Pairs the oracle fails on are
/// skipped.
pub fn run_adaptation<O: LabelOracle + ?Sized>(
    mut session: AdaptationSession,
    oracle: &mut O,
    update_batches: &[usize],
) -> Result<AdaptationSession> {
    for &b in update_batches {
        let sel = session.select_batch(b)?;
        session.note_selection(&sel);
        for &r in &sel.queries {
            let (p, g) = session.pair(r);
            if session.label_log.get(&p.person_id, &g.person_id).is_some() {
                continue;
            }
            match oracle.label(p, g) {
                Ok((label, source)) => {
                    session.record_label(r, label, source, b);
                }
                Err(e) => {
                    let (p, g) = session.pair(r);
                    session.events.push(SessionEvent::OracleFailed {
                        batch: b,
                        probe_id: p.person_id.clone(),
                        gallery_id: g.person_id.clone(),
                        reason: e.to_string(),
                    });
                }
            }
        }
        session.apply_update(b, &sel)?;
    }
    Ok(session)
}

/// Rebuilds a session from its manifest and label log: off-line training,
/// then every update batch answered from the log. Same seeds, config and
/// log give bit-identical checkpoints.
pub fn replay(
    manifest: &SessionManifest,
    probes: Vec<Arc<FeatureRecord>>,
    gallery: Vec<Arc<FeatureRecord>>,
    log: &LabelLog,
    update_batches: &[usize],
) -> Result<AdaptationSession> {
    let ids = |rs: &[Arc<FeatureRecord>]| rs.iter().map(|r| r.person_id.clone()).collect::<Vec<_>>();
    if ids(&probes) != manifest.probe_ids || ids(&gallery) != manifest.gallery_ids {
        return Err(Error::Schema("records do not match the session manifest".into()));
    }
    let session = AdaptationSession::start_with_partition(probes, gallery, manifest.config.clone(), manifest.partition.clone())?;
    let mut oracle = LogOracle::new(log.entries());
    run_adaptation(session, &mut oracle, update_batches)
}

/// Pairs of batch `b` chosen by `mode`, using the session's current model
/// and a calibrator refit on the labels so far.
pub fn selection_baselines(session: &AdaptationSession, b: usize, mode: SelectionCriterion) -> Result<BatchSelection> {
    let batch = session.batch(b)?;
    let cal = session.calibrator()?;
    let mut sel = BatchSelection { batch: b, ..Default::default() };
    if batch.gallery.is_empty() {
        sel.empty_probes = batch.probes.len();
        return Ok(sel);
    }
    let gallery: Vec<Arc<FeatureRecord>> = batch.gallery.iter().map(|&g| session.gallery[g].clone()).collect();
    match mode {
        SelectionCriterion::DominantSet => {
            let sets: Vec<_> = batch
                .probes
                .par_iter()
                .map(|&p| probe_relevant_set(&session.probes[p], &gallery, &session.model, &cal, &session.config.selection).map(|rs| (p, rs)))
                .collect::<Result<_>>()?;
            for (p, rs) in sets {
                if rs.members.is_empty() {
                    sel.empty_probes += 1;
                }
                sel.truncated_probes += rs.truncated as usize;
                sel.degenerate_probes += rs.degenerate as usize;
                sel.queries.extend(rs.gallery_indices.iter().map(|&i| PairRef { probe: p, gallery: batch.gallery[i] }));
            }
        }
        SelectionCriterion::Supervised => {
            for &p in &batch.probes {
                sel.queries.extend(batch.gallery.iter().map(|&g| PairRef { probe: p, gallery: g }));
            }
        }
        SelectionCriterion::Unsupervised | SelectionCriterion::SemiSupervised => {
            let probes: Vec<&FeatureRecord> = batch.probes.iter().map(|&p| session.probes[p].as_ref()).collect();
            let pp = Projected::new(&session.model, probes)?;
            let gp = Projected::new(&session.model, gallery.iter().map(|g| g.as_ref()))?;
            for (pi, &p) in batch.probes.iter().enumerate() {
                let scores: Vec<f64> = (0..gallery.len()).map(|gi| pp.margin(pi, &gp, gi)).collect();
                if mode == SelectionCriterion::Unsupervised {
                    for (gi, &s) in scores.iter().enumerate() {
                        let label = Label::from_match(cal.probability(s) >= 0.5);
                        sel.automatic.push((PairRef { probe: p, gallery: batch.gallery[gi] }, label));
                    }
                    continue;
                }
                let mut order: Vec<usize> = (0..gallery.len()).collect();
                order.sort_by(|&a, &c| scores[c].total_cmp(&scores[a]).then(a.cmp(&c)));
                let k = session.config.semi_supervised_k;
                let top = k.min(order.len());
                let bottom = k.min(order.len() - top);
                for (rank, &gi) in order.iter().enumerate() {
                    let r = PairRef { probe: p, gallery: batch.gallery[gi] };
                    if rank < top {
                        sel.automatic.push((r, Label::Same));
                    } else if rank >= order.len() - bottom {
                        sel.automatic.push((r, Label::Different));
                    } else {
                        sel.queries.push(r);
                    }
                }
            }
        }
    }
    Ok(sel)
}
