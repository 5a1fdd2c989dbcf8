//! `tma`: train, adapt, evaluate, serve and benchmark re-identification
//! models.
//!
//! Every command that evaluates writes `report.json` and `cmc.csv` into its
//! output directory.

mod bench;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use tracing_subscriber::EnvFilter;

use tma_core::adaptation::{
    replay, run_adaptation, AdaptConfig, AdaptationSession, GroundTruthOracle, LabelLog, SelectionCriterion, SessionManifest, SimulatedOracle,
};
use tma_core::admm::{train, TrainerConfig};
use tma_core::checkpoint::Checkpoint;
use tma_core::data::{load_dataset, synthetic, write_dataset, Dataset, FeatureFormat, SplitKind, SyntheticConfig};
use tma_core::eval::EvalReport;
use tma_core::{Label, LabelSource, LabeledPair};

#[derive(Parser)]
#[command(name = "tma", version, about = "Incremental person re-identification with dominant-set pair selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Dataset manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Configuration JSON; omitted fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleKind {
    /// Labels by person-id equality.
    GroundTruth,
    /// Ground truth with labels flipped at `--error-rate`.
    Simulated,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub(crate) enum Criterion {
    DominantSet,
    Unsupervised,
    SemiSupervised,
    Supervised,
}

impl From<Criterion> for SelectionCriterion {
    fn from(c: Criterion) -> Self {
        match c {
            Criterion::DominantSet => Self::DominantSet,
            Criterion::Unsupervised => Self::Unsupervised,
            Criterion::SemiSupervised => Self::SemiSupervised,
            Criterion::Supervised => Self::Supervised,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on every pair of the training split (trainer config JSON).
    Train(Common),
    /// Batch-incremental adaptation with a simulated annotator (adaptation
    /// config JSON).
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "ground-truth")]
        oracle: OracleKind,
        #[arg(long, default_value_t = 0.0)]
        error_rate: f64,
        /// Overrides the configured selection criterion.
        #[arg(long, value_enum)]
        criterion: Option<Criterion>,
        /// Rebuild a previous run from the `session.json` and `labels.jsonl`
        /// in this directory instead of querying an oracle.
        #[arg(long, conflicts_with_all = ["config", "seed", "criterion"])]
        replay: Option<PathBuf>,
    },
    /// Evaluate a saved checkpoint on the test split.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint file (`.tma`).
        #[arg(long)]
        model: PathBuf,
        #[arg(long, short, default_value = ".")]
        out: PathBuf,
    },
    /// Run the annotation service. The bind address comes from `TMA_BIND`.
    Serve {
        /// Directory holding session state.
        #[arg(long, default_value = "tma-state")]
        root: PathBuf,
        /// Open a session on this dataset before serving.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, requires = "manifest")]
        config: Option<PathBuf>,
        #[arg(long)]
        session_id: Option<String>,
        /// Overrides the port of the bind address.
        #[arg(long)]
        port: Option<u16>,
        /// Static UI bundle served for non-API paths.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Average adaptation runs over several trials.
    Bench(bench::BenchArgs),
    /// Write a synthetic two-camera dataset.
    Synth {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 2016)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        train_ids: usize,
        #[arg(long, default_value_t = 100)]
        test_ids: usize,
        #[arg(long, default_value_t = 30)]
        dim: usize,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Binary,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

pub(crate) fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)?;
    Ok(())
}

pub(crate) fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    write_json(&out.join("report.json"), report)?;
    report.write_cmc_csv(BufWriter::new(File::create(out.join("cmc.csv"))?))?;
    let w = report.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
    println!("{:<w$} {:>9} {:>7} {:>7} {:>7} {:>7}", "model", "labeled%", "rank1", "rank5", "rank10", "mAP");
    for row in &report.rows {
        println!(
            "{:<w$} {:>9.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            row.name,
            row.labeled_percent,
            100.0 * row.rank(1),
            100.0 * row.rank(5),
            100.0 * row.rank(10),
            100.0 * row.map
        );
    }
    Ok(())
}

pub(crate) fn load(manifest: &Path) -> Result<Dataset> {
    load_dataset(manifest).with_context(|| format!("loading {}", manifest.display()))
}

fn cmd_train(c: Common) -> Result<()> {
    let mut cfg: TrainerConfig = read_config(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let ds = load(&c.manifest)?;
    let tr = ds.split(SplitKind::Train);
    let te = ds.split(SplitKind::Test);
    let mut data = Vec::with_capacity(tr.pair_count());
    for p in &tr.probes {
        for g in &tr.gallery {
            let label = Label::from_match(p.person_id == g.person_id);
            data.push(LabeledPair::new(p.clone(), g.clone(), label, LabelSource::GroundTruth)?);
        }
    }
    tracing::info!(pairs = data.len(), epochs = cfg.epochs, "training");
    let trained = train(&data, &cfg, None)?;
    fs::create_dir_all(&c.out)?;
    Checkpoint { state: trained.state.clone(), config: cfg }.save(c.out.join("model.tma"))?;
    write_json(&c.out.join("training_log.json"), &trained.log)?;
    let mut report = EvalReport { dataset: ds.manifest.name.clone(), total_pairs: data.len(), rows: vec![] };
    report.push_model("full", &trained.state, &te.probes, &te.gallery, data.len())?;
    write_report(&c.out, &report)
}

fn cmd_adapt(c: Common, oracle: OracleKind, error_rate: f64, criterion: Option<Criterion>, replay_dir: Option<PathBuf>) -> Result<()> {
    let ds = load(&c.manifest)?;
    let tr = ds.split(SplitKind::Train);
    let te = ds.split(SplitKind::Test);
    let session = match replay_dir {
        Some(dir) => {
            let manifest: SessionManifest = read_json(&dir.join("session.json"))?;
            let log = LabelLog::read_jsonl(dir.join("labels.jsonl"))?;
            let batches: Vec<usize> = (1..manifest.partition.batches.len()).collect();
            replay(&manifest, tr.probes, tr.gallery, &log, &batches)?
        }
        None => {
            let mut cfg: AdaptConfig = read_config(c.config.as_deref())?;
            if let Some(s) = c.seed {
                cfg.trainer.seed = s;
                cfg.partition_seed = s;
            }
            if let Some(k) = criterion {
                cfg.criterion = k.into();
            }
            let batches: Vec<usize> = (1..cfg.num_batches).collect();
            tracing::info!(batches = cfg.num_batches, "off-line training on the first batch");
            let session = AdaptationSession::start(tr.probes, tr.gallery, cfg.clone())?;
            match oracle {
                OracleKind::GroundTruth => run_adaptation(session, &mut GroundTruthOracle, &batches)?,
                OracleKind::Simulated => {
                    let mut o = SimulatedOracle::new(error_rate, cfg.trainer.seed.wrapping_mul(7919))?;
                    run_adaptation(session, &mut o, &batches)?
                }
            }
        }
    };
    fs::create_dir_all(c.out.join("checkpoints"))?;
    write_json(&c.out.join("session.json"), &session.manifest(ds.manifest.name.clone()))?;
    session.label_log.write_jsonl(c.out.join("labels.jsonl"))?;
    write_json(&c.out.join("events.json"), &session.events)?;
    for (k, ck) in session.checkpoints.iter().enumerate() {
        let checkpoint = Checkpoint { state: ck.state.clone(), config: session.config.trainer.clone() };
        checkpoint.save(c.out.join("checkpoints").join(format!("ckpt-{k}.tma")))?;
    }
    for e in &session.events {
        tracing::warn!("{e:?}");
    }
    write_report(&c.out, &session.report(&ds.manifest.name, &te.probes, &te.gallery)?)
}

fn cmd_eval(manifest: PathBuf, model: PathBuf, out: PathBuf) -> Result<()> {
    let ds = load(&manifest)?;
    let te = ds.split(SplitKind::Test);
    let ck = Checkpoint::load(&model).with_context(|| format!("loading {}", model.display()))?;
    if ck.state.dim() != ds.dim {
        bail!("model has dimension {}, dataset {}", ck.state.dim(), ds.dim);
    }
    fs::create_dir_all(&out)?;
    let name = model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    let mut report = EvalReport { dataset: ds.manifest.name.clone(), ..Default::default() };
    report.push_model(name, &ck.state, &te.probes, &te.gallery, 0)?;
    write_report(&out, &report)
}

async fn cmd_serve(
    root: PathBuf,
    manifest: Option<PathBuf>,
    config: Option<PathBuf>,
    session_id: Option<String>,
    port: Option<u16>,
    static_dir: Option<PathBuf>,
) -> Result<()> {
    let mut addr = tma_service::bind_address().map_err(anyhow::Error::msg)?;
    if let Some(p) = port {
        addr.set_port(p);
    }
    let app = tma_service::AppState::new(root);
    if manifest.is_some() || session_id.is_some() {
        let config = match config {
            Some(p) => Some(read_json(&p)?),
            None => None,
        };
        let created = app.create_session(tma_service::CreateSession { manifest, config, session_id }).await?;
        println!("session {} ({})", created.session_id, if created.resumed { "resumed" } else { "created" });
    }
    tma_service::serve(app.router(static_dir), addr).await?;
    Ok(())
}

fn cmd_synth(out: PathBuf, seed: u64, train_ids: usize, test_ids: usize, dim: usize, format: Format) -> Result<()> {
    let defaults = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        train_identities: train_ids,
        test_identities: test_ids,
        dim,
        informative: defaults.informative.min(dim),
        seed,
        ..defaults
    };
    let ds = synthetic(&cfg)?;
    let format = match format {
        Format::Csv => FeatureFormat::Csv,
        Format::Binary => FeatureFormat::Binary,
    };
    let path = write_dataset(&ds, &out, format)?;
    println!("{}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Train(c) => cmd_train(c),
        Command::Adapt { common, oracle, error_rate, criterion, replay } => cmd_adapt(common, oracle, error_rate, criterion, replay),
        Command::Eval { manifest, model, out } => cmd_eval(manifest, model, out),
        Command::Serve { root, manifest, config, session_id, port, static_dir } => tokio::runtime::Runtime::new()?
            .block_on(cmd_serve(root, manifest, config, session_id, port, static_dir)),
        Command::Bench(args) => bench::run(args),
        Command::Synth { out, seed, train_ids, test_ids, dim, format } => cmd_synth(out, seed, train_ids, test_ids, dim, format),
    }
}
