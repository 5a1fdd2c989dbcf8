//! Multi-trial adaptation runs averaged per selection criterion.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;

use tma_core::adaptation::{run_adaptation, AdaptConfig, AdaptationSession, GroundTruthOracle, SelectionCriterion, SimulatedOracle};
use tma_core::data::{synthetic, Dataset, SplitKind, SyntheticConfig};
use tma_core::eval::{EvalReport, ReportRow};

use crate::{load, read_config, write_json, write_report, Criterion};

#[derive(Args)]
pub struct BenchArgs {
    /// One dataset manifest per trial; repeat the flag for more trials.
    #[arg(long)]
    manifest: Vec<PathBuf>,
    /// Synthetic trials to run when no manifest is given.
    #[arg(long, default_value_t = 10)]
    trials: usize,
    /// Adaptation config JSON shared by all trials.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of the first trial; trial `i` uses `seed + i`.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = vec![Criterion::DominantSet, Criterion::Supervised])]
    criteria: Vec<Criterion>,
    /// Annotator error rate; 0 uses ground truth.
    #[arg(long, default_value_t = 0.0)]
    error_rate: f64,
    #[arg(long, short, default_value = ".")]
    out: PathBuf,
}

#[derive(Serialize)]
struct Summary {
    criterion: SelectionCriterion,
    checkpoint: usize,
    labeled_percent: f64,
    rank1: f64,
    rank1_std: f64,
    rank5: f64,
    rank10: f64,
    map: f64,
}

#[derive(Serialize)]
struct BenchResult {
    trials: usize,
    seconds: f64,
    summaries: Vec<Summary>,
    /// Every trial's report, per criterion in `criteria` order.
    reports: Vec<Vec<EvalReport>>,
}

fn mean(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = xs.collect();
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Row-wise average of reports that share a checkpoint count.
fn average(name: &str, reports: &[EvalReport]) -> Result<Vec<ReportRow>> {
    let rows = reports[0].rows.len();
    if reports.iter().any(|r| r.rows.len() != rows) {
        bail!("trials produced different numbers of checkpoints");
    }
    let ranks = reports.iter().flat_map(|r| r.rows.iter().map(|row| row.cmc.len())).min().unwrap_or(0);
    Ok((0..rows)
        .map(|k| {
            let at = |f: &dyn Fn(&ReportRow) -> f64| mean(reports.iter().map(|r| f(&r.rows[k]))).0;
            ReportRow {
                name: format!("{name}/{}", reports[0].rows[k].name),
                checkpoint: k,
                cmc: (1..=ranks).map(|i| at(&|row| row.rank(i))).collect(),
                map: at(&|row| row.map),
                labeled_pairs: at(&|row| row.labeled_pairs as f64).round() as usize,
                labeled_percent: at(&|row| row.labeled_percent),
                excluded_probes: 0,
            }
        })
        .collect())
}

fn criterion_name(c: SelectionCriterion) -> String {
    serde_json::to_value(c).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

pub fn run(args: BenchArgs) -> Result<()> {
    let base: AdaptConfig = read_config(args.config.as_deref())?;
    let trials: Vec<(u64, Dataset)> = if args.manifest.is_empty() {
        (0..args.trials as u64)
            .map(|i| {
                let seed = args.seed + i;
                Ok((seed, synthetic(&SyntheticConfig { seed, ..Default::default() })?))
            })
            .collect::<Result<_>>()?
    } else {
        args.manifest.iter().enumerate().map(|(i, m)| Ok((args.seed + i as u64, load(m)?))).collect::<Result<_>>()?
    };
    if trials.is_empty() {
        bail!("no trials to run");
    }
    let started = Instant::now();
    let mut reports: Vec<Vec<EvalReport>> = vec![Vec::new(); args.criteria.len()];
    for (seed, ds) in &trials {
        let tr = ds.split(SplitKind::Train);
        let te = ds.split(SplitKind::Test);
        for (ci, &c) in args.criteria.iter().enumerate() {
            let mut cfg = base.clone();
            cfg.criterion = c.into();
            cfg.trainer.seed = *seed;
            cfg.partition_seed = *seed;
            let batches: Vec<usize> = (1..cfg.num_batches).collect();
            let session = AdaptationSession::start(tr.probes.clone(), tr.gallery.clone(), cfg)?;
            let session = if args.error_rate > 0.0 {
                run_adaptation(session, &mut SimulatedOracle::new(args.error_rate, seed.wrapping_mul(7919))?, &batches)?
            } else {
                run_adaptation(session, &mut GroundTruthOracle, &batches)?
            };
            let report = session.report(&ds.manifest.name, &te.probes, &te.gallery)?;
            tracing::info!(trial = seed, criterion = ?c, rank1 = report.rows.last().map(|r| r.rank(1)), "trial done");
            reports[ci].push(report);
        }
    }

    let mut combined = EvalReport { dataset: format!("{} trials", trials.len()), total_pairs: 0, rows: vec![] };
    let mut summaries = Vec::new();
    for (ci, &c) in args.criteria.iter().enumerate() {
        let criterion: SelectionCriterion = c.into();
        let rows = average(&criterion_name(criterion), &reports[ci])?;
        for (k, row) in rows.iter().enumerate() {
            let (_, rank1_std) = mean(reports[ci].iter().map(|r| r.rows[k].rank(1)));
            summaries.push(Summary {
                criterion,
                checkpoint: k,
                labeled_percent: row.labeled_percent,
                rank1: row.rank(1),
                rank1_std,
                rank5: row.rank(5),
                rank10: row.rank(10),
                map: row.map,
            });
        }
        combined.rows.extend(rows);
    }
    std::fs::create_dir_all(&args.out)?;
    let result = BenchResult { trials: trials.len(), seconds: started.elapsed().as_secs_f64(), summaries, reports };
    write_json(&args.out.join("bench.json"), &result)?;
    write_report(&args.out, &combined)?;
    println!("{} trials in {:.1}s", result.trials, result.seconds);
    Ok(())
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.to_possible_value().expect("no skipped variants");
        f.write_str(v.get_name())
    }
}
