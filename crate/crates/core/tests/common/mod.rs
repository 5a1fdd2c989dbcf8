#![allow(dead_code)]

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use tma_core::adaptation::{run_adaptation, AdaptConfig, AdaptationSession, SelectionCriterion, SimulatedOracle};
use tma_core::data::{synthetic, SplitKind, SyntheticConfig};
use tma_core::metric::{hinge_loss, hinge_subgradients};
use tma_core::{FeatureRecord, Label, LabelSource, LabeledPair, ModelState};

pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

pub fn gaussian_vector<R: Rng>(rng: &mut R, n: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.sample(StandardNormal))
}

pub fn labeled(xp: Array1<f64>, xg: Array1<f64>, label: Label) -> LabeledPair {
    LabeledPair::new(
        Arc::new(FeatureRecord::new("p", 0, xp).unwrap()),
        Arc::new(FeatureRecord::new("g", 1, xg).unwrap()),
        label,
        LabelSource::GroundTruth,
    )
    .unwrap()
}

/// A random model and pair whose hinge is active away from the kink.
pub fn active_instance<R: Rng>(rng: &mut R) -> (ModelState, LabeledPair) {
    loop {
        let r = rng.random_range(1..=5);
        let d = rng.random_range(1..=6);
        let k = gaussian_matrix(rng, r, d) * 0.5;
        let p = gaussian_matrix(rng, r, d) * 0.5;
        let state = ModelState::from_projections(k, p).unwrap();
        let label = if rng.random_bool(0.5) { Label::Same } else { Label::Different };
        let pair = labeled(gaussian_vector(rng, d), gaussian_vector(rng, d), label);
        let loss = hinge_loss(&state, &pair).unwrap();
        if loss > 0.05 {
            return (state, pair);
        }
    }
}

/// Largest component-wise relative error between the analytic subgradients
/// and central differences of the hinge loss.
pub fn finite_difference_error(state: &ModelState, pair: &LabeledPair, step: f64) -> f64 {
    let (gk, gp) = hinge_subgradients(state, pair).unwrap();
    let loss_with = |k: &Array2<f64>, p: &Array2<f64>| {
        let s = ModelState::from_projections(k.clone(), p.clone()).unwrap();
        hinge_loss(&s, pair).unwrap()
    };
    let mut worst: f64 = 0.0;
    for which in 0..2 {
        let analytic = if which == 0 { &gk } else { &gp };
        for idx in 0..analytic.len() {
            let (i, j) = (idx / analytic.ncols(), idx % analytic.ncols());
            let (mut kp, mut pp) = (state.k.clone(), state.p.clone());
            let (mut km, mut pm) = (state.k.clone(), state.p.clone());
            if which == 0 {
                kp[[i, j]] += step;
                km[[i, j]] -= step;
            } else {
                pp[[i, j]] += step;
                pm[[i, j]] -= step;
            }
            let numeric = (loss_with(&kp, &pp) - loss_with(&km, &pm)) / (2.0 * step);
            let a = analytic[[i, j]];
            let scale = a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    worst
}

/// Minimizes `½ρ‖u − v‖² + w‖u‖₂` numerically. Along any direction other
/// than `v` the quadratic term only grows, so the search runs over
/// `u = t·v/‖v‖`: a dense grid on `t ∈ [0, ‖v‖]` followed by golden-section
/// refinement around the best grid point.
pub fn numeric_prox(v: &Array1<f64>, rho: f64, w: f64) -> Array1<f64> {
    let norm = v.dot(v).sqrt();
    if norm == 0.0 {
        return Array1::zeros(v.len());
    }
    let f = |t: f64| 0.5 * rho * (t - norm).powi(2) + w * t.abs();
    let grid = 2000;
    let h = norm / grid as f64;
    let best = (0..=grid).map(|i| i as f64 * h).min_by(|a, b| f(*a).total_cmp(&f(*b))).unwrap();
    let (mut lo, mut hi) = ((best - h).max(0.0), (best + h).min(norm));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let (a, b) = (hi - g * (hi - lo), lo + g * (hi - lo));
        if f(a) <= f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    let mut t = 0.5 * (lo + hi);
    if f(0.0) <= f(t) {
        t = 0.0;
    }
    v * (t / norm)
}

/// Gallery order for one probe: descending score, ties by ascending index,
/// by plain selection sort.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut rest: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::new();
    while !rest.is_empty() {
        let mut best = 0;
        for i in 1..rest.len() {
            let (a, b) = (rest[i], rest[best]);
            if scores[a] > scores[b] || (scores[a] == scores[b] && a < b) {
                best = i;
            }
        }
        out.push(rest.remove(best));
    }
    out
}

/// CMC rates and mAP by direct counting.
pub fn brute_force_cmc_map(scores: &Array2<f64>, probe_ids: &[String], gallery_ids: &[String]) -> (Vec<f64>, f64) {
    let ng = gallery_ids.len();
    let mut first_hits = Vec::new();
    let mut ap_sum = 0.0;
    for p in 0..probe_ids.len() {
        let row: Vec<f64> = scores.row(p).to_vec();
        let order = ranked(&row);
        let positions: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(_, &g)| gallery_ids[g] == probe_ids[p])
            .map(|(pos, _)| pos + 1)
            .collect();
        if positions.is_empty() {
            continue;
        }
        first_hits.push(positions[0]);
        let mut ap = 0.0;
        for (found, &pos) in positions.iter().enumerate() {
            ap += (found + 1) as f64 / pos as f64;
        }
        ap_sum += ap / positions.len() as f64;
    }
    let evaluated = first_hits.len();
    let rates = (1..=ng)
        .map(|k| {
            if evaluated == 0 {
                0.0
            } else {
                first_hits.iter().filter(|&&r| r <= k).count() as f64 / evaluated as f64
            }
        })
        .collect();
    let map = if evaluated == 0 { 0.0 } else { ap_sum / evaluated as f64 };
    (rates, map)
}

/// Two planted cliques on `1 + |gallery|` vertices with vertex 0 (the probe)
/// in the first one. Returns the weights and the probe's clique without the
/// probe, as sorted vertex ids.
pub fn planted_two_cliques<R: Rng>(rng: &mut R, own: usize, other: usize, intra: f64, inter: f64) -> (Array2<f64>, Vec<usize>) {
    let n = own + other;
    let mut gallery: Vec<usize> = (1..n).collect();
    gallery.shuffle(rng);
    let mut group = vec![1u8; n];
    group[0] = 0;
    for &v in &gallery[..own - 1] {
        group[v] = 0;
    }
    let w = Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            0.0
        } else if group[i] == group[j] {
            intra
        } else {
            inter
        }
    });
    let mut clique: Vec<usize> = (1..n).filter(|&v| group[v] == 0).collect();
    clique.sort_unstable();
    (w, clique)
}

/// Final test rank-1 (percent) for each checkpoint, plus the session effort.
pub struct StreamRun {
    pub rank1: Vec<f64>,
    pub effort: f64,
    pub queried: usize,
}

pub fn synthetic_stream(seed: u64, criterion: SelectionCriterion, epsilon: f64, error_rate: f64) -> StreamRun {
    let ds = synthetic(&SyntheticConfig { seed, ..Default::default() }).unwrap();
    let train = ds.split(SplitKind::Train);
    let test = ds.split(SplitKind::Test);
    let mut config = AdaptConfig { criterion, partition_seed: seed, ..Default::default() };
    config.trainer.seed = seed;
    config.selection.epsilon = epsilon;
    let session = AdaptationSession::start(train.probes, train.gallery, config).unwrap();
    let mut oracle = SimulatedOracle::new(error_rate, seed.wrapping_mul(7919)).unwrap();
    let session = run_adaptation(session, &mut oracle, &[1, 2, 3]).unwrap();
    let report = session.report("synthetic", &test.probes, &test.gallery).unwrap();
    StreamRun {
        rank1: report.rows.iter().map(|r| 100.0 * r.rank(1)).collect(),
        effort: session.effort(),
        queried: session.label_log.queried(),
    }
}
