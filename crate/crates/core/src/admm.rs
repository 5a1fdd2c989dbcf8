//! Stochastic ADMM training of the low-rank similarity-dissimilarity model.
//!
//! The hinge loss is split from the `ℓ2,1` regularizers through the
//! constraints `K = U`, `P = V`. Every epoch
//!
//! 1. takes a snapshot of `(K, P)` and the full-data average subgradients,
//! 2. runs `T` variance-reduced stochastic steps on `K̃, P̃`, each drawing one
//!    pair uniformly at random (with replacement),
//! 3. averages the `T` iterates into the new `K, P`,
//! 4. updates `U, V` by row-wise group soft-thresholding,
//! 5. performs dual ascent on `Λ, Ψ`.
//!
//! In step 2 the `P̃` step evaluates the sampled loss at the freshly updated
//! `K̃` while its control variate stays at the snapshot. Keep it that way.
//!
//! [`train_deterministic`] swaps the sampled variance-reduced gradient for
//! the exact full-data gradient at the current iterate and is otherwise the
//! same epoch. It exists as a reference for parity checks.

use ndarray::{Array2, ArrayView1, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::{l21_norm, objective, LabeledPair, ModelState, PairTerms};

/// Inner iterations per epoch: either a fixed count or a multiple of the
/// number of pairs the epoch covers (`T = 2z` by default).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Iterations {
    Fixed(usize),
    PairsMultiple { pairs_multiple: f64 },
}

impl Iterations {
    pub fn resolve(&self, pairs: usize) -> usize {
        match *self {
            Iterations::Fixed(t) => t,
            Iterations::PairsMultiple { pairs_multiple } => (pairs_multiple * pairs as f64).ceil() as usize,
        }
        .max(1)
    }
}

impl Default for Iterations {
    fn default() -> Self {
        Iterations::PairsMultiple { pairs_multiple: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    /// Weight of `‖K‖₂,₁`.
    pub alpha: f64,
    /// Weight of `‖P‖₂,₁`.
    pub beta: f64,
    /// Step size η.
    pub eta: f64,
    /// Augmented Lagrangian penalty ρ.
    pub rho: f64,
    /// Number of epochs S.
    pub epochs: usize,
    /// Iterations per epoch T.
    pub iters_per_epoch: Iterations,
    pub seed: u64,
    /// Rank of a fresh model; `None` means `r = d`.
    pub rank: Option<usize>,
    /// Half-width of the uniform distribution used for a fresh `K, P`.
    pub init_scale: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            beta: 0.001,
            eta: 1.0,
            rho: 1.0,
            epochs: 200,
            iters_per_epoch: Iterations::default(),
            seed: 0,
            rank: None,
            init_scale: 0.01,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be positive");
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad("rho must be positive");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be nonnegative");
        }
        if let Iterations::PairsMultiple { pairs_multiple } = self.iters_per_epoch {
            if !(pairs_multiple > 0.0 && pairs_multiple.is_finite()) {
                return bad("pairs_multiple must be positive");
            }
        }
        if self.rank == Some(0) {
            return bad("rank must be at least 1");
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be nonnegative");
        }
        Ok(())
    }
}

/// Parameters at the start of an epoch together with the full-data average
/// subgradients there.
#[derive(Clone, Debug)]
pub struct EpochSnapshot {
    pub k: Array2<f64>,
    pub p: Array2<f64>,
    pub avg_gk: Array2<f64>,
    pub avg_gp: Array2<f64>,
}

impl EpochSnapshot {
    /// Hinge subgradients of one pair evaluated at the snapshot parameters.
    pub fn sample_gradients(&self, pair: &LabeledPair) -> (Array2<f64>, Array2<f64>) {
        let mut gk = Array2::zeros(self.k.dim());
        let mut gp = Array2::zeros(self.p.dim());
        self.add_sample_gradients(pair, -1.0, &mut gk, &mut gp);
        gk.mapv_inplace(|v| -v);
        gp.mapv_inplace(|v| -v);
        (gk, gp)
    }

    fn add_sample_gradients(&self, pair: &LabeledPair, scale: f64, gk: &mut Array2<f64>, gp: &mut Array2<f64>) {
        let (xp, xg) = features(pair);
        let terms = PairTerms::compute(self.k.view(), self.p.view(), xp, xg);
        if terms.active(pair.y()) {
            terms.add_k_gradient(gk, pair.y(), scale, xp, xg);
            terms.add_p_gradient(gp, pair.y(), scale);
        }
    }
}

fn features(pair: &LabeledPair) -> (ArrayView1<'_, f64>, ArrayView1<'_, f64>) {
    (pair.probe.feature.view(), pair.gallery.feature.view())
}

fn check_data(state: &ModelState, data: &[LabeledPair]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training requires at least one pair".into()));
    }
    state.validate()?;
    for pair in data {
        crate::error::check_dim(state.dim(), pair.probe.dim())?;
        crate::error::check_dim(state.dim(), pair.gallery.dim())?;
    }
    Ok(())
}

/// Average subgradients over all pairs at `(K, P)`.
fn full_gradients(k: &Array2<f64>, p: &Array2<f64>, data: &[LabeledPair]) -> (Array2<f64>, Array2<f64>) {
    let mut gk = Array2::zeros(k.dim());
    let mut gp = Array2::zeros(p.dim());
    let w = 1.0 / data.len() as f64;
    for pair in data {
        let (xp, xg) = features(pair);
        let terms = PairTerms::compute(k.view(), p.view(), xp, xg);
        if terms.active(pair.y()) {
            terms.add_k_gradient(&mut gk, pair.y(), w, xp, xg);
            terms.add_p_gradient(&mut gp, pair.y(), w);
        }
    }
    (gk, gp)
}

pub fn snapshot(state: &ModelState, data: &[LabeledPair]) -> Result<EpochSnapshot> {
    check_data(state, data)?;
    let (avg_gk, avg_gp) = full_gradients(&state.k, &state.p, data);
    Ok(EpochSnapshot {
        k: state.k.clone(),
        p: state.p.clone(),
        avg_gk,
        avg_gp,
    })
}

/// Row-wise proximal map of `weight·‖·‖₂,₁`: row `i` of the result is
/// `v_i · max(0, 1 − weight / (ρ‖v_i‖))` with `v_i = M_i + Dual_i / ρ`.
pub fn prox_group_soft_threshold(m: &Array2<f64>, dual: &Array2<f64>, rho: f64, weight: f64) -> Result<Array2<f64>> {
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument("rho must be positive".into()));
    }
    if !(weight >= 0.0) {
        return Err(Error::InvalidArgument("weight must be nonnegative".into()));
    }
    if m.dim() != dual.dim() {
        return Err(Error::InvalidArgument(format!(
            "shape mismatch {:?} vs {:?}",
            m.dim(),
            dual.dim()
        )));
    }
    let mut out = m + &(dual / rho);
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            continue;
        }
        let shrink = (1.0 - weight / (rho * norm)).max(0.0);
        if shrink == 0.0 {
            row.fill(0.0);
        } else {
            row.mapv_inplace(|v| v * shrink);
        }
    }
    Ok(out)
}

/// Constraint residuals and objective recorded after each epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 for the initial model, `s` after the `s`-th epoch.
    pub epoch: usize,
    pub objective: f64,
    /// `‖K − U‖_F`.
    pub residual_k: f64,
    /// `‖P − V‖_F`.
    pub residual_p: f64,
}

impl EpochRecord {
    fn measure(epoch: usize, state: &ModelState, data: &[LabeledPair], cfg: &TrainerConfig) -> Result<Self> {
        Ok(Self {
            epoch,
            objective: objective(state, data, cfg.alpha, cfg.beta)?,
            residual_k: frobenius_distance(&state.k, &state.u),
            residual_p: frobenius_distance(&state.p, &state.v),
        })
    }
}

fn frobenius_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y)).sqrt()
}

/// A trained model with its per-epoch log.
#[derive(Clone, Debug)]
pub struct Trained {
    pub state: ModelState,
    pub log: Vec<EpochRecord>,
}

/// Which gradient estimator drives the inner iterations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Estimator {
    Stochastic,
    Deterministic,
}

/// One stochastic epoch. `on_iterate` sees every updated `(K̃, P̃)` before
/// averaging.
pub fn epoch_observed<R, F>(
    state: &ModelState,
    data: &[LabeledPair],
    cfg: &TrainerConfig,
    rng: &mut R,
    on_iterate: F,
) -> Result<ModelState>
where
    R: Rng + ?Sized,
    F: FnMut(&Array2<f64>, &Array2<f64>),
{
    cfg.validate()?;
    check_data(state, data)?;
    run_epoch(state, data, cfg, Estimator::Stochastic, rng, on_iterate)
}

pub fn epoch<R: Rng + ?Sized>(state: &ModelState, data: &[LabeledPair], cfg: &TrainerConfig, rng: &mut R) -> Result<ModelState> {
    epoch_observed(state, data, cfg, rng, |_, _| {})
}

/// One epoch of the deterministic reference solver.
pub fn deterministic_epoch(state: &ModelState, data: &[LabeledPair], cfg: &TrainerConfig) -> Result<ModelState> {
    cfg.validate()?;
    check_data(state, data)?;
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    run_epoch(state, data, cfg, Estimator::Deterministic, &mut unused, |_, _| {})
}

fn run_epoch<R, F>(
    state: &ModelState,
    data: &[LabeledPair],
    cfg: &TrainerConfig,
    estimator: Estimator,
    rng: &mut R,
    mut on_iterate: F,
) -> Result<ModelState>
where
    R: Rng + ?Sized,
    F: FnMut(&Array2<f64>, &Array2<f64>),
{
    let iters = cfg.iters_per_epoch.resolve(data.len());
    let (eta, rho) = (cfg.eta, cfg.rho);
    let snap = match estimator {
        Estimator::Stochastic => Some(snapshot(state, data)?),
        Estimator::Deterministic => None,
    };

    let mut kt = state.k.clone();
    let mut pt = state.p.clone();
    let mut sum_k = Array2::<f64>::zeros(kt.dim());
    let mut sum_p = Array2::<f64>::zeros(pt.dim());
    let mut dir = Array2::<f64>::zeros(kt.dim());

    for _ in 0..iters {
        match &snap {
            Some(snap) => {
                let pair = &data[rng.random_range(0..data.len())];
                let (xp, xg) = features(pair);
                let y = pair.y();
                let at_snap = PairTerms::compute(snap.k.view(), snap.p.view(), xp, xg);
                let snap_active = at_snap.active(y);

                // K̃ step: ∇ℓ_t(K̃, P̃) − ∇ℓ_t(K_s, P_s) + ∇J(K_s, P_s) + ρ(K̃ − U + Λ/ρ)
                dir.assign(&snap.avg_gk);
                let current = PairTerms::compute(kt.view(), pt.view(), xp, xg);
                if current.active(y) {
                    current.add_k_gradient(&mut dir, y, 1.0, xp, xg);
                }
                if snap_active {
                    at_snap.add_k_gradient(&mut dir, y, -1.0, xp, xg);
                }
                add_penalty(&mut dir, &kt, &state.u, &state.lambda, rho);
                kt.scaled_add(-eta, &dir);

                // P̃ step: sampled loss at (K̃ new, P̃ old), control variate at the snapshot.
                dir.assign(&snap.avg_gp);
                let current = PairTerms::compute(kt.view(), pt.view(), xp, xg);
                if current.active(y) {
                    current.add_p_gradient(&mut dir, y, 1.0);
                }
                if snap_active {
                    at_snap.add_p_gradient(&mut dir, y, -1.0);
                }
                add_penalty(&mut dir, &pt, &state.v, &state.psi, rho);
                pt.scaled_add(-eta, &dir);
            }
            None => {
                let (gk, _) = full_gradients(&kt, &pt, data);
                dir.assign(&gk);
                add_penalty(&mut dir, &kt, &state.u, &state.lambda, rho);
                kt.scaled_add(-eta, &dir);

                let (_, gp) = full_gradients(&kt, &pt, data);
                dir.assign(&gp);
                add_penalty(&mut dir, &pt, &state.v, &state.psi, rho);
                pt.scaled_add(-eta, &dir);
            }
        }
        on_iterate(&kt, &pt);
        sum_k += &kt;
        sum_p += &pt;
    }

    let inv = 1.0 / iters as f64;
    let k = sum_k * inv;
    let p = sum_p * inv;
    let u = prox_group_soft_threshold(&k, &state.lambda, rho, cfg.alpha)?;
    let v = prox_group_soft_threshold(&p, &state.psi, rho, cfg.beta)?;
    let mut lambda = state.lambda.clone();
    let mut psi = state.psi.clone();
    Zip::from(&mut lambda).and(&k).and(&u).for_each(|l, &k, &u| *l += rho * (k - u));
    Zip::from(&mut psi).and(&p).and(&v).for_each(|l, &p, &v| *l += rho * (p - v));
    Ok(ModelState { k, p, u, v, lambda, psi })
}

/// `dir += ρ(X − Z) + Dual`, the gradient of the augmented terms.
fn add_penalty(dir: &mut Array2<f64>, x: &Array2<f64>, z: &Array2<f64>, dual: &Array2<f64>, rho: f64) {
    Zip::from(dir).and(x).and(z).and(dual).for_each(|d, &x, &z, &l| *d += rho * (x - z) + l);
}

fn initial_state(data: &[LabeledPair], cfg: &TrainerConfig, init: Option<ModelState>, rng: &mut ChaCha8Rng) -> Result<ModelState> {
    match init {
        Some(state) => Ok(state),
        None => {
            let d = data
                .first()
                .ok_or_else(|| Error::InvalidArgument("training requires at least one pair".into()))?
                .probe
                .dim();
            let r = cfg.rank.unwrap_or(d);
            Ok(ModelState::random(r, d, cfg.init_scale, rng))
        }
    }
}

fn train_with(data: &[LabeledPair], cfg: &TrainerConfig, init: Option<ModelState>, estimator: Estimator) -> Result<Trained> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = initial_state(data, cfg, init, &mut rng)?;
    check_data(&state, data)?;
    let mut log = Vec::with_capacity(cfg.epochs + 1);
    log.push(EpochRecord::measure(0, &state, data, cfg)?);
    for s in 1..=cfg.epochs {
        state = run_epoch(&state, data, cfg, estimator, &mut rng, |_, _| {})?;
        log.push(EpochRecord::measure(s, &state, data, cfg)?);
    }
    Ok(Trained { state, log })
}

/// Runs `cfg.epochs` stochastic ADMM epochs, from a fresh seeded
/// initialization or warm-started from `init` (all six matrices kept).
pub fn train(data: &[LabeledPair], cfg: &TrainerConfig, init: Option<ModelState>) -> Result<Trained> {
    train_with(data, cfg, init, Estimator::Stochastic)
}

/// Same epochs as [`train`] with exact full-data gradients in the inner loop.
pub fn train_deterministic(data: &[LabeledPair], cfg: &TrainerConfig, init: Option<ModelState>) -> Result<Trained> {
    train_with(data, cfg, init, Estimator::Deterministic)
}

/// `‖K‖₂,₁` and `‖P‖₂,₁` of a model, handy for logging sparsity.
pub fn regularizer_norms(state: &ModelState) -> (f64, f64) {
    (l21_norm(&state.k), l21_norm(&state.p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::{hinge_subgradients, FeatureRecord, Label, LabelSource};
    use ndarray::{array, Array1};
    use std::sync::Arc;

    fn pair(xp: Array1<f64>, xg: Array1<f64>, label: Label) -> LabeledPair {
        LabeledPair::new(
            Arc::new(FeatureRecord::new("p", 0, xp).unwrap()),
            Arc::new(FeatureRecord::new("g", 1, xg).unwrap()),
            label,
            LabelSource::GroundTruth,
        )
        .unwrap()
    }

    fn random_pairs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<LabeledPair> {
        (0..n)
            .map(|i| {
                let xp = Array1::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0));
                let xg = Array1::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0));
                pair(xp, xg, Label::from_match(i % 3 == 0))
            })
            .collect()
    }

    #[test]
    fn iterations_resolve() {
        assert_eq!(Iterations::default().resolve(50), 100);
        assert_eq!(Iterations::Fixed(7).resolve(50), 7);
        assert_eq!(Iterations::PairsMultiple { pairs_multiple: 0.1 }.resolve(3), 1);
        let json = serde_json::to_string(&TrainerConfig::default()).unwrap();
        let back: TrainerConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, TrainerConfig::default());
        let fixed: TrainerConfig = serde_json::from_str(r#"{"iters_per_epoch": 12}"#).unwrap();
        assert_eq!(fixed.iters_per_epoch, Iterations::Fixed(12));
    }

    #[test]
    fn config_rejects_nonpositive_penalties() {
        let cfg = TrainerConfig { rho: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainerConfig { eta: -1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = random_pairs(&mut rng, 3, 2);
        assert!(epoch(&ModelState::identity(2), &data, &cfg, &mut rng).is_err());
    }

    #[test]
    fn snapshot_inactive_and_single_pair() {
        // Identity model: identical unit features give margin 1 → inactive positive.
        let inactive = vec![pair(array![1.0, 0.0], array![1.0, 0.0], Label::Same)];
        let snap = snapshot(&ModelState::identity(2), &inactive).unwrap();
        assert!(snap.avg_gk.iter().chain(snap.avg_gp.iter()).all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let state = ModelState::random(3, 4, 0.5, &mut rng);
        let one = random_pairs(&mut rng, 1, 4);
        let snap = snapshot(&state, &one).unwrap();
        let (gk, gp) = hinge_subgradients(&state, &one[0]).unwrap();
        assert_eq!(snap.avg_gk, gk);
        assert_eq!(snap.avg_gp, gp);
        let (sk, sp) = snap.sample_gradients(&one[0]);
        assert_eq!(sk, gk);
        assert_eq!(sp, gp);

        assert!(snapshot(&state, &[]).is_err());
    }

    #[test]
    fn snapshot_is_mean_of_sample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let state = ModelState::random(3, 4, 0.7, &mut rng);
        let data = random_pairs(&mut rng, 10, 4);
        let snap = snapshot(&state, &data).unwrap();
        let mut gk = Array2::<f64>::zeros((3, 4));
        let mut gp = Array2::<f64>::zeros((3, 4));
        for p in &data {
            let (a, b) = hinge_subgradients(&state, p).unwrap();
            gk += &a;
            gp += &b;
        }
        gk /= 10.0;
        gp /= 10.0;
        for (a, b) in snap.avg_gk.iter().zip(gk.iter()).chain(snap.avg_gp.iter().zip(gp.iter())) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-3));
        }
    }

    #[test]
    fn prox_examples() {
        let m = array![[1.0, 2.0], [0.1, 0.0], [0.0, 0.0]];
        let dual = array![[0.5, 0.0], [0.0, 0.1], [0.0, 0.0]];
        let out = prox_group_soft_threshold(&m, &dual, 2.0, 0.0).unwrap();
        assert_eq!(out, &m + &(&dual / 2.0));

        // second row: ρ‖v‖ = 2·‖(0.1, 0.05)‖ ≈ 0.224 ≤ 0.3 → zeroed
        let out = prox_group_soft_threshold(&m, &dual, 2.0, 0.3).unwrap();
        assert_eq!(out.row(1), array![0.0, 0.0]);
        assert_eq!(out.row(2), array![0.0, 0.0]);
        let v: Array1<f64> = array![1.25, 2.0];
        let norm = v.dot(&v).sqrt();
        let expected = &v * (1.0 - 0.3 / (2.0 * norm));
        assert!((&out.row(0) - &expected).iter().all(|d| d.abs() < 1e-15));

        assert!(prox_group_soft_threshold(&m, &dual, 0.0, 0.3).is_err());
    }

    #[test]
    fn stationary_point_is_unchanged() {
        // Every pair inactive, U = K, V = P, zero duals, no regularization.
        let data = vec![
            pair(array![1.0, 0.0], array![1.0, 0.0], Label::Same),
            pair(array![0.0, 2.0], array![0.0, 2.0], Label::Same),
        ];
        let state = ModelState::identity(2);
        let cfg = TrainerConfig {
            alpha: 0.0,
            beta: 0.0,
            iters_per_epoch: Iterations::Fixed(5),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let next = epoch(&state, &data, &cfg, &mut rng).unwrap();
        assert_eq!(next, state);
        let det = deterministic_epoch(&state, &data, &cfg).unwrap();
        assert_eq!(det, state);
    }

    #[test]
    fn returned_projection_is_iterate_average_and_duals_ascend() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let state = ModelState::random(4, 4, 0.3, &mut rng);
        let data = random_pairs(&mut rng, 8, 4);
        let cfg = TrainerConfig {
            alpha: 0.05,
            beta: 0.02,
            eta: 0.1,
            iters_per_epoch: Iterations::Fixed(9),
            ..Default::default()
        };
        let mut ks = Vec::new();
        let mut ps = Vec::new();
        let next = epoch_observed(&state, &data, &cfg, &mut rng, |k, p| {
            ks.push(k.clone());
            ps.push(p.clone());
        })
        .unwrap();
        assert_eq!(ks.len(), 9);
        let mean = |xs: &[Array2<f64>]| xs.iter().fold(Array2::<f64>::zeros((4, 4)), |a, x| a + x) / xs.len() as f64;
        for (a, b) in next.k.iter().zip(mean(&ks).iter()).chain(next.p.iter().zip(mean(&ps).iter())) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-6));
        }
        let dl = &next.lambda - &state.lambda;
        let expect = (&next.k - &next.u) * cfg.rho;
        assert!(dl.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() <= 1e-15 * b.abs().max(1.0)));
        let dp = &next.psi - &state.psi;
        let expect = (&next.p - &next.v) * cfg.rho;
        assert!(dp.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() <= 1e-15 * b.abs().max(1.0)));
    }

    #[test]
    fn zero_epochs_returns_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = random_pairs(&mut rng, 4, 3);
        let init = ModelState::random(3, 3, 0.2, &mut rng);
        let cfg = TrainerConfig { epochs: 0, ..Default::default() };
        assert_eq!(train(&data, &cfg, Some(init.clone())).unwrap().state, init);
        assert_eq!(train_deterministic(&data, &cfg, Some(init.clone())).unwrap().state, init);
        let fresh = train(&data, &cfg, None).unwrap();
        assert_eq!(fresh.state.dim(), 3);
        assert!(fresh.state.k.iter().all(|v| v.abs() <= 0.01));
        assert_eq!(fresh.log.len(), 1);
        assert!(train(&[], &cfg, None).is_err());
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = random_pairs(&mut rng, 12, 5);
        let cfg = TrainerConfig { epochs: 5, seed: 42, eta: 0.2, ..Default::default() };
        let a = train(&data, &cfg, None).unwrap();
        let b = train(&data, &cfg, None).unwrap();
        assert_eq!(a.state, b.state);
        let c = train(&data, &TrainerConfig { seed: 43, ..cfg }, None).unwrap();
        assert_ne!(a.state, c.state);
    }

    #[test]
    fn deterministic_solver_decreases_quadratic_toy() {
        // Negative pairs with margins far above −1 stay active throughout:
        // the loss is then a fixed quadratic in (K, P).
        let data = vec![
            pair(array![1.0, 0.0], array![0.9, 0.1], Label::Different),
            pair(array![0.0, 1.0], array![0.1, 0.9], Label::Different),
        ];
        let init = ModelState::from_projections(array![[0.5, 0.1], [0.0, 0.4]], array![[0.05, 0.0], [0.0, 0.05]]).unwrap();
        let cfg = TrainerConfig {
            alpha: 0.0,
            beta: 0.0,
            eta: 0.05,
            rho: 1.0,
            epochs: 30,
            iters_per_epoch: Iterations::Fixed(4),
            ..Default::default()
        };
        let out = train_deterministic(&data, &cfg, Some(init)).unwrap();
        for w in out.log.windows(2) {
            assert!(w[1].objective <= w[0].objective + 1e-12, "{:?}", w);
        }
        assert!(out.log.last().unwrap().objective < out.log[0].objective);
    }
}
