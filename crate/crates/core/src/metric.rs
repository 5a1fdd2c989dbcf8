//! Similarity, dissimilarity and hinge-loss primitives of the low-rank
//! similarity-dissimilarity model.
//!
//! A model is a pair of projections `K, P ∈ ℝ^{r×d}`. For two feature
//! vectors the model computes
//!
//! ```text
//! σ_K(x_p, x_g) = x_pᵀ KᵀK x_g                (similarity)
//! δ_P(x_p, x_g) = ‖P x_p − P x_g‖²             (dissimilarity)
//! m(x_p, x_g)   = σ_K − ½ δ_P                  (margin, label free)
//! ℓ            = max(0, 1 − y·m)              (hinge, y ∈ {−1, +1})
//! ```
//!
//! Matrices are dense and row-major. Row sparsity produced by the `ℓ2,1`
//! regularizer shows up as zero rows.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// One person image: identity, camera and its precomputed feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub person_id: String,
    pub camera_id: u8,
    pub feature: Array1<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
}

impl FeatureRecord {
    pub fn new(person_id: impl Into<String>, camera_id: u8, feature: Array1<f64>) -> Result<Self> {
        if let Some(i) = feature.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "feature component {i} is not finite"
            )));
        }
        Ok(Self {
            person_id: person_id.into(),
            camera_id,
            feature,
            image_path: None,
        })
    }

    pub fn with_image_path(mut self, path: impl Into<String>) -> Self {
        self.image_path = Some(path.into());
        self
    }

    pub fn dim(&self) -> usize {
        self.feature.len()
    }
}

/// Pair label: `+1` for the same person, `−1` otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum Label {
    Different,
    Same,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Same => 1.0,
            Label::Different => -1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Same => Label::Different,
            Label::Different => Label::Same,
        }
    }

    pub fn from_match(same: bool) -> Self {
        if same {
            Label::Same
        } else {
            Label::Different
        }
    }
}

impl TryFrom<i64> for Label {
    type Error = Error;

    fn try_from(v: i64) -> Result<Self> {
        match v {
            1 => Ok(Label::Same),
            -1 => Ok(Label::Different),
            other => Err(Error::InvalidArgument(format!(
                "label must be -1 or +1, got {other}"
            ))),
        }
    }
}

impl From<Label> for i64 {
    fn from(l: Label) -> i64 {
        match l {
            Label::Same => 1,
            Label::Different => -1,
        }
    }
}

/// Where a label came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    GroundTruth,
    Human,
    SimulatedNoisy,
    /// Assigned without a query by one of the baseline selection criteria.
    Automatic,
}

/// A labeled probe/gallery pair taken from two different cameras.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPair {
    pub probe: Arc<FeatureRecord>,
    pub gallery: Arc<FeatureRecord>,
    pub label: Label,
    pub source: LabelSource,
}

impl LabeledPair {
    pub fn new(
        probe: Arc<FeatureRecord>,
        gallery: Arc<FeatureRecord>,
        label: Label,
        source: LabelSource,
    ) -> Result<Self> {
        if probe.camera_id == gallery.camera_id {
            return Err(Error::InvalidArgument(format!(
                "probe {} and gallery {} share camera {}",
                probe.person_id, gallery.person_id, probe.camera_id
            )));
        }
        check_dim(probe.dim(), gallery.dim())?;
        Ok(Self {
            probe,
            gallery,
            label,
            source,
        })
    }

    pub fn y(&self) -> f64 {
        self.label.sign()
    }
}

/// Projections `K`, `P`, their ADMM splitting copies `U`, `V` and the
/// Lagrange multipliers `Λ`, `Ψ`. All six matrices are `r × d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub k: Array2<f64>,
    pub p: Array2<f64>,
    pub u: Array2<f64>,
    pub v: Array2<f64>,
    pub lambda: Array2<f64>,
    pub psi: Array2<f64>,
}

impl ModelState {
    /// Starts from the given projections with `U = K`, `V = P` and zero duals.
    pub fn from_projections(k: Array2<f64>, p: Array2<f64>) -> Result<Self> {
        if k.dim() != p.dim() {
            return Err(Error::InvalidArgument(format!(
                "K is {:?} but P is {:?}",
                k.dim(),
                p.dim()
            )));
        }
        let zeros = Array2::zeros(k.dim());
        Ok(Self {
            u: k.clone(),
            v: p.clone(),
            lambda: zeros.clone(),
            psi: zeros,
            k,
            p,
        })
    }

    pub fn zeros(rank: usize, dim: usize) -> Self {
        let z = Array2::zeros((rank, dim));
        Self {
            k: z.clone(),
            p: z.clone(),
            u: z.clone(),
            v: z.clone(),
            lambda: z.clone(),
            psi: z,
        }
    }

    pub fn identity(dim: usize) -> Self {
        let eye = Array2::eye(dim);
        Self::from_projections(eye.clone(), eye).expect("square identity shapes agree")
    }

    /// `K` and `P` with entries i.i.d. uniform in `[−scale, scale]`.
    pub fn random<R: Rng + ?Sized>(rank: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        let mut draw = || Array2::from_shape_simple_fn((rank, dim), || rng.random_range(-scale..=scale));
        let k = draw();
        let p = draw();
        Self::from_projections(k, p).expect("shapes agree")
    }

    pub fn rank(&self) -> usize {
        self.k.nrows()
    }

    pub fn dim(&self) -> usize {
        self.k.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// The six matrices in checkpoint order `K, P, U, V, Λ, Ψ`.
    pub fn matrices(&self) -> [&Array2<f64>; 6] {
        [&self.k, &self.p, &self.u, &self.v, &self.lambda, &self.psi]
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let shape = self.k.dim();
        for m in self.matrices() {
            if m.dim() != shape {
                return Err(Error::InvalidArgument(format!(
                    "model matrices disagree in shape: {:?} vs {:?}",
                    shape,
                    m.dim()
                )));
            }
        }
        Ok(())
    }

    /// Keeps the `rank` rows of largest ℓ2 norm, separately for the `K`
    /// block (`K, U, Λ`) and the `P` block (`P, V, Ψ`).
    pub fn truncated(&self, rank: usize) -> Self {
        let keep_k = largest_rows(&self.k, rank);
        let keep_p = largest_rows(&self.p, rank);
        Self {
            k: self.k.select(Axis(0), &keep_k),
            u: self.u.select(Axis(0), &keep_k),
            lambda: self.lambda.select(Axis(0), &keep_k),
            p: self.p.select(Axis(0), &keep_p),
            v: self.v.select(Axis(0), &keep_p),
            psi: self.psi.select(Axis(0), &keep_p),
        }
    }

    /// Number of rows of `K` and `P` that are not identically zero.
    pub fn active_rows(&self) -> (usize, usize) {
        let count = |m: &Array2<f64>| m.rows().into_iter().filter(|r| r.iter().any(|&v| v != 0.0)).count();
        (count(&self.k), count(&self.p))
    }
}

fn largest_rows(m: &Array2<f64>, rank: usize) -> Vec<usize> {
    let norms: Vec<f64> = m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut idx: Vec<usize> = (0..m.nrows()).collect();
    idx.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    idx.truncate(rank.min(m.nrows()));
    idx.sort_unstable();
    idx
}

/// Sum of row ℓ2 norms.
pub fn l21_norm(m: &Array2<f64>) -> f64 {
    m.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum()
}

fn check_projection(m: ArrayView2<f64>, xp: ArrayView1<f64>, xg: ArrayView1<f64>) -> Result<()> {
    check_dim(m.ncols(), xp.len())?;
    check_dim(m.ncols(), xg.len())
}

/// `x_pᵀ KᵀK x_g`.
pub fn similarity(k: ArrayView2<f64>, xp: ArrayView1<f64>, xg: ArrayView1<f64>) -> Result<f64> {
    check_projection(k, xp, xg)?;
    Ok(k.dot(&xp).dot(&k.dot(&xg)))
}

/// `‖P x_p − P x_g‖²`.
pub fn dissimilarity(p: ArrayView2<f64>, xp: ArrayView1<f64>, xg: ArrayView1<f64>) -> Result<f64> {
    check_projection(p, xp, xg)?;
    let pd = p.dot(&(&xp - &xg));
    Ok(pd.dot(&pd))
}

/// Label-free score `σ_K − ½ δ_P`, also used as the graph edge score.
pub fn margin(state: &ModelState, xp: ArrayView1<f64>, xg: ArrayView1<f64>) -> Result<f64> {
    check_projection(state.k.view(), xp, xg)?;
    Ok(PairTerms::compute(state.k.view(), state.p.view(), xp, xg).margin())
}

pub fn hinge_loss(state: &ModelState, pair: &LabeledPair) -> Result<f64> {
    let m = margin(state, pair.probe.feature.view(), pair.gallery.feature.view())?;
    Ok((1.0 - pair.y() * m).max(0.0))
}

/// Gradients of the hinge loss of one pair with respect to `K` and `P`.
///
/// Zero matrices on the flat side of the hinge, including the kink
/// `y·m = 1`.
pub fn hinge_subgradients(state: &ModelState, pair: &LabeledPair) -> Result<(Array2<f64>, Array2<f64>)> {
    let (xp, xg) = (pair.probe.feature.view(), pair.gallery.feature.view());
    check_projection(state.k.view(), xp, xg)?;
    let mut gk = Array2::zeros(state.k.dim());
    let mut gp = Array2::zeros(state.p.dim());
    let terms = PairTerms::compute(state.k.view(), state.p.view(), xp, xg);
    if terms.active(pair.y()) {
        terms.add_k_gradient(&mut gk, pair.y(), 1.0, xp, xg);
        terms.add_p_gradient(&mut gp, pair.y(), 1.0);
    }
    Ok((gk, gp))
}

/// Average hinge loss plus `α‖K‖₂,₁ + β‖P‖₂,₁`.
pub fn objective(state: &ModelState, data: &[LabeledPair], alpha: f64, beta: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("objective over an empty pair set".into()));
    }
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::InvalidArgument("regularization weights must be nonnegative".into()));
    }
    let mut loss = 0.0;
    for pair in data {
        loss += hinge_loss(state, pair)?;
    }
    Ok(loss / data.len() as f64 + alpha * l21_norm(&state.k) + beta * l21_norm(&state.p))
}

/// Cached projections of one pair under `(K, P)`.
pub(crate) struct PairTerms {
    pub kp: Array1<f64>,
    pub kg: Array1<f64>,
    pub pd: Array1<f64>,
    pub delta: Array1<f64>,
}

impl PairTerms {
    pub fn compute(k: ArrayView2<f64>, p: ArrayView2<f64>, xp: ArrayView1<f64>, xg: ArrayView1<f64>) -> Self {
        let delta = &xp - &xg;
        Self {
            kp: k.dot(&xp),
            kg: k.dot(&xg),
            pd: p.dot(&delta),
            delta,
        }
    }

    pub fn similarity(&self) -> f64 {
        self.kp.dot(&self.kg)
    }

    pub fn dissimilarity(&self) -> f64 {
        self.pd.dot(&self.pd)
    }

    pub fn margin(&self) -> f64 {
        self.similarity() - 0.5 * self.dissimilarity()
    }

    pub fn active(&self, y: f64) -> bool {
        y * self.margin() < 1.0
    }

    /// `out += scale · (−y) · (K x_p x_gᵀ + K x_g x_pᵀ)`.
    pub fn add_k_gradient(&self, out: &mut Array2<f64>, y: f64, scale: f64, xp: ArrayView1<f64>, xg: ArrayView1<f64>) {
        let c = -y * scale;
        add_outer(out, c, &self.kp, xg);
        add_outer(out, c, &self.kg, xp);
    }

    /// `out += scale · y · P Δ Δᵀ`.
    pub fn add_p_gradient(&self, out: &mut Array2<f64>, y: f64, scale: f64) {
        add_outer(out, y * scale, &self.pd, self.delta.view());
    }
}

/// `out += c · a bᵀ`.
pub(crate) fn add_outer(out: &mut Array2<f64>, c: f64, a: &Array1<f64>, b: ArrayView1<f64>) {
    for (mut row, &ai) in out.rows_mut().into_iter().zip(a.iter()) {
        let s = c * ai;
        if s != 0.0 {
            row.scaled_add(s, &b);
        }
    }
}
