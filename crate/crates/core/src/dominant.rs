//! Probe-relevant set selection by dominant-set clustering.
//!
//! For a probe and a gallery the model scores every pair of vertices, the
//! Platt calibrator maps those margins to positive edge weights, and
//! replicator dynamics
//!
//! ```text
//! h_i ← h_i (W h)_i / (hᵀ W h)
//! ```
//!
//! climb `hᵀWh` on the simplex from the barycenter. Dominant sets are peeled
//! off the graph until the one holding the probe shows up; its gallery
//! members are the pairs sent to the annotator.

use std::io::Write;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::metric::{FeatureRecord, ModelState};
use crate::platt::PlattCalibrator;

/// Probe at vertex 0, gallery members after it.
#[derive(Clone, Debug)]
pub struct SimilarityGraph {
    pub vertices: Vec<Arc<FeatureRecord>>,
    pub weights: Array2<f64>,
}

/// Projections `K x`, `P x` of a set of features, to score all pairs in
/// `O(r)` each.
pub(crate) struct Projected {
    pub k: Array2<f64>,
    pub p: Array2<f64>,
}

impl Projected {
    pub fn new<'a>(state: &ModelState, xs: impl IntoIterator<Item = &'a FeatureRecord>) -> Result<Self> {
        let xs: Vec<&FeatureRecord> = xs.into_iter().collect();
        let d = state.dim();
        let mut k = Array2::zeros((xs.len(), state.rank()));
        let mut p = Array2::zeros((xs.len(), state.rank()));
        for (i, x) in xs.iter().enumerate() {
            check_dim(d, x.dim())?;
            k.row_mut(i).assign(&state.k.dot(&x.feature));
            p.row_mut(i).assign(&state.p.dot(&x.feature));
        }
        Ok(Self { k, p })
    }

    /// Margin between item `i` of `self` and item `j` of `other`.
    pub fn margin(&self, i: usize, other: &Projected, j: usize) -> f64 {
        let sim = self.k.row(i).dot(&other.k.row(j));
        let diff = &self.p.row(i) - &other.p.row(j);
        sim - 0.5 * diff.dot(&diff)
    }
}

pub fn build_graph(
    probe: &Arc<FeatureRecord>,
    gallery: &[Arc<FeatureRecord>],
    state: &ModelState,
    cal: &PlattCalibrator,
) -> Result<SimilarityGraph> {
    if gallery.is_empty() {
        return Err(Error::InvalidArgument("graph needs a nonempty gallery".into()));
    }
    let vertices: Vec<Arc<FeatureRecord>> = std::iter::once(probe.clone()).chain(gallery.iter().cloned()).collect();
    let proj = Projected::new(state, vertices.iter().map(|v| v.as_ref()))?;
    let n = vertices.len();
    let mut weights = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let w = cal.probability(proj.margin(i, &proj, j));
            weights[[i, j]] = w;
            weights[[j, i]] = w;
        }
    }
    Ok(SimilarityGraph { vertices, weights })
}

/// A point of the standard simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipationVector(pub Array1<f64>);

impl ParticipationVector {
    pub fn uniform(n: usize) -> Self {
        Self(Array1::from_elem(n, 1.0 / n as f64))
    }

    /// Normalizes a nonnegative vector onto the simplex.
    pub fn from_weights(w: Array1<f64>) -> Result<Self> {
        let total: f64 = w.sum();
        if !(total > 0.0) || w.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidArgument("participation weights must be nonnegative with positive mass".into()));
        }
        Ok(Self(w / total))
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `hᵀ W h`.
    pub fn objective(&self, w: &Array2<f64>) -> f64 {
        self.0.dot(&w.dot(&self.0))
    }
}

pub fn replicator_step(w: &Array2<f64>, h: &ParticipationVector) -> Result<ParticipationVector> {
    check_dim(w.nrows(), h.len())?;
    check_dim(w.ncols(), h.len())?;
    let wh = w.dot(&h.0);
    let mut next = &h.0 * &wh;
    // Σ h_i (Wh)_i equals hᵀWh; dividing by the sum keeps Σh' = 1 to rounding.
    let obj: f64 = next.sum();
    if !(obj > 0.0) {
        return Err(Error::DegenerateGraph);
    }
    next /= obj;
    let next = ParticipationVector(next);
    // The exact step never lowers hᵀWh; near a fixed point rounding can.
    if next.objective(w) < h.objective(w) {
        return Ok(h.clone());
    }
    Ok(next)
}

#[derive(Clone, Debug)]
pub struct DominantSet {
    pub h: ParticipationVector,
    pub iterations: usize,
    /// Objective change fell to `epsilon` before `max_iters`.
    pub converged: bool,
    /// `hᵀWh = 0` at the start: the whole vertex set is returned as one
    /// structureless cluster.
    pub degenerate: bool,
}

/// Replicator dynamics from the barycenter.
pub fn dominant_set(w: &Array2<f64>, epsilon: f64, max_iters: usize) -> Result<DominantSet> {
    dominant_set_from(w, ParticipationVector::uniform(w.nrows()), epsilon, max_iters)
}

/// Replicator dynamics from `h0`, stopping once `|Δ hᵀWh| ≤ epsilon`.
pub fn dominant_set_from(w: &Array2<f64>, h0: ParticipationVector, epsilon: f64, max_iters: usize) -> Result<DominantSet> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    check_graph(w)?;
    check_dim(w.nrows(), h0.len())?;
    let mut h = h0;
    let mut obj = h.objective(w);
    if !(obj > 0.0) {
        return Ok(DominantSet { h, iterations: 0, converged: true, degenerate: true });
    }
    let mut escapes = 0;
    for it in 1..=max_iters {
        let next = replicator_step(w, &h)?;
        let next_obj = next.objective(w);
        let change = next_obj - obj;
        h = next;
        obj = next_obj;
        if change.abs() <= epsilon {
            if escapes < w.nrows() {
                if let Some(moved) = escape_saddle(w, &h) {
                    escapes += 1;
                    h = moved;
                    obj = h.objective(w);
                    continue;
                }
            }
            return Ok(DominantSet { h, iterations: it, converged: true, degenerate: false });
        }
    }
    Ok(DominantSet { h, iterations: max_iters, converged: false, degenerate: false })
}

/// Stationary points of the dynamics that are not local maxima (two equally
/// strong clusters sharing the mass, for instance) are not dominant sets.
/// If `h` is stationary on its support and `W` has positive curvature along
/// some direction tangent to the simplex there, moves `h` along it; the
/// objective strictly increases by `t²λ`.
fn escape_saddle(w: &Array2<f64>, h: &ParticipationVector) -> Option<ParticipationVector> {
    let n = h.len();
    let tau = 1.0 / (10.0 * n as f64);
    let support: Vec<usize> = (0..n).filter(|&i| h.0[i] > tau).collect();
    let m = support.len();
    if m < 2 {
        return None;
    }
    let obj = h.objective(w);
    let wh = w.dot(&h.0);
    if support.iter().any(|&i| (wh[i] - obj).abs() > 1e-9 * obj) {
        return None;
    }
    // curvature of W on the support, projected onto Σv = 0
    let sub = nalgebra::DMatrix::from_fn(m, m, |a, b| w[[support[a], support[b]]]);
    let center = nalgebra::DMatrix::<f64>::identity(m, m) - nalgebra::DMatrix::from_element(m, m, 1.0 / m as f64);
    let q = &center * sub * &center;
    let eig = q.symmetric_eigen();
    let (best, &lambda) = eig.eigenvalues.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1))?;
    let scale = w.iter().fold(0.0f64, |a, &x| a.max(x));
    if !(lambda > 1e-9 * scale) {
        return None;
    }
    let mut dir: Vec<f64> = eig.eigenvectors.column(best).iter().copied().collect();
    // fixed sign convention: the largest-magnitude component is positive
    let lead = dir.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs()))?;
    if lead < 0.0 {
        dir.iter_mut().for_each(|x| *x = -*x);
    }
    // half of the longest step that stays on the simplex
    let reach = support
        .iter()
        .zip(&dir)
        .filter(|(_, &d)| d < 0.0)
        .map(|(&i, &d)| h.0[i] / -d)
        .fold(f64::INFINITY, f64::min);
    if !reach.is_finite() {
        return None;
    }
    let mut moved = h.0.clone();
    for (&i, &d) in support.iter().zip(&dir) {
        moved[i] = (moved[i] + 0.5 * reach * d).max(0.0);
    }
    let total = moved.sum();
    moved /= total;
    let moved = ParticipationVector(moved);
    (moved.objective(w) > obj).then_some(moved)
}

fn check_graph(w: &Array2<f64>) -> Result<()> {
    if w.nrows() != w.ncols() || w.nrows() == 0 {
        return Err(Error::InvalidArgument(format!("weight matrix must be square and nonempty, got {:?}", w.dim())));
    }
    if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Tuning of the dominant-set selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionParams {
    /// Stop threshold on the raw objective change between iterations.
    pub epsilon: f64,
    /// Participation above which a vertex belongs to the set; `None` means
    /// `1 / (10 |V|)` of the graph being clustered.
    pub support_tau: Option<f64>,
    pub max_iters: usize,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self { epsilon: 0.1, support_tau: None, max_iters: 10_000 }
    }
}

/// Result of peeling a graph whose vertex 0 is the probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSelection {
    /// Graph vertex ids (never 0) of the probe's dominant set.
    pub members: Vec<usize>,
    /// Participation of each member in the final set.
    pub support_values: Vec<f64>,
    pub peel_rounds: usize,
    /// Peeling removed every gallery vertex before reaching the probe.
    pub exhausted: bool,
    /// Some round hit `max_iters`.
    pub truncated: bool,
    /// Some round saw an all-zero graph.
    pub degenerate: bool,
}

/// Peels dominant sets off `w` until one contains vertex 0.
pub fn select_in_graph(w: &Array2<f64>, params: &SelectionParams) -> Result<GraphSelection> {
    check_graph(w)?;
    let mut alive: Vec<usize> = (0..w.nrows()).collect();
    let mut out = GraphSelection {
        members: Vec::new(),
        support_values: Vec::new(),
        peel_rounds: 0,
        exhausted: false,
        truncated: false,
        degenerate: false,
    };
    while alive.len() > 1 {
        out.peel_rounds += 1;
        let sub = w.select(Axis(0), &alive).select(Axis(1), &alive);
        let ds = dominant_set(&sub, params.epsilon, params.max_iters)?;
        out.truncated |= !ds.converged;
        out.degenerate |= ds.degenerate;
        let tau = params.support_tau.unwrap_or(1.0 / (10.0 * alive.len() as f64));
        let support: Vec<usize> = (0..alive.len()).filter(|&i| ds.h.0[i] > tau).collect();
        if support.first() == Some(&0) {
            for &i in &support[1..] {
                out.members.push(alive[i]);
                out.support_values.push(ds.h.0[i]);
            }
            return Ok(out);
        }
        // the probe sits at local index 0 and is not in the support
        let mut keep = support.iter().peekable();
        alive = alive
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                if keep.peek() == Some(&i) {
                    keep.next();
                    false
                } else {
                    true
                }
            })
            .map(|(_, &v)| v)
            .collect();
    }
    out.exhausted = true;
    Ok(out)
}

/// The gallery persons in the probe's dominant set.
#[derive(Clone, Debug)]
pub struct ProbeRelevantSet {
    pub probe: Arc<FeatureRecord>,
    pub members: Vec<Arc<FeatureRecord>>,
    /// Positions of the members in the gallery slice that was passed in.
    pub gallery_indices: Vec<usize>,
    pub support_values: Vec<f64>,
    pub peel_rounds: usize,
    pub exhausted: bool,
    pub truncated: bool,
    pub degenerate: bool,
}

pub fn probe_relevant_set(
    probe: &Arc<FeatureRecord>,
    gallery: &[Arc<FeatureRecord>],
    state: &ModelState,
    cal: &PlattCalibrator,
    params: &SelectionParams,
) -> Result<ProbeRelevantSet> {
    let graph = build_graph(probe, gallery, state, cal)?;
    let sel = select_in_graph(&graph.weights, params)?;
    let gallery_indices: Vec<usize> = sel.members.iter().map(|&v| v - 1).collect();
    Ok(ProbeRelevantSet {
        probe: probe.clone(),
        members: gallery_indices.iter().map(|&i| gallery[i].clone()).collect(),
        gallery_indices,
        support_values: sel.support_values,
        peel_rounds: sel.peel_rounds,
        exhausted: sel.exhausted,
        truncated: sel.truncated,
        degenerate: sel.degenerate,
    })
}

/// Writes `i j w` per edge with `i < j`, one per line.
pub fn write_edge_list<W: Write>(w: &Array2<f64>, mut out: W) -> Result<()> {
    for i in 0..w.nrows() {
        for j in i + 1..w.ncols() {
            writeln!(out, "{i} {j} {}", w[[i, j]])?;
        }
    }
    Ok(())
}
