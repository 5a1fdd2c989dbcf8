//! Score matrices and ranking metrics.
//!
//! Gallery items are ranked by descending margin; equal scores are ordered
//! by ascending gallery index. A gallery item is a true match of a probe
//! when their person ids are equal.

use std::io::Write;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dominant::Projected;
use crate::error::{Error, Result};
use crate::metric::{FeatureRecord, ModelState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub probe_ids: Vec<String>,
    pub gallery_ids: Vec<String>,
    /// `scores[[p, g]]` is the margin of probe `p` against gallery item `g`.
    pub scores: Array2<f64>,
}

impl ScoreMatrix {
    pub fn new(probe_ids: Vec<String>, gallery_ids: Vec<String>, scores: Array2<f64>) -> Result<Self> {
        if scores.dim() != (probe_ids.len(), gallery_ids.len()) {
            return Err(Error::InvalidArgument(format!(
                "score matrix {:?} does not match {} probes × {} gallery",
                scores.dim(),
                probe_ids.len(),
                gallery_ids.len()
            )));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("score matrix has non-finite entries".into()));
        }
        Ok(Self { probe_ids, gallery_ids, scores })
    }

    fn matches(&self, p: usize) -> impl Iterator<Item = usize> + '_ {
        let id = &self.probe_ids[p];
        self.gallery_ids.iter().enumerate().filter(move |(_, g)| *g == id).map(|(j, _)| j)
    }

    /// 1-based rank of gallery item `j` in probe `p`'s list.
    fn rank_of(&self, p: usize, j: usize) -> usize {
        let row = self.scores.row(p);
        let s = row[j];
        1 + row
            .iter()
            .enumerate()
            .filter(|&(i, &v)| v > s || (v == s && i < j))
            .count()
    }

    /// Ranks of all true matches of probe `p`, ascending.
    pub fn match_ranks(&self, p: usize) -> Vec<usize> {
        let mut ranks: Vec<usize> = self.matches(p).map(|j| self.rank_of(p, j)).collect();
        ranks.sort_unstable();
        ranks
    }
}

pub fn score_all(state: &ModelState, probes: &[Arc<FeatureRecord>], gallery: &[Arc<FeatureRecord>]) -> Result<ScoreMatrix> {
    let pp = Projected::new(state, probes.iter().map(|r| r.as_ref()))?;
    let gp = Projected::new(state, gallery.iter().map(|r| r.as_ref()))?;
    let scores = Array2::from_shape_fn((probes.len(), gallery.len()), |(i, j)| pp.margin(i, &gp, j));
    ScoreMatrix::new(
        probes.iter().map(|r| r.person_id.clone()).collect(),
        gallery.iter().map(|r| r.person_id.clone()).collect(),
        scores,
    )
}

/// Cumulative matching characteristic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmcCurve {
    /// `rates[k − 1]` is the fraction of probes whose first true match has
    /// rank ≤ `k`.
    pub rates: Vec<f64>,
    /// Probes counted in the denominator.
    pub evaluated: usize,
    /// Probes without any true match in the gallery, left out.
    pub excluded: usize,
}

impl CmcCurve {
    /// Rate at 1-based rank `k`, saturating past the gallery size.
    pub fn at(&self, k: usize) -> f64 {
        if self.rates.is_empty() || k == 0 {
            return 0.0;
        }
        self.rates[(k - 1).min(self.rates.len() - 1)]
    }
}

pub fn cmc(s: &ScoreMatrix) -> CmcCurve {
    let n_gallery = s.gallery_ids.len();
    let mut hits = vec![0usize; n_gallery];
    let mut evaluated = 0;
    let mut excluded = 0;
    for p in 0..s.probe_ids.len() {
        match s.match_ranks(p).first() {
            Some(&r) => {
                evaluated += 1;
                hits[r - 1] += 1;
            }
            None => excluded += 1,
        }
    }
    let mut rates = Vec::with_capacity(n_gallery);
    let mut acc = 0;
    for h in hits {
        acc += h;
        rates.push(if evaluated == 0 { 0.0 } else { acc as f64 / evaluated as f64 });
    }
    CmcCurve { rates, evaluated, excluded }
}

/// Mean over probes with at least one true match of the average precision
/// of the ranked gallery; also returns the number of excluded probes.
pub fn mean_average_precision(s: &ScoreMatrix) -> (f64, usize) {
    let mut total = 0.0;
    let mut evaluated = 0;
    let mut excluded = 0;
    for p in 0..s.probe_ids.len() {
        let ranks = s.match_ranks(p);
        if ranks.is_empty() {
            excluded += 1;
            continue;
        }
        let ap: f64 = ranks.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / r as f64).sum::<f64>() / ranks.len() as f64;
        total += ap;
        evaluated += 1;
    }
    (if evaluated == 0 { 0.0 } else { total / evaluated as f64 }, excluded)
}

/// Evaluation of one model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// `TMA_b`: model after `b` batches consumed.
    pub name: String,
    pub checkpoint: usize,
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Unique labeled pairs used up to this checkpoint.
    pub labeled_pairs: usize,
    /// `labeled_pairs / n` in percent.
    pub labeled_percent: f64,
    pub excluded_probes: usize,
}

impl ReportRow {
    pub fn rank(&self, k: usize) -> f64 {
        if self.cmc.is_empty() || k == 0 {
            0.0
        } else {
            self.cmc[(k - 1).min(self.cmc.len() - 1)]
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    /// Size `n` of the training pair universe the percentages refer to.
    pub total_pairs: usize,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    /// Evaluates one model on a test split and appends the row.
    pub fn push_model(
        &mut self,
        name: impl Into<String>,
        state: &ModelState,
        probes: &[Arc<FeatureRecord>],
        gallery: &[Arc<FeatureRecord>],
        labeled_pairs: usize,
    ) -> Result<&ReportRow> {
        let scores = score_all(state, probes, gallery)?;
        let curve = cmc(&scores);
        let (map, _) = mean_average_precision(&scores);
        let labeled_percent = if self.total_pairs == 0 {
            0.0
        } else {
            100.0 * labeled_pairs as f64 / self.total_pairs as f64
        };
        self.rows.push(ReportRow {
            name: name.into(),
            checkpoint: self.rows.len(),
            cmc: curve.rates,
            map,
            labeled_pairs,
            labeled_percent,
            excluded_probes: curve.excluded,
        });
        Ok(self.rows.last().expect("just pushed"))
    }

    /// One line per rank, one column per row: `rank,TMA_1,TMA_2,…`.
    pub fn write_cmc_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let names: Vec<&str> = self.rows.iter().map(|r| r.name.as_str()).collect();
        writeln!(out, "rank,{}", names.join(","))?;
        let ranks = self.rows.iter().map(|r| r.cmc.len()).max().unwrap_or(0);
        for k in 1..=ranks {
            let cols: Vec<String> = self.rows.iter().map(|r| r.rank(k).to_string()).collect();
            writeln!(out, "{k},{}", cols.join(","))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ids(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn diagonal_dominant_is_perfect() {
        let s = ScoreMatrix::new(ids(&["a", "b", "c"]), ids(&["a", "b", "c"]), array![[3.0, 1.0, 0.0], [0.0, 2.0, 1.0], [0.5, 0.2, 0.9]]).unwrap();
        let c = cmc(&s);
        assert_eq!(c.rates, vec![1.0, 1.0, 1.0]);
        assert_eq!(mean_average_precision(&s).0, 1.0);
    }

    #[test]
    fn anti_diagonal() {
        let s = ScoreMatrix::new(ids(&["a", "b"]), ids(&["a", "b"]), array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(cmc(&s).rates, vec![0.0, 1.0]);
        assert_eq!(mean_average_precision(&s).0, 0.5);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        // equal scores: the match at index 1 ranks second behind index 0
        let s = ScoreMatrix::new(ids(&["b"]), ids(&["a", "b", "c"]), array![[1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(s.match_ranks(0), vec![2]);
        let s = ScoreMatrix::new(ids(&["b"]), ids(&["b", "a", "c"]), array![[1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(s.match_ranks(0), vec![1]);
    }

    #[test]
    fn single_match_ap_is_reciprocal_rank() {
        let s = ScoreMatrix::new(ids(&["x"]), ids(&["a", "b", "x", "c"]), array![[4.0, 3.0, 2.0, 1.0]]).unwrap();
        assert!((mean_average_precision(&s).0 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn probes_without_match_are_excluded() {
        let s = ScoreMatrix::new(ids(&["a", "z"]), ids(&["a", "b"]), array![[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let c = cmc(&s);
        assert_eq!(c.excluded, 1);
        assert_eq!(c.evaluated, 1);
        assert_eq!(c.rates[0], 1.0);
        assert_eq!(mean_average_precision(&s), (1.0, 1));
    }

    #[test]
    fn shape_and_finiteness_checked() {
        assert!(ScoreMatrix::new(ids(&["a"]), ids(&["a", "b"]), array![[1.0]]).is_err());
        assert!(ScoreMatrix::new(ids(&["a"]), ids(&["a"]), array![[f64::NAN]]).is_err());
    }

    #[test]
    fn score_all_matches_margin() {
        use crate::metric::margin;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let state = ModelState::random(3, 4, 1.0, &mut rng);
        let mk = |id: String, cam: u8, rng: &mut rand_chacha::ChaCha8Rng| {
            Arc::new(FeatureRecord::new(id, cam, ndarray::Array1::from_shape_simple_fn(4, || rng.random_range(-1.0..1.0))).unwrap())
        };
        let probes: Vec<_> = (0..5).map(|i| mk(format!("p{i}"), 0, &mut rng)).collect();
        let gallery: Vec<_> = (0..5).map(|i| mk(format!("p{i}"), 1, &mut rng)).collect();
        let s = score_all(&state, &probes, &gallery).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let m = margin(&state, probes[i].feature.view(), gallery[j].feature.view()).unwrap();
                assert!((s.scores[[i, j]] - m).abs() <= 1e-12 * m.abs().max(1.0));
            }
        }
        let zero = score_all(&ModelState::zeros(3, 4), &probes[..1], &gallery[..1]).unwrap();
        assert_eq!(zero.scores, array![[0.0]]);
    }

    #[test]
    fn report_csv_and_json() {
        let mut report = EvalReport { dataset: "t".into(), total_pairs: 4, rows: vec![] };
        let probes = vec![Arc::new(FeatureRecord::new("a", 0, array![1.0, 0.0]).unwrap())];
        let gallery = vec![
            Arc::new(FeatureRecord::new("a", 1, array![1.0, 0.0]).unwrap()),
            Arc::new(FeatureRecord::new("b", 1, array![0.0, 1.0]).unwrap()),
        ];
        report.push_model("TMA_1", &ModelState::identity(2), &probes, &gallery, 1).unwrap();
        assert_eq!(report.rows[0].labeled_percent, 25.0);
        let mut csv = Vec::new();
        report.write_cmc_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "rank,TMA_1\n1,1\n2,1\n");
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), report);
    }
}
