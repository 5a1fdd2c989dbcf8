//! Sigmoid calibration of margin scores, `f(s) = 1 / (1 + exp(A·s + B))`.
//!
//! Fitting follows the Newton method with backtracking line search of Lin,
//! Lin and Weng's note on Platt's probabilistic outputs, with Platt's
//! smoothed targets `(N₊+1)/(N₊+2)` and `1/(N₋+2)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::Label;

/// Outputs are kept this far away from 0 and 1.
const PROB_FLOOR: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlattCalibrator {
    pub a: f64,
    pub b: f64,
}

impl Default for PlattCalibrator {
    /// `A = −1, B = 0`, used before any labels exist.
    fn default() -> Self {
        Self { a: -1.0, b: 0.0 }
    }
}

impl PlattCalibrator {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a < 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "calibrator needs finite A < 0, got A = {a}, B = {b}"
            )));
        }
        Ok(Self { a, b })
    }

    /// Probability that a pair with margin `s` is a match; always in (0, 1).
    pub fn probability(&self, s: f64) -> f64 {
        let z = self.a * s + self.b;
        let p = if z >= 0.0 {
            let e = (-z).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + z.exp())
        };
        p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    }

    /// Fits the calibrator, falling back to the default when only one class
    /// is present or the fit does not come out increasing.
    pub fn fit_or_default(scores: &[f64], labels: &[Label]) -> Self {
        platt_fit(scores, labels).unwrap_or_default()
    }
}

pub fn platt_fit(scores: &[f64], labels: &[Label]) -> Result<PlattCalibrator> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score {s}")));
    }
    let n_pos = labels.iter().filter(|&&l| l == Label::Same).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::CalibrationUnavailable(format!(
            "need both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }

    let hi = (n_pos + 1.0) / (n_pos + 2.0);
    let lo = 1.0 / (n_neg + 2.0);
    let targets: Vec<f64> = labels.iter().map(|&l| if l == Label::Same { hi } else { lo }).collect();

    const MAX_ITER: usize = 100;
    const MIN_STEP: f64 = 1e-10;
    const SIGMA: f64 = 1e-12;
    const EPS: f64 = 1e-5;

    let objective = |a: f64, b: f64| -> f64 {
        scores
            .iter()
            .zip(&targets)
            .map(|(&s, &t)| {
                let z = s * a + b;
                if z >= 0.0 {
                    t * z + (-z).exp().ln_1p()
                } else {
                    (t - 1.0) * z + z.exp().ln_1p()
                }
            })
            .sum()
    };

    let mut a = 0.0;
    let mut b = ((n_neg + 1.0) / (n_pos + 1.0)).ln();
    let mut fval = objective(a, b);

    for _ in 0..MAX_ITER {
        // gradient and Hessian of the negative log-likelihood
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (SIGMA, SIGMA, 0.0, 0.0, 0.0);
        for (&s, &t) in scores.iter().zip(&targets) {
            let z = s * a + b;
            let (p, q) = if z >= 0.0 {
                let e = (-z).exp();
                (e / (1.0 + e), 1.0 / (1.0 + e))
            } else {
                let e = z.exp();
                (1.0 / (1.0 + e), e / (1.0 + e))
            };
            let d2 = p * q;
            h11 += s * s * d2;
            h22 += d2;
            h21 += s * d2;
            let d1 = t - p;
            g1 += s * d1;
            g2 += d1;
        }
        if g1.abs() < EPS && g2.abs() < EPS {
            break;
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;

        let mut step = 1.0;
        let mut accepted = false;
        while step >= MIN_STEP {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = objective(na, nb);
            if nf < fval + 1e-4 * step * gd {
                a = na;
                b = nb;
                fval = nf;
                accepted = true;
                break;
            }
            step /= 2.0;
        }
        if !accepted {
            break;
        }
    }

    if !(a < 0.0) {
        return Err(Error::CalibrationUnavailable(format!(
            "fitted slope A = {a} is not negative; scores do not order the labels"
        )));
    }
    PlattCalibrator::new(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_midpoint() {
        assert_eq!(PlattCalibrator::default().probability(0.0), 0.5);
    }

    #[test]
    fn separated_scores_fit() {
        let scores = [-1.0, 1.0];
        let labels = [Label::Different, Label::Same];
        let cal = platt_fit(&scores, &labels).unwrap();
        assert!(cal.a < 0.0);
        // two points: smoothed targets 2/3 and 1/3 bound the fit
        assert!(cal.probability(1.0) > cal.probability(-1.0));

        let scores: Vec<f64> = (0..20).map(|i| if i < 10 { -1.0 } else { 1.0 }).collect();
        let labels: Vec<Label> = (0..20).map(|i| Label::from_match(i >= 10)).collect();
        let cal = platt_fit(&scores, &labels).unwrap();
        assert!(cal.probability(1.0) > 0.9, "{}", cal.probability(1.0));
        assert!(cal.probability(-1.0) < 0.1);
    }

    #[test]
    fn matches_logistic_likelihood_optimum() {
        // Overlapping classes: the optimum has zero gradient w.r.t. (A, B).
        let scores = [-2.0, -1.0, -0.5, 0.0, 0.3, 0.5, 1.0, 2.0, -0.2, 0.8];
        let labels: Vec<Label> = [0, 0, 1, 0, 1, 0, 1, 1, 0, 1].iter().map(|&v| Label::from_match(v == 1)).collect();
        let cal = platt_fit(&scores, &labels).unwrap();
        let n_pos = 5.0;
        let n_neg = 5.0;
        let (hi, lo) = ((n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0));
        let (mut ga, mut gb) = (0.0, 0.0);
        for (&s, &l) in scores.iter().zip(&labels) {
            let t = if l == Label::Same { hi } else { lo };
            let p = cal.probability(s);
            ga += s * (t - p);
            gb += t - p;
        }
        assert!(ga.abs() < 1e-5 && gb.abs() < 1e-5, "{ga} {gb}");
    }

    #[test]
    fn single_class_is_unavailable() {
        let err = platt_fit(&[1.0, 2.0], &[Label::Same, Label::Same]).unwrap_err();
        assert!(matches!(err, Error::CalibrationUnavailable(_)));
        assert_eq!(PlattCalibrator::fit_or_default(&[1.0], &[Label::Same]), PlattCalibrator::default());
        assert!(platt_fit(&[1.0], &[Label::Same, Label::Different]).is_err());
    }

    #[test]
    fn anti_ordered_scores_are_rejected() {
        let scores: Vec<f64> = (0..20).map(|i| if i < 10 { 1.0 } else { -1.0 }).collect();
        let labels: Vec<Label> = (0..20).map(|i| Label::from_match(i >= 10)).collect();
        assert!(matches!(platt_fit(&scores, &labels), Err(Error::CalibrationUnavailable(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn fitted_calibrators_are_monotone_and_open_unit(
                raw in prop::collection::vec((-3.0f64..3.0, any::<bool>()), 4..40),
                s1 in -10.0f64..10.0, ds in 0.01f64..5.0,
            ) {
                let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
                let labels: Vec<Label> = raw.iter().map(|r| Label::from_match(r.1)).collect();
                if let Ok(cal) = platt_fit(&scores, &labels) {
                    prop_assert!(cal.a < 0.0);
                    let (f1, f2) = (cal.probability(s1), cal.probability(s1 + ds));
                    prop_assert!(f1 > 0.0 && f1 < 1.0 && f2 > 0.0 && f2 < 1.0);
                    prop_assert!(f1 <= f2);
                }
            }
        }
    }
}
