//! Confusion-matrix metrics, ROC analysis and Cohen's kappa. Metrics whose
//! denominator is zero are reported as `None` rather than 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{class_counts, Label};

/// Counts with pneumonia as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_predictions(pred: &[Label], truth: &[Label]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Size {
                expected: truth.len(),
                found: pred.len(),
            });
        }
        let mut c = Self::default();
        for (p, t) in pred.iter().zip(truth) {
            match (p.is_positive(), t.is_positive()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub bal_acc: Option<f64>,
    pub sens: Option<f64>,
    pub spec: Option<f64>,
    pub prec: Option<f64>,
    pub f1: Option<f64>,
    /// Filled in by callers that have continuous scores.
    pub auc: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn compute_metrics(c: &ConfusionCounts) -> Metrics {
    let sens = ratio(c.tp, c.positives());
    let spec = ratio(c.tn, c.negatives());
    let prec = ratio(c.tp, c.tp + c.fp);
    let bal_acc = sens.zip(spec).map(|(a, b)| 0.5 * (a + b));
    // Harmonic mean of precision and sensitivity, in count form.
    let f1 = prec.and(sens).map(|_| {
        let den = 2 * c.tp + c.fp + c.fn_;
        if den == 0 {
            0.0
        } else {
            (2 * c.tp) as f64 / den as f64
        }
    });
    Metrics {
        bal_acc,
        sens,
        spec,
        prec,
        f1,
        auc: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive; the first point uses +∞.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    pub auc: f64,
    pub points: Vec<RocPoint>,
}

/// ROC curve over the unique scores and its trapezoidal area. Tied scores
/// contribute half, so the area equals `P(s₊ > s₋) + ½·P(s₊ = s₋)`.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<Roc> {
    if scores.len() != labels.len() {
        return Err(Error::Size {
            expected: labels.len(),
            found: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Value("NaN score".into()));
    }
    let (n_neg, n_pos) = class_counts(labels);
    if n_neg == 0 || n_pos == 0 {
        return Err(Error::Argument("ROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    // Twice the area, in units of one positive-negative pair.
    let mut twice_area: u128 = 0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]].is_positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += ((fp - fp0) * (tp + tp0)) as u128;
        points.push(RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
            threshold: t,
        });
    }
    Ok(Roc {
        auc: twice_area as f64 / (2 * n_pos * n_neg) as f64,
        points,
    })
}

/// Chance-corrected agreement `(p_A − p_E)/(1 − p_E)`.
pub fn cohens_kappa(pred: &[Label], truth: &[Label]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Size {
            expected: truth.len(),
            found: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Argument("kappa of an empty sample".into()));
    }
    let n = pred.len() as f64;
    let agree = pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64;
    let (pn, pp) = class_counts(pred);
    let (tn, tp) = class_counts(truth);
    let p_a = agree / n;
    let p_e = (pn as f64 * tn as f64 + pp as f64 * tp as f64) / (n * n);
    if p_e >= 1.0 {
        return Err(Error::DegenerateInput("kappa undefined: chance agreement is 1".into()));
    }
    Ok((p_a - p_e) / (1.0 - p_e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn labels(bits: &[bool]) -> Vec<Label> {
        bits.iter().map(|&b| Label::from_positive(b)).collect()
    }

    #[test]
    fn worked_example() {
        let m = compute_metrics(&ConfusionCounts {
            tp: 10,
            fn_: 0,
            tn: 9,
            fp: 1,
        });
        assert_eq!(m.sens, Some(1.0));
        assert_eq!(m.spec, Some(0.9));
        assert_eq!(m.bal_acc, Some(0.95));
    }

    #[test]
    fn perfect_classifier_scores_one() {
        let m = compute_metrics(&ConfusionCounts { tp: 7, fn_: 0, tn: 3, fp: 0 });
        for v in [m.bal_acc, m.sens, m.spec, m.prec, m.f1] {
            assert_eq!(v, Some(1.0));
        }
    }

    #[test]
    fn undefined_denominators_are_absent() {
        let m = compute_metrics(&ConfusionCounts { tp: 0, fn_: 0, tn: 5, fp: 0 });
        assert_eq!(m.sens, None);
        assert_eq!(m.prec, None);
        assert_eq!(m.bal_acc, None);
        assert_eq!(m.f1, None);
        assert_eq!(m.spec, Some(1.0));
    }

    #[test]
    fn balanced_accuracy_is_the_sens_spec_mean() {
        let bal: f64 = 0.5 * (1.0 + 0.9018);
        assert!((bal - 0.9509).abs() < 1e-12);
    }

    #[test]
    fn constant_prediction_is_chance() {
        let truth = labels(&[true, true, false, false, false]);
        let pred = vec![Label::Pneumonia; 5];
        let m = compute_metrics(&ConfusionCounts::from_predictions(&pred, &truth).unwrap());
        assert_eq!(m.bal_acc, Some(0.5));
    }

    fn pairwise_auc(scores: &[f64], y: &[Label]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, yi) in y.iter().enumerate() {
            for (j, yj) in y.iter().enumerate() {
                if yi.is_positive() && !yj.is_positive() {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_matches_pairwise_oracle_with_ties() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for n in [2usize, 5, 17, 60, 200] {
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
            let mut y: Vec<Label> = (0..n).map(|_| Label::from_positive(rng.random())).collect();
            y[0] = Label::Control;
            y[1] = Label::Pneumonia;
            assert_eq!(roc_auc(&s, &y).unwrap().auc, pairwise_auc(&s, &y));
        }
    }

    #[test]
    fn auc_extremes_and_errors() {
        let y = labels(&[false, false, true, true]);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.3, 0.4], &y).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&[0.4, 0.3, 0.2, 0.1], &y).unwrap().auc, 0.0);
        assert!(matches!(roc_auc(&[1.0, 2.0], &labels(&[true, true])), Err(Error::Argument(_))));
    }

    #[test]
    fn random_scores_give_half_auc() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let s: Vec<f64> = (0..2000).map(|_| rng.random()).collect();
        let y: Vec<Label> = (0..2000).map(|_| Label::from_positive(rng.random())).collect();
        assert!((roc_auc(&s, &y).unwrap().auc - 0.5).abs() < 0.03);
    }

    #[test]
    fn kappa_cases() {
        let t = labels(&[true, false, true, false, true, false]);
        assert_eq!(cohens_kappa(&t, &t).unwrap(), 1.0);
        let flipped: Vec<Label> = t.iter().map(|l| Label::from_positive(!l.is_positive())).collect();
        assert_eq!(cohens_kappa(&flipped, &t).unwrap(), -1.0);
        let c = vec![Label::Control; 4];
        assert!(matches!(cohens_kappa(&c, &c), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn random_predictions_have_near_zero_kappa() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let t: Vec<Label> = (0..20_000).map(|_| Label::from_positive(rng.random::<f64>() < 0.3)).collect();
        let p: Vec<Label> = (0..20_000).map(|_| Label::from_positive(rng.random::<f64>() < 0.3)).collect();
        assert!(cohens_kappa(&p, &t).unwrap().abs() < 0.03);
    }

    proptest! {
        #[test]
        fn class_swap_preserves_balanced_accuracy(tp in 1usize..50, fp in 0usize..50, tn in 1usize..50, fn_ in 0usize..50) {
            let a = compute_metrics(&ConfusionCounts { tp, fp, tn, fn_ });
            let b = compute_metrics(&ConfusionCounts { tp: tn, fp: fn_, tn: tp, fn_: fp });
            prop_assert!((a.bal_acc.unwrap() - b.bal_acc.unwrap()).abs() < 1e-15);
        }

        #[test]
        fn metrics_lie_in_unit_interval(tp in 0usize..50, fp in 0usize..50, tn in 0usize..50, fn_ in 0usize..50) {
            let m = compute_metrics(&ConfusionCounts { tp, fp, tn, fn_ });
            for v in [m.bal_acc, m.sens, m.spec, m.prec, m.f1].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if let (Some(p), Some(s), Some(f)) = (m.prec, m.sens, m.f1) {
                if p + s > 0.0 {
                    prop_assert!((f - 2.0 * p * s / (p + s)).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn auc_invariant_under_monotone_transform(raw in proptest::collection::vec((0u8..20, any::<bool>()), 4..60)) {
            let s: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
            let mut y: Vec<Label> = raw.iter().map(|r| Label::from_positive(r.1)).collect();
            y[0] = Label::Control;
            y[1] = Label::Pneumonia;
            let t: Vec<f64> = s.iter().map(|v| (v * 0.3).exp() - 7.0).collect();
            let a = roc_auc(&s, &y).unwrap();
            prop_assert_eq!(a.auc, roc_auc(&t, &y).unwrap().auc);
            for w in a.points.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
            let last = a.points.last().unwrap();
            prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        }

        #[test]
        fn kappa_is_one_only_for_perfect_agreement(raw in proptest::collection::vec((any::<bool>(), any::<bool>()), 2..40)) {
            let mut t: Vec<Label> = raw.iter().map(|r| Label::from_positive(r.0)).collect();
            t[0] = Label::Control;
            t[1] = Label::Pneumonia;
            let p: Vec<Label> = raw.iter().map(|r| Label::from_positive(r.1)).collect();
            let k = cohens_kappa(&p, &t).unwrap();
            prop_assert!((-1.0..=1.0).contains(&k));
            prop_assert_eq!(k == 1.0, p == t);
        }
    }
}
