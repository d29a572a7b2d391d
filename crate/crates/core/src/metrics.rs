//! ROC/AUC, thresholded confusion breakdowns and MSE scoring.

use std::fmt::Write as _;

use ndarray::Array2;

use crate::error::{Error, Result};

/// ROC points ordered from (0, 0) to (1, 1) plus the trapezoidal area.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// `(false positive rate, true positive rate)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    /// Two whitespace-separated columns, one point per line.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# fpr tpr\n");
        for (fpr, tpr) in &self.points {
            let _ = writeln!(s, "{fpr:.6} {tpr:.6}");
        }
        s
    }
}

/// Sweeps a threshold over every distinct score, highest first. Tied scores
/// move together, which gives ties half credit in the area.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::shape("roc_auc", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("roc_auc scores"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("ROC needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = vec![(0.0, 0.0)];
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let next = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        let prev = *points.last().expect("starts with origin");
        auc += (next.0 - prev.0) * (next.1 + prev.1) / 2.0;
        points.push(next);
    }
    Ok(RocCurve { points, auc })
}

/// Binary breakdown in percent of the full sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Confusion {
    pub tp: f64,
    pub fp: f64,
    pub tn: f64,
    pub fn_: f64,
    pub total_error: f64,
}

impl Confusion {
    pub fn to_key_values(&self) -> String {
        format!(
            "tp={:.4}\nfp={:.4}\ntn={:.4}\nfn={:.4}\ntotal_error={:.4}\n",
            self.tp, self.fp, self.tn, self.fn_, self.total_error
        )
    }
}

/// A sample is predicted positive when its score is strictly above
/// `threshold`.
pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Confusion> {
    if scores.len() != labels.len() {
        return Err(Error::shape("confusion", &[scores.len()], &[labels.len()]));
    }
    let mut counts = [0usize; 4];
    for (&s, &l) in scores.iter().zip(labels) {
        let idx = match (s > threshold, l) {
            (true, true) => 0,
            (true, false) => 1,
            (false, false) => 2,
            (false, true) => 3,
        };
        counts[idx] += 1;
    }
    let pct = |c: usize| {
        if scores.is_empty() {
            0.0
        } else {
            100.0 * c as f64 / scores.len() as f64
        }
    };
    Ok(Confusion {
        tp: pct(counts[0]),
        fp: pct(counts[1]),
        tn: pct(counts[2]),
        fn_: pct(counts[3]),
        total_error: pct(counts[1] + counts[3]),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

pub fn mse(pred: &Array2<f32>, target: &Array2<f32>, reduction: Reduction) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::shape("mse", pred.shape(), target.shape()));
    }
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / pred.len().max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// P(score_pos > score_neg) + 0.5 P(tie), by enumerating all pairs.
    fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn perfect_separation() {
        let roc = roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(roc.auc, 1.0);
        assert_eq!(roc.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.points.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn small_worked_example() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [false, false, true, true];
        assert_eq!(pairwise_auc(&scores, &labels), 0.75);
        assert!((roc_auc(&scores, &labels).unwrap().auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn chance_level_on_random_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
        let labels: Vec<bool> = (0..10_000).map(|_| rng.gen()).collect();
        let auc = roc_auc(&scores, &labels).unwrap().auc;
        assert!((auc - 0.5).abs() < 0.05, "{auc}");
    }

    #[test]
    fn single_class_rejected() {
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(roc_auc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn confusion_cases() {
        let labels: Vec<bool> = (0..256).map(|i| i % 2 == 0).collect();
        let perfect: Vec<f64> = labels.iter().map(|&l| if l { 0.9 } else { 0.1 }).collect();
        let c = confusion(&perfect, &labels, 0.5).unwrap();
        assert_eq!((c.tp, c.fp, c.tn, c.fn_, c.total_error), (50.0, 0.0, 50.0, 0.0, 0.0));
        let c = confusion(&vec![0.0; 256], &labels, 0.5).unwrap();
        assert_eq!((c.tp, c.fp, c.tn, c.fn_, c.total_error), (0.0, 0.0, 50.0, 50.0, 50.0));
    }

    #[test]
    fn mse_cases() {
        let a = Array2::<f32>::zeros((32, 32));
        assert_eq!(mse(&a, &a, Reduction::Mean).unwrap(), 0.0);
        let b = Array2::<f32>::from_elem((32, 32), 0.5);
        assert_eq!(mse(&b, &a, Reduction::Mean).unwrap(), 0.25);
        assert_eq!(mse(&b, &a, Reduction::Sum).unwrap(), 256.0);
        assert!(mse(&a, &Array2::zeros((2, 2)), Reduction::Mean).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Array2::from_shape_fn((7, 5), |_| rng.gen::<f32>());
        let t = Array2::from_shape_fn((7, 5), |_| rng.gen::<f32>());
        let mut direct = 0.0f64;
        for r in 0..7 {
            for c in 0..5 {
                let d = p[[r, c]] as f64 - t[[r, c]] as f64;
                direct += d * d;
            }
        }
        assert!((mse(&p, &t, Reduction::Sum).unwrap() - direct).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn trapezoid_equals_pairwise(
            data in prop::collection::vec((0u8..20, any::<bool>()), 2..300)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 20.0).collect();
            let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let roc = roc_auc(&scores, &labels).unwrap();
            prop_assert!((roc.auc - pairwise_auc(&scores, &labels)).abs() < 1e-9);
            for w in roc.points.windows(2) {
                prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            data in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..200)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s).collect();
            let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let squashed: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
            let a = roc_auc(&scores, &labels).unwrap().auc;
            let b = roc_auc(&squashed, &labels).unwrap().auc;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn confusion_sums_to_hundred(
            data in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..500)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s).collect();
            let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
            let c = confusion(&scores, &labels, 0.5).unwrap();
            prop_assert!((c.tp + c.fp + c.tn + c.fn_ - 100.0).abs() < 1e-6);
            prop_assert!((c.total_error - c.fp - c.fn_).abs() < 1e-6);
        }
    }
}
