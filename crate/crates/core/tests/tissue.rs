mod common;

use mmsc::autodiff::checkpoint;
use mmsc::data::dataset::CaseMix;
use mmsc::data::{Magnification, Patch};
use mmsc::metrics::confusion;
use mmsc::tissue::*;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config() -> TissueNetConfig {
    TissueNetConfig {
        input_size: 32,
        blocks: vec![(4, 1), (8, 1), (8, 1)],
        dense: vec![16],
        classes: 2,
    }
}

fn mix() -> CaseMix {
    CaseMix {
        side: 256,
        lesion_fraction: 0.9,
        max_lesions: 3,
        contrast: 0.4,
        lesion_radius: (6.0, 12.0),
        spiculated_prob: 0.3,
        noise: 0.2,
    }
}

fn data() -> [Vec<Patch>; 3] {
    common::patch_sets(&mix(), Magnification::Half, 32, 24, 6, 7)
}

fn train(sets: &[Vec<Patch>; 3], seed: u64) -> (mmsc::autodiff::Model, TrainLog) {
    let model = build_tissue_net(&config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let hyper = TrainConfig {
        epochs: 3,
        batch_size: 16,
        lr: 0.01,
        momentum: 0.9,
        batches_per_epoch: Some(8),
        seed,
        ..TrainConfig::default()
    };
    train_tissue(&model, &config(), &sets[0], &sets[1], &hyper).unwrap()
}

#[test]
fn training_is_reproducible_and_checkpoint_round_trips() {
    let sets = data();
    for set in &sets {
        let (pos, neg) = common::label_counts(set);
        assert!(pos > 0 && neg > 0, "{pos} {neg}");
    }
    let (a, log_a) = train(&sets, 3);
    let (b, log_b) = train(&sets, 3);
    assert_eq!(log_a.to_text(), log_b.to_text());
    assert_eq!(checkpoint::to_bytes(&a), checkpoint::to_bytes(&b));
    assert_eq!(log_a.epochs.len(), 3);
    let best = log_a.epochs.iter().map(|e| e.val_auc).fold(f64::MIN, f64::max);
    assert_eq!(log_a.epochs[log_a.best_epoch - 1].val_auc, best);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/tissue.ckpt");
    checkpoint::save(&a, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    let refs: Vec<&Array2<f32>> = sets[2].iter().map(|p| &p.pixels).collect();
    let before = predict_many(&a, &refs, 32).unwrap();
    let after = predict_many(&loaded, &refs, 32).unwrap();
    assert!(before.iter().zip(&after).all(|(x, y)| x.to_bits() == y.to_bits()));

    let zeros = predict_patch(&a, &config(), &Array2::zeros((32, 32))).unwrap();
    let ones = predict_patch(&a, &config(), &Array2::ones((32, 32))).unwrap();
    assert_ne!(zeros, ones);
}

#[test]
fn batched_and_single_predictions_agree() {
    let model = build_tissue_net(&config(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let sets = data();
    let refs: Vec<&Array2<f32>> = sets[1].iter().map(|p| &p.pixels).collect();
    let many = predict_many(&model, &refs, 32).unwrap();
    for (p, &m) in refs.iter().zip(&many).take(40) {
        let single = predict_patch(&model, &config(), p).unwrap();
        assert!((single - m).abs() < 1e-5);
    }
}

#[test]
fn evaluation_report_is_consistent() {
    let sets = data();
    let (model, _) = train(&sets, 9);
    let report = evaluate_tissue(&model, &config(), &sets[2], 0.5).unwrap();
    let c = report.confusion;
    assert!((c.tp + c.fp + c.tn + c.fn_ - 100.0).abs() < 1e-9);
    assert!((c.total_error - c.fp - c.fn_).abs() < 1e-9);
    assert_eq!(report.samples, sets[2].len());
    assert!(report.to_key_values().contains("auc="));
}

/// Scores that land the stated percentages exactly on a 1000-sample set.
fn fixture(tp: usize, fp: usize, tn: usize, fn_: usize) -> (Vec<f64>, Vec<bool>) {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (count, score, label) in [(tp, 0.9, true), (fp, 0.8, false), (tn, 0.1, false), (fn_, 0.2, true)] {
        scores.extend(std::iter::repeat_n(score, count));
        labels.extend(std::iter::repeat_n(label, count));
    }
    (scores, labels)
}

#[test]
fn published_breakdown_rows_are_self_consistent() {
    let rows = [
        (47.7, 9.0, 41.0, 2.3, 11.3),
        (29.7, 3.9, 46.0, 20.3, 24.2),
        (33.6, 6.3, 43.8, 16.4, 22.7),
    ];
    for (tp, fp, tn, fn_, total) in rows {
        // one-decimal rounding; the epsilon absorbs binary representation error
        assert!((tp + fp + tn + fn_ - 100.0f64).abs() <= 0.1 + 1e-9);
        assert!((total - (fp + fn_)).abs() <= 0.1 + 1e-9);
        let n = |v: f64| (v * 10.0).round() as usize;
        let (scores, labels) = fixture(n(tp), n(fp), n(tn), n(fn_));
        let c = confusion(&scores, &labels, 0.5).unwrap();
        for (got, want) in [(c.tp, tp), (c.fp, fp), (c.tn, tn), (c.fn_, fn_), (c.total_error, total)] {
            assert!((got - want).abs() <= 0.1 + 1e-9, "{got} vs {want}");
        }
    }
}
