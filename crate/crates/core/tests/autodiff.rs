mod common;

use common::*;
use mmsc::autodiff::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gradients_match_finite_differences_for_each_architecture() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for kind in 0..8 {
        let case = random_net(&mut rng, kind);
        let report = check_net_gradients(&case, &mut rng, 1e-6, 1e-5);
        assert!(report.checked > 20, "kind {kind}: only {} coordinates checked", report.checked);
        assert!(report.max_rel < 1e-4, "kind {kind}: {report:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_direct_loops(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Some(diff) = conv_instance(&mut rng) {
            prop_assert!(diff < 1e-6, "{diff}");
        }
    }

    #[test]
    fn maxpool_matches_direct_loops(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Some(diff) = maxpool_instance(&mut rng) {
            prop_assert!(diff < 1e-6, "{diff}");
        }
    }

    #[test]
    fn dense_matches_direct_loops(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Some(diff) = dense_instance(&mut rng) {
            prop_assert!(diff < 1e-6, "{diff}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 2..40)) {
        let k = 2;
        let rows = values.len() / k;
        prop_assume!(rows > 0);
        let mut g = Graph::<f64>::no_grad();
        let x = g.input(Tensor::new(vec![rows, k], values[..rows * k].to_vec()).unwrap());
        let p = g.softmax(x).unwrap();
        for row in g.value(p).data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn f32_forward_close_to_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let case = random_net(&mut rng, 0);
    let len: usize = case.input_shape.iter().product();
    let input: Vec<f64> = (0..len).map(|_| rng.gen()).collect();
    let mut g64 = Graph::<f64>::no_grad();
    let x = g64.input(Tensor::new(case.input_shape.to_vec(), input.clone()).unwrap());
    let y64 = case.model.forward(&case.model.params().cast::<f64>(), &mut g64, x, None).unwrap();
    let out32 = case
        .model
        .infer(Tensor::new(case.input_shape.to_vec(), input.iter().map(|&v| v as f32).collect()).unwrap(), None)
        .unwrap();
    for (a, b) in g64.value(y64).data().iter().zip(out32.data()) {
        assert!((a - *b as f64).abs() < 1e-4);
    }
}
