mod common;

use common::{cp_oracle, head_oracle, random_tensor, rng};
use julia_core::{
    compute_metrics, elementwise_flow, parse_coo, split_dataset, Activation, CpFactors, JuliaModel, NonlinearParams,
    ParseOptions, SparseTensor,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..6, 2..5)
}

fn index_in(shape: &[usize], seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    shape.iter().map(|&d| rand::Rng::random_range(&mut r, 0..d)).collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cp_is_linear_in_each_factor(shape in shape_strategy(), rank in 1usize..4, seed in any::<u64>(), mode_pick in any::<usize>()) {
        let mode = mode_pick % shape.len();
        let x = CpFactors::initialize(&shape, rank, seed);
        let y = CpFactors::initialize(&shape, rank, seed.wrapping_add(1));
        let mut sum = x.clone();
        let mut only_y = x.clone();
        for i in 0..shape[mode] {
            for r in 0..rank {
                let (a, b) = (x.factor(mode).get(i, r), y.factor(mode).get(i, r));
                sum.factor_mut(mode).set(i, r, 2.0 * a + b);
                only_y.factor_mut(mode).set(i, r, b);
            }
        }
        let idx = index_in(&shape, seed);
        let lhs = sum.predict(&idx).unwrap();
        let rhs = 2.0 * x.predict(&idx).unwrap() + only_y.predict(&idx).unwrap();
        prop_assert!(close(lhs, rhs, 1e-12));
        prop_assert!(close(x.predict(&idx).unwrap(), cp_oracle(&x, &idx), 1e-12));
    }

    #[test]
    fn cp_prediction_ignores_component_order(shape in shape_strategy(), rank in 1usize..5, seed in any::<u64>()) {
        let cp = CpFactors::initialize(&shape, rank, seed);
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.shuffle(&mut rng(seed));
        let permuted = cp.permute_components(&perm).unwrap();
        let idx = index_in(&shape, seed ^ 1);
        prop_assert!(close(cp.predict(&idx).unwrap(), permuted.predict(&idx).unwrap(), 1e-12));
    }

    #[test]
    fn head_prediction_ignores_component_order(shape in shape_strategy(), f in 1usize..4, seed in any::<u64>()) {
        let head = NonlinearParams::initialize(&shape, f, Activation::Relu, seed);
        let mut perm: Vec<usize> = (0..f).collect();
        perm.shuffle(&mut rng(seed));
        let permuted = head.permute_components(&perm).unwrap();
        let idx = index_in(&shape, seed ^ 2);
        prop_assert!(close(head.predict_checked(&idx).unwrap(), permuted.predict_checked(&idx).unwrap(), 1e-12));
    }

    #[test]
    fn relu_head_is_nonnegative(shape in shape_strategy(), f in 1usize..4, seed in any::<u64>(), spread in 0.1f64..3.0) {
        let mut head = NonlinearParams::initialize(&shape, f, Activation::Relu, seed);
        let flat: Vec<f64> = julia_core::NonlinearHead::flatten(&head).iter().map(|v| v * spread * 10.0 - 0.3).collect();
        julia_core::NonlinearHead::unflatten(&mut head, &flat).unwrap();
        let idx = index_in(&shape, seed);
        prop_assert!(head.predict_checked(&idx).unwrap() >= 0.0);
    }

    #[test]
    fn head_matches_straight_line_oracle(shape in shape_strategy(), f in 1usize..4, seed in any::<u64>(), identity in any::<bool>()) {
        let act = if identity { Activation::Identity } else { Activation::Relu };
        let mut head = NonlinearParams::initialize(&shape, f, act, seed);
        // larger weights so that both signs reach every activation
        let flat: Vec<f64> = julia_core::NonlinearHead::flatten(&head).iter().map(|v| v * 8.0).collect();
        julia_core::NonlinearHead::unflatten(&mut head, &flat).unwrap();
        let idx = index_in(&shape, seed);
        prop_assert!(close(head.predict_checked(&idx).unwrap(), head_oracle(&head, &idx), 1e-12));
    }

    #[test]
    fn coo_text_round_trips(shape in shape_strategy(), fill in 0.05f64..1.0, seed in any::<u64>()) {
        let cells: usize = shape.iter().product();
        let nnz = ((cells as f64 * fill).ceil() as usize).max(1);
        let t = random_tensor(&shape, nnz, &mut rng(seed));
        let back = parse_coo(t.to_coo_string().as_bytes(), &ParseOptions::new(shape.len())).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn split_partitions_entries(nnz in 3usize..200, tf in 0.05f64..0.95, vf in 0.0f64..0.9, seed in any::<u64>()) {
        let t = random_tensor(&[10, 10, 2], nnz, &mut rng(seed));
        if let Ok(split) = split_dataset(&t, tf, vf, seed) {
            let mut all: Vec<usize> = split.train.iter().chain(&split.val).chain(&split.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..nnz).collect::<Vec<_>>());
            prop_assert!(!split.train.is_empty());
            prop_assert_eq!(split.test.len(), ((1.0 - tf) * nnz as f64).round() as usize);
            prop_assert!(split.validate(nnz).is_ok());
        }
    }

    #[test]
    fn loss_ignores_entry_order(seed in any::<u64>(), nnz in 1usize..60) {
        let shape = [5, 4, 3];
        let t = random_tensor(&shape, nnz, &mut rng(seed));
        let model = JuliaModel::initialize(&shape, 2, 2, Activation::Relu, seed).unwrap();
        let mut order: Vec<usize> = (0..nnz).collect();
        let base = model.loss_at(&t, &order);
        order.shuffle(&mut rng(seed ^ 9));
        prop_assert!(close(base, model.loss_at(&t, &order), 1e-12));
        let reversed: Vec<(&[usize], f64)> = t.entries().collect::<Vec<_>>().into_iter().rev().collect();
        prop_assert!(close(base, model.loss(reversed).unwrap(), 1e-12));
    }

    #[test]
    fn rfe_is_scale_invariant(values in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40), c in 1e-3f64..1e3) {
        prop_assume!(values.iter().any(|(_, t)| t.abs() > 1e-3));
        let (pred, truth): (Vec<f64>, Vec<f64>) = values.into_iter().unzip();
        let a = compute_metrics(&pred, &truth).unwrap().rfe.unwrap();
        let sp: Vec<f64> = pred.iter().map(|v| v * c).collect();
        let st: Vec<f64> = truth.iter().map(|v| v * c).collect();
        let b = compute_metrics(&sp, &st).unwrap().rfe.unwrap();
        prop_assert!(close(a, b, 1e-12));
    }

    #[test]
    fn elementwise_flow_is_relu_of_product(rows in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 1..5)) {
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let out = elementwise_flow(&refs, Activation::Relu).unwrap();
        for k in 0..3 {
            let prod: f64 = rows.iter().map(|r| r[k]).product();
            prop_assert_eq!(out[k], prod.max(0.0));
        }
    }
}

#[test]
fn reduced_models_equal_their_single_term() {
    let shape = [4, 5, 3];
    let cp_only = JuliaModel::initialize(&shape, 3, 0, Activation::Relu, 4).unwrap();
    let head_only = JuliaModel::initialize(&shape, 0, 2, Activation::Relu, 4).unwrap();
    for seed in 0..20 {
        let idx = index_in(&shape, seed);
        assert_eq!(cp_only.predict(&idx).unwrap(), cp_only.cp.predict(&idx).unwrap());
        assert_eq!(head_only.predict(&idx).unwrap(), head_only.head.as_ref().unwrap().predict_checked(&idx).unwrap());
    }
}

#[test]
fn minibatch_losses_sum_to_full_loss() {
    let shape = [8, 7, 6];
    let t: SparseTensor = random_tensor(&shape, 300, &mut rng(11));
    let model = JuliaModel::initialize(&shape, 2, 3, Activation::Relu, 11).unwrap();
    let all: Vec<usize> = (0..t.nnz()).collect();
    let full = model.loss_at(&t, &all);
    for batch in [1, 7, 64, 128, 299, 1024] {
        let summed: f64 = all.chunks(batch).map(|c| model.loss_at(&t, c)).sum();
        assert!((full - summed).abs() <= 1e-9, "batch {batch}: {full} vs {summed}");
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    for (r, f) in [(2, 3), (3, 0), (0, 2)] {
        let model = JuliaModel::initialize(&[4, 3, 5], r, f, Activation::Relu, 42).unwrap();
        let back = JuliaModel::from_checkpoint_json(&model.to_checkpoint_json().unwrap()).unwrap();
        assert_eq!(back, model);
        let bits = |m: &JuliaModel| m.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&model));
    }
}
