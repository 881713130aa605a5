mod common;

use julia_core::synth::{generate, ground_truth_cp, identifiability_experiment};
use julia_core::train::{ao_initialize, naive_budget, train_with_restarts_using, EarlyStop, InitStrategy};
use julia_core::{
    compute_metrics, cp_warmstart, split_dataset, train, Activation, CpFactors, JuliaModel, NonlinearParams,
    SparseTensor, SyntheticSpec, TrainConfig,
};

fn full_tensor(cp: &CpFactors) -> SparseTensor {
    let shape = cp.shape();
    let mut entries = Vec::new();
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let idx = vec![i, j, k];
                let v = cp.predict(&idx).unwrap();
                entries.push((idx, v));
            }
        }
    }
    SparseTensor::from_entries(shape, &entries).unwrap()
}

#[test]
fn warm_start_recovers_a_fully_observed_rank_two_tensor() {
    let truth = ground_truth_cp(&[4, 4, 4], 2, 5);
    let data = full_tensor(&truth);
    let split = split_dataset(&data, 0.8, 0.0, 5).unwrap();
    let train_part = data.select(&split.train);
    let cfg = TrainConfig { lr_linear: 0.01, ..TrainConfig::default() };
    let fit = cp_warmstart(&train_part, 2, 6000, &cfg).unwrap();
    let pred: Vec<f64> = split.test.iter().map(|&p| fit.predict(data.index(p)).unwrap()).collect();
    let held: Vec<f64> = split.test.iter().map(|&p| data.value(p)).collect();
    let rfe = compute_metrics(&pred, &held).unwrap().rfe.unwrap();
    assert!(rfe <= 1e-3, "held-out RFE {rfe}");

    assert_eq!(cp_warmstart(&train_part, 2, 3, &cfg).unwrap(), cp_warmstart(&train_part, 2, 3, &cfg).unwrap());
    assert!(cp_warmstart(&train_part, 2, 0, &cfg).is_err());
    assert!(cp_warmstart(&train_part, 0, 3, &cfg).is_err());
}

#[test]
fn ao_with_zero_rounds_only_warm_starts() {
    let data = generate(&SyntheticSpec::new(vec![6, 6, 6], 1, 2, 0.3, 2)).unwrap().tensor;
    let split = split_dataset(&data, 0.8, 0.1, 2).unwrap();
    let cfg = TrainConfig { ao_max_iters: 0, seed: 9, ..TrainConfig::default() };
    let init = JuliaModel::initialize(data.shape(), 1, 2, Activation::Relu, 9).unwrap();
    let out = ao_initialize(init.clone(), &data, &split, &cfg).unwrap();
    assert_eq!(out.head, init.head);
    let warm = cp_warmstart(&data.select(&split.train), 1, cfg.warmstart_epochs, &cfg).unwrap();
    assert_eq!(out.cp, warm);
}

#[test]
fn cp_only_pipeline_recovers_multilinear_truth() {
    let spec = SyntheticSpec::new(vec![8, 8, 8], 2, 0, 0.3, 3);
    let cfg = TrainConfig { batch_size: 32, seed: 3, ..TrainConfig::default() };
    let rep = identifiability_experiment(&spec, 2, 0, &cfg).unwrap();
    let rfe = rep.test.rfe.unwrap();
    assert!(rfe <= 1e-3, "test RFE {rfe}");
}

#[test]
fn head_only_pipeline_completes() {
    let spec = SyntheticSpec::new(vec![6, 6, 6], 0, 3, 0.4, 1);
    let cfg = TrainConfig { max_epochs: 30, seed: 1, ..TrainConfig::default() };
    let rep = identifiability_experiment(&spec, 0, 3, &cfg).unwrap();
    assert!(rep.test.rmse.is_finite() && rep.test.mae.is_finite());
    assert!(rep.alignment.is_none());
}

#[test]
fn first_successful_attempt_is_returned() {
    let data = generate(&SyntheticSpec::new(vec![8, 8, 8], 2, 0, 0.5, 4)).unwrap().tensor;
    let split = split_dataset(&data, 0.8, 0.2, 4).unwrap();
    let cfg = TrainConfig { batch_size: 16, seed: 17, ..TrainConfig::default() };
    let (_, rep) = train_with_restarts_using(&data, &split, &cfg, |s| {
        JuliaModel::initialize(data.shape(), 2, 0, Activation::Relu, s)
    })
    .unwrap();
    assert!(rep.success);
    assert_eq!(rep.restarts, 0);
    assert_eq!(rep.attempt_seeds, vec![17]);
}

#[test]
fn hopeless_model_exhausts_restart_budget() {
    // a ReLU head with a negative output bias and no weights is stuck at 0: no gradient flows
    let data = generate(&SyntheticSpec::new(vec![5, 5, 5], 1, 0, 0.2, 6)).unwrap().tensor;
    let split = split_dataset(&data, 0.8, 0.2, 6).unwrap();
    let cfg = TrainConfig { max_restarts: 3, max_epochs: 5, seed: 2, ..TrainConfig::default() };
    let (_, rep) = train_with_restarts_using(&data, &split, &cfg, |_| {
        let mut head = NonlinearParams::zeros(data.shape(), 2, Activation::Relu);
        head.out_bias = -1.0;
        JuliaModel::new(data.shape().to_vec(), CpFactors::zeros(data.shape(), 0), Some(head))
    })
    .unwrap();
    assert!(!rep.success);
    assert_eq!(rep.attempt_seeds.len(), 4);
    assert_eq!(rep.attempt_seeds, vec![2, 1_000_005, 2_000_008, 3_000_011]);
    assert!(rep.attempt_rfe.iter().all(|r| *r == Some(1.0)));
}

#[test]
fn early_stop_fires_on_stable_loss() {
    let mut stop = EarlyStop::new(1e-4, 1);
    assert!(!stop.update(10.0));
    assert!(!stop.update(5.0));
    assert!(stop.update(5.0001));
    let mut patient = EarlyStop::new(1e-4, 2);
    assert!(!patient.update(1.0));
    assert!(!patient.update(1.0));
    assert!(patient.update(1.0));
}

#[test]
fn naive_budget_matches_ao_epochs() {
    let cfg = TrainConfig::default();
    assert_eq!(naive_budget(&cfg, true, true), 5 + 40);
    assert_eq!(naive_budget(&cfg, false, true), 20);
    assert_eq!(naive_budget(&cfg, true, false), 5);

    let data = generate(&SyntheticSpec::new(vec![6, 6, 6], 1, 2, 0.3, 8)).unwrap().tensor;
    let split = split_dataset(&data, 0.8, 0.1, 8).unwrap();
    let cfg = TrainConfig { init: InitStrategy::Naive, max_epochs: 3, ..TrainConfig::default() };
    let model = JuliaModel::initialize(data.shape(), 1, 2, Activation::Relu, 0).unwrap();
    let (_, rep) = train(model, &data, &split, &cfg).unwrap();
    let naive = rep.history.iter().filter(|r| r.phase.as_str() == "naive").count();
    assert_eq!(naive, 45);
}

#[test]
fn history_losses_are_finite() {
    let data = generate(&SyntheticSpec::new(vec![7, 6, 5], 2, 2, 0.5, 12)).unwrap().tensor;
    let split = split_dataset(&data, 0.8, 0.1, 12).unwrap();
    let cfg = TrainConfig { max_epochs: 20, ..TrainConfig::default() };
    let model = JuliaModel::initialize(data.shape(), 2, 2, Activation::Relu, 0).unwrap();
    let (_, rep) = train(model, &data, &split, &cfg).unwrap();
    assert!(rep.history.iter().all(|r| r.train_loss.is_finite()));
    let csv = rep.history_csv();
    assert!(csv.starts_with("epoch,phase,train_loss,val_rmse,seconds\n"));
    assert_eq!(csv.lines().count(), rep.epochs() + 1);
}
