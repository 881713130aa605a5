//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use julia_core::optim::AdamState;
use julia_core::rng::{derive_rng, Stream};
use julia_core::train::EarlyStop;
use julia_core::{Activation, CpFactors, DatasetSplit, JuliaModel, NonlinearParams, SparseTensor, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn relu(x: f64, act: Activation) -> f64 {
    match act {
        Activation::Relu => x.max(0.0),
        Activation::Identity => x,
    }
}

/// Straight-line evaluation of the head from its public fields.
pub fn head_oracle(p: &NonlinearParams, index: &[usize]) -> f64 {
    let f = p.out_w.len();
    let act = p.activation;
    let rows: Vec<&[f64]> = p.embeddings.iter().zip(index).map(|(m, &i)| m.row(i)).collect();
    let concat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();

    let mut tilde = vec![0.0; f];
    for k in 0..f {
        let mut prod = 1.0;
        for r in &rows {
            prod *= r[k];
        }
        tilde[k] = relu(prod, act);
    }
    let mut h1 = vec![0.0; f * f];
    for j in 0..f * f {
        let mut s = p.mlp_b1[j];
        for (i, x) in concat.iter().enumerate() {
            s += p.mlp_w1.get(i, j) * x;
        }
        h1[j] = relu(s, act);
    }
    let mut breve = vec![0.0; f];
    for k in 0..f {
        let mut s = p.mlp_b2[k];
        for (j, h) in h1.iter().enumerate() {
            s += p.mlp_w2.get(j, k) * h;
        }
        breve[k] = relu(s, act);
    }
    let mut out = p.out_bias;
    for k in 0..f {
        let z = p.gate_z[k];
        out += p.out_w[k] * (z * tilde[k] + (1.0 - z) * breve[k]);
    }
    relu(out, act)
}

pub fn cp_oracle(cp: &CpFactors, index: &[usize]) -> f64 {
    (0..cp.rank()).map(|r| (0..cp.order()).map(|n| cp.factor(n).get(index[n], r)).product::<f64>()).sum()
}

/// A tensor with `nnz` distinct random cells and standard normal values.
pub fn random_tensor(shape: &[usize], nnz: usize, rng: &mut impl Rng) -> SparseTensor {
    let cells: usize = shape.iter().product();
    let mut picked: Vec<usize> = (0..cells).collect();
    picked.shuffle(rng);
    picked.truncate(nnz.min(cells));
    picked.sort_unstable();
    let entries: Vec<(Vec<usize>, f64)> = picked
        .iter()
        .map(|&c| {
            let mut idx = vec![0; shape.len()];
            let mut rest = c;
            for (slot, &d) in idx.iter_mut().zip(shape).rev() {
                *slot = rest % d;
                rest /= d;
            }
            (idx, rng.random_range(-1.0..1.0))
        })
        .collect();
    SparseTensor::from_entries(shape.to_vec(), &entries).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sum_sq(data: &SparseTensor, positions: &[usize], predict: &dyn Fn(&[usize]) -> f64) -> f64 {
    positions.iter().map(|&p| (predict(data.index(p)) - data.value(p)).powi(2)).sum()
}

/// One shuffled mini-batch pass of Adam on a flat parameter vector.
fn epoch(
    params: &mut Vec<f64>,
    state: &mut AdamState,
    order: &mut [usize],
    shuffle: &mut ChaCha8Rng,
    cfg: &TrainConfig,
    lr: f64,
    batch_grad: &dyn Fn(&[f64], &[usize], f64) -> Vec<f64>,
) {
    order.shuffle(shuffle);
    let n = order.len() as f64;
    for batch in order.chunks(cfg.batch_size) {
        let g = batch_grad(params, batch, n / batch.len() as f64);
        state.step("block", params, &g, lr).unwrap();
    }
}

/// Plain CP completion: warm start, then refinement with fresh Adam state and
/// validation early stopping. Same seed streams and schedule as the full pipeline.
pub fn standalone_cp(data: &SparseTensor, split: &DatasetSplit, rank: usize, cfg: &TrainConfig) -> CpFactors {
    let shape = data.shape().to_vec();
    let mut cp = CpFactors::initialize(&shape, rank, cfg.seed);
    let mut shuffle = derive_rng(cfg.seed, Stream::Shuffle);
    let mut order = split.train.clone();
    let mut params = cp.flatten();
    let grad = |flat: &[f64], batch: &[usize], scale: f64| {
        let mut m = CpFactors::zeros(&shape, rank);
        m.unflatten(flat).unwrap();
        let pairs: Vec<(&[usize], f64)> =
            batch.iter().map(|&p| (data.index(p), scale * (cp_oracle(&m, data.index(p)) - data.value(p)))).collect();
        m.gradient(pairs).unwrap().flatten()
    };

    let mut state = AdamState::new(params.len());
    for _ in 0..cfg.warmstart_epochs {
        epoch(&mut params, &mut state, &mut order, &mut shuffle, cfg, cfg.lr_linear, &grad);
    }
    let mut state = AdamState::new(params.len());
    let mut stop = EarlyStop::new(cfg.early_stop_rel_tol, cfg.patience);
    for _ in 0..cfg.max_epochs {
        epoch(&mut params, &mut state, &mut order, &mut shuffle, cfg, cfg.lr_linear, &grad);
        cp.unflatten(&params).unwrap();
        if stop.update(sum_sq(data, &split.val, &|i| cp_oracle(&cp, i))) {
            break;
        }
    }
    cp.unflatten(&params).unwrap();
    cp
}

/// The head trained on its own: head-only rounds under the AO stopping rule,
/// then refinement with fresh Adam state.
pub fn standalone_head(
    data: &SparseTensor,
    split: &DatasetSplit,
    rank: usize,
    activation: Activation,
    cfg: &TrainConfig,
) -> NonlinearParams {
    let shape = data.shape().to_vec();
    let mut head = NonlinearParams::initialize(&shape, rank, activation, cfg.seed);
    let mut shuffle = derive_rng(cfg.seed, Stream::Shuffle);
    let mut order = split.train.clone();
    let mut params = julia_core::NonlinearHead::flatten(&head);
    let template = head.clone();
    let grad = |flat: &[f64], batch: &[usize], scale: f64| {
        let mut m = template.clone();
        julia_core::NonlinearHead::unflatten(&mut m, flat).unwrap();
        let pairs: Vec<(&[usize], f64)> =
            batch.iter().map(|&p| (data.index(p), scale * (head_oracle(&m, data.index(p)) - data.value(p)))).collect();
        julia_core::NonlinearHead::flatten(&m.gradient(pairs).unwrap())
    };
    let val_loss = |params: &[f64]| {
        let mut m = template.clone();
        julia_core::NonlinearHead::unflatten(&mut m, params).unwrap();
        sum_sq(data, &split.val, &|i| head_oracle(&m, i))
    };

    let mut state = AdamState::new(params.len());
    let mut stop = EarlyStop::new(cfg.early_stop_rel_tol, cfg.patience);
    for _ in 0..cfg.ao_max_iters {
        for _ in 0..cfg.ao_epochs_per_block {
            epoch(&mut params, &mut state, &mut order, &mut shuffle, cfg, cfg.lr_nonlinear, &grad);
        }
        if stop.update(val_loss(&params)) {
            break;
        }
    }
    let mut state = AdamState::new(params.len());
    let mut stop = EarlyStop::new(cfg.early_stop_rel_tol, cfg.patience);
    for _ in 0..cfg.max_epochs {
        epoch(&mut params, &mut state, &mut order, &mut shuffle, cfg, cfg.lr_nonlinear, &grad);
        if stop.update(val_loss(&params)) {
            break;
        }
    }
    julia_core::NonlinearHead::unflatten(&mut head, &params).unwrap();
    head
}

pub const STEP: f64 = 1e-6;
pub const KINK: f64 = 1e-4;

fn full_loss(model: &JuliaModel, data: &SparseTensor) -> f64 {
    model.loss(data.entries()).unwrap()
}

fn preacts(model: &JuliaModel, data: &SparseTensor) -> Vec<f64> {
    match &model.head {
        Some(h) if h.activation == Activation::Relu => {
            data.entries().flat_map(|(idx, _)| h.preactivations(idx)).collect()
        }
        _ => Vec::new(),
    }
}

/// Central-difference check of the joint gradient. Coordinates feeding a ReLU
/// site within the kink band are skipped. Returns the number of coordinates
/// checked and the worst relative error among them.
pub fn grad_check(model: &JuliaModel, data: &SparseTensor) -> (usize, f64) {
    let analytic = model.loss_gradient(data).unwrap();
    let theta = model.flatten();
    let base = preacts(model, data);
    let mut probe = model.clone();
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for c in 0..theta.len() {
        let mut eval = |delta: f64| {
            let mut t = theta.clone();
            t[c] += delta;
            probe.unflatten(&t).unwrap();
            (full_loss(&probe, data), preacts(&probe, data))
        };
        let (lp, pp) = eval(STEP);
        let (lm, pm) = eval(-STEP);
        let near_kink = base.iter().zip(pp.iter().zip(&pm)).any(|(&b, (&p, &m))| b.abs() < KINK && (p != b || m != b));
        if near_kink {
            continue;
        }
        let numeric = (lp - lm) / (2.0 * STEP);
        let a = analytic[c];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
        checked += 1;
    }
    (checked, worst)
}

pub fn spread_model(shape: &[usize], r: usize, f: usize, act: Activation, seed: u64) -> JuliaModel {
    let mut model = JuliaModel::initialize(shape, r, f, act, seed).unwrap();
    // move away from the small-init regime so every term matters
    let mut g = rng(seed ^ 0x5eed);
    let flat: Vec<f64> = model.flatten().iter().map(|_| g.random_range(-0.8..0.8)).collect();
    model.unflatten(&flat).unwrap();
    model
}
