//! Ground-truth mixtures of multi-linear and nonlinear components.
//!
//! The CP part has Gaussian factors with unit-norm columns; component weights,
//! log-uniform in `[0.5, 2]`, live in mode 0. Draws with any pair of components
//! more congruent than 0.9 are rejected. The nonlinear part is a randomly
//! initialized head of the same architecture the model fits.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::align::{align_components, congruence_matrix, AlignmentReport};
use crate::cp::CpFactors;
use crate::error::{Error, Result};
use crate::head::{Activation, NonlinearParams};
use crate::matrix::{norm, Matrix};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::JuliaModel;
use crate::rng::{derive_rng, Stream};
use crate::tensor::{split_dataset, SparseTensor};
use crate::train::{train_with_restarts, TrainConfig, TrainReport};

pub const MAX_PAIR_CONGRUENCE: f64 = 0.9;
const MAX_RESAMPLES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub shape: Vec<usize>,
    pub r_true: usize,
    pub f_true: usize,
    pub missing_rate: f64,
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default)]
    pub activation: Activation,
}

impl SyntheticSpec {
    pub fn new(shape: Vec<usize>, r_true: usize, f_true: usize, missing_rate: f64, seed: u64) -> Self {
        Self { shape, r_true, f_true, missing_rate, noise_std: 0.0, seed, activation: Activation::Relu }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.is_empty() || self.shape.contains(&0) {
            return Err(Error::invalid(format!("invalid shape {:?}", self.shape)));
        }
        if self.r_true + self.f_true == 0 {
            return Err(Error::invalid("synthetic tensor needs R_true + F_true >= 1"));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::invalid(format!("missing rate must lie in [0, 1), got {}", self.missing_rate)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise std must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn observed_count(&self) -> usize {
        ((1.0 - self.missing_rate) * self.cells() as f64).round() as usize
    }
}

pub struct SyntheticData {
    pub tensor: SparseTensor,
    /// CP part and head of the generating model.
    pub truth: JuliaModel,
}

fn random_unit_cp<R: Rng + ?Sized>(shape: &[usize], rank: usize, rng: &mut R) -> CpFactors {
    let mut factors: Vec<Matrix> = shape
        .iter()
        .map(|&d| {
            let data = (0..d * rank).map(|_| StandardNormal.sample(rng)).collect();
            Matrix::from_vec(d, rank, data).expect("sized")
        })
        .collect();
    for m in &mut factors {
        for r in 0..rank {
            let col = m.column(r);
            let len = norm(&col);
            let len = if len > 0.0 { len } else { 1.0 };
            m.set_column(r, &col.iter().map(|v| v / len).collect::<Vec<_>>());
        }
    }
    let (lo, hi) = (0.5_f64.ln(), 2.0_f64.ln());
    for r in 0..rank {
        let weight = rng.random_range(lo..hi).exp();
        let col: Vec<f64> = factors[0].column(r).iter().map(|v| v * weight).collect();
        factors[0].set_column(r, &col);
    }
    CpFactors::new(factors).expect("finite factors")
}

fn max_pair_congruence(cp: &CpFactors) -> f64 {
    let c = congruence_matrix(cp, cp).expect("same factors");
    let mut worst: f64 = 0.0;
    for r in 0..cp.rank() {
        for s in 0..cp.rank() {
            if r != s {
                worst = worst.max(c.get(r, s));
            }
        }
    }
    worst
}

/// Ground-truth CP factors, resampled until no two components are too congruent.
pub fn ground_truth_cp(shape: &[usize], rank: usize, seed: u64) -> CpFactors {
    let mut rng = derive_rng(seed, Stream::SynthCp);
    let mut cp = random_unit_cp(shape, rank, &mut rng);
    for _ in 0..MAX_RESAMPLES {
        if max_pair_congruence(&cp) <= MAX_PAIR_CONGRUENCE {
            return cp;
        }
        cp = random_unit_cp(shape, rank, &mut rng);
    }
    log::warn!("could not draw well-separated CP components after {MAX_RESAMPLES} tries");
    cp
}

/// Row-major decoding of a cell rank into an index tuple.
fn unravel(mut rank: usize, shape: &[usize], out: &mut [usize]) {
    for (slot, &d) in out.iter_mut().zip(shape).rev() {
        *slot = rank % d;
        rank /= d;
    }
}

/// Samples the observed cells and evaluates `g + f` (plus noise) on them.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let shape = &spec.shape;
    let n_obs = spec.observed_count();
    if n_obs == 0 {
        return Err(Error::invalid("missing rate leaves no observed entries"));
    }
    let dof = spec.r_true * shape.iter().sum::<usize>();
    if n_obs < dof {
        log::warn!(
            "{n_obs} observed entries for {dof} multi-linear degrees of freedom; the problem is under-determined"
        );
    }

    let cp = ground_truth_cp(shape, spec.r_true, spec.seed);
    let head = (spec.f_true > 0).then(|| {
        NonlinearParams::random(shape, spec.f_true, spec.activation, &mut derive_rng(spec.seed, Stream::SynthHead))
    });
    let truth = JuliaModel::new(shape.clone(), cp, head)?;

    let mut cells = index::sample(&mut derive_rng(spec.seed, Stream::SynthMask), spec.cells(), n_obs).into_vec();
    cells.sort_unstable();

    let n = shape.len();
    let mut indices = vec![0usize; n_obs * n];
    for (k, &cell) in cells.iter().enumerate() {
        unravel(cell, shape, &mut indices[k * n..(k + 1) * n]);
    }
    let mut values: Vec<f64> = indices.chunks_exact(n).map(|idx| truth.predict(idx).expect("in bounds")).collect();
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("validated");
        let mut rng = derive_rng(spec.seed, Stream::SynthNoise);
        for v in &mut values {
            *v += noise.sample(&mut rng);
        }
    }
    let tensor = SparseTensor::new(shape.clone(), indices, values)?;
    Ok(SyntheticData { tensor, truth })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentifiabilityReport {
    pub test: MetricsReport,
    /// Present when the fitted and true multi-linear ranks agree and are nonzero.
    pub alignment: Option<AlignmentReport>,
    pub train: TrainReport,
}

/// Generates `spec`, splits observed entries 80/20 (10% of the training part
/// held out for validation), fits JULIA `fit_r/fit_f` and scores test error and
/// recovery of the true CP components.
pub fn identifiability_experiment(
    spec: &SyntheticSpec,
    fit_r: usize,
    fit_f: usize,
    cfg: &TrainConfig,
) -> Result<IdentifiabilityReport> {
    let data = generate(spec)?;
    let split = split_dataset(&data.tensor, 0.8, 0.1, spec.seed)?;
    let (model, train) = train_with_restarts(&data.tensor, &split, fit_r, fit_f, spec.activation, cfg)?;
    let pred = model.predictions_at(&data.tensor, &split.test);
    let truth: Vec<f64> = split.test.iter().map(|&p| data.tensor.value(p)).collect();
    let test = compute_metrics(&pred, &truth)?;
    let alignment =
        if fit_r == spec.r_true && fit_r > 0 { Some(align_components(&model.cp, &data.truth.cp)?) } else { None };
    Ok(IdentifiabilityReport { test, alignment, train })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_observation_of_small_tensor() {
        let spec = SyntheticSpec::new(vec![2, 2, 2], 1, 2, 0.0, 3);
        let data = generate(&spec).unwrap();
        assert_eq!(data.tensor.nnz(), 8);
        let positions: Vec<usize> = (0..8).collect();
        assert_eq!(data.truth.loss_at(&data.tensor, &positions), 0.0);
    }

    #[test]
    fn observed_values_are_exact_model_values() {
        let spec = SyntheticSpec::new(vec![6, 5, 4], 2, 3, 0.5, 8);
        let data = generate(&spec).unwrap();
        assert_eq!(data.tensor.nnz(), 60);
        for (idx, v) in data.tensor.entries() {
            let g = data.truth.cp.predict(idx).unwrap();
            let f = data.truth.head.as_ref().unwrap().predict_checked(idx).unwrap();
            assert_eq!(v, g + f);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let spec = SyntheticSpec::new(vec![7, 6, 5], 2, 2, 0.7, 1);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.tensor, b.tensor);
        assert_eq!(a.truth, b.truth);
        let c = generate(&SyntheticSpec { seed: 2, ..spec }).unwrap();
        assert_ne!(a.tensor, c.tensor);
    }

    #[test]
    fn ground_truth_columns_and_weights() {
        let cp = ground_truth_cp(&[20, 15, 10], 3, 4);
        for n in 0..3 {
            for r in 0..3 {
                let len = norm(&cp.factor(n).column(r));
                if n == 0 {
                    assert!((0.5..=2.0).contains(&len), "weight {len}");
                } else {
                    assert!((len - 1.0).abs() < 1e-12);
                }
            }
        }
        assert!(max_pair_congruence(&cp) <= MAX_PAIR_CONGRUENCE);
    }

    #[test]
    fn unravel_is_row_major() {
        let mut out = [0; 3];
        unravel(1 * 20 + 2 * 5 + 3, &[2, 4, 5], &mut out);
        assert_eq!(out, [1, 2, 3]);
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(generate(&SyntheticSpec::new(vec![2, 2], 0, 0, 0.5, 0)).is_err());
        assert!(generate(&SyntheticSpec::new(vec![2, 2], 1, 0, 1.0, 0)).is_err());
        assert!(generate(&SyntheticSpec::new(vec![2, 2], 1, 0, 0.99, 0)).is_err());
        let noisy = SyntheticSpec { noise_std: -1.0, ..SyntheticSpec::new(vec![2, 2], 1, 0, 0.5, 0) };
        assert!(generate(&noisy).is_err());
    }
}
