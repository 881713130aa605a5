//! The multi-linear (CP) term: `g(i_1..i_N) = Σ_r Π_n A_n[i_n, r]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::head::is_permutation;
use crate::matrix::Matrix;
use crate::rng::{derive_rng, Stream};
use crate::tensor::{check_index, SparseTensor};
use crate::train::{self, TrainConfig};

pub const INIT_STD: f64 = 0.1;

/// N factor matrices `A_n` of shape `I_n × R`.
#[derive(Clone, Debug, PartialEq)]
pub struct CpFactors {
    factors: Vec<Matrix>,
    rank: usize,
}

impl CpFactors {
    pub fn new(factors: Vec<Matrix>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::dims("CP model needs at least one factor matrix"));
        }
        let rank = factors[0].cols();
        if factors.iter().any(|m| m.cols() != rank) {
            return Err(Error::dims("factor matrices disagree on the rank"));
        }
        if factors.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("factor matrices contain non-finite values"));
        }
        Ok(Self { factors, rank })
    }

    pub fn zeros(shape: &[usize], rank: usize) -> Self {
        Self { factors: shape.iter().map(|&d| Matrix::zeros(d, rank)).collect(), rank }
    }

    pub fn random<R: Rng + ?Sized>(shape: &[usize], rank: usize, std: f64, rng: &mut R) -> Self {
        Self { factors: shape.iter().map(|&d| Matrix::random_normal(d, rank, std, rng)).collect(), rank }
    }

    /// `N(0, 0.1²)` factors drawn from the CP stream of `seed`.
    pub fn initialize(shape: &[usize], rank: usize, seed: u64) -> Self {
        Self::random(shape, rank, INIT_STD, &mut derive_rng(seed, Stream::CpInit))
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.factors.iter().map(Matrix::rows).collect()
    }

    pub fn factor(&self, n: usize) -> &Matrix {
        &self.factors[n]
    }

    pub fn factor_mut(&mut self, n: usize) -> &mut Matrix {
        &mut self.factors[n]
    }

    pub fn factors(&self) -> &[Matrix] {
        &self.factors
    }

    /// Checked prediction.
    pub fn predict(&self, index: &[usize]) -> Result<f64> {
        check_index(index, &self.shape())?;
        Ok(self.eval(index))
    }

    #[inline]
    pub(crate) fn eval(&self, index: &[usize]) -> f64 {
        let mut total = 0.0;
        for r in 0..self.rank {
            let mut p = 1.0;
            for (m, &i) in self.factors.iter().zip(index) {
                p *= m.get(i, r);
            }
            total += p;
        }
        total
    }

    pub fn num_params(&self) -> usize {
        self.factors.iter().map(|m| m.rows() * m.cols()).sum()
    }

    /// Concatenation of the factor matrices, each row-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.factors.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dims(format!("CP model has {} parameters, got {}", self.num_params(), flat.len())));
        }
        let mut at = 0;
        for m in &mut self.factors {
            let len = m.rows() * m.cols();
            m.as_mut_slice().copy_from_slice(&flat[at..at + len]);
            at += len;
        }
        Ok(())
    }

    /// Adds `upstream * ∂g(index)/∂A` into the flat gradient `grad`.
    #[inline]
    pub(crate) fn accumulate_gradient(&self, index: &[usize], upstream: f64, grad: &mut [f64]) {
        let n_modes = self.factors.len();
        let mut offset = 0;
        for n in 0..n_modes {
            let base = offset + index[n] * self.rank;
            for r in 0..self.rank {
                let mut others = 1.0;
                for m in 0..n_modes {
                    if m != n {
                        others *= self.factors[m].get(index[m], r);
                    }
                }
                grad[base + r] += upstream * others;
            }
            offset += self.factors[n].rows() * self.rank;
        }
    }

    /// Gradient of `Σ residual²` over `(index, residual)` pairs, in factor layout.
    pub fn gradient<'a>(&self, batch: impl IntoIterator<Item = (&'a [usize], f64)>) -> Result<CpFactors> {
        let shape = self.shape();
        let mut grad = vec![0.0; self.num_params()];
        for (index, residual) in batch {
            check_index(index, &shape)?;
            self.accumulate_gradient(index, 2.0 * residual, &mut grad);
        }
        let mut out = CpFactors::zeros(&shape, self.rank);
        out.unflatten(&grad)?;
        Ok(out)
    }

    /// New component `k` is old component `perm[k]`, in every mode.
    pub fn permute_components(&self, perm: &[usize]) -> Result<CpFactors> {
        if !is_permutation(perm, self.rank) {
            return Err(Error::invalid(format!("{perm:?} is not a permutation of 0..{}", self.rank)));
        }
        Ok(Self { factors: self.factors.iter().map(|m| m.permute_columns(perm)).collect(), rank: self.rank })
    }
}

/// Fits a rank-`rank` CP model to `train` alone for exactly `epochs` passes,
/// starting from [`CpFactors::initialize`] with `cfg.seed`.
///
/// Uses the trainer's mini-batch loop, shuffle stream and linear-block stepper.
pub fn cp_warmstart(train: &SparseTensor, rank: usize, epochs: usize, cfg: &TrainConfig) -> Result<CpFactors> {
    if rank == 0 {
        return Err(Error::invalid("warm start needs rank R >= 1"));
    }
    if epochs == 0 {
        return Err(Error::invalid("warm start needs at least one epoch"));
    }
    cfg.validate()?;
    let shape = train.shape().to_vec();
    if let Some(d) = shape.iter().find(|&&d| rank > d) {
        log::warn!("CP rank {rank} exceeds mode dimension {d}; fitting an overcomplete model");
    }
    let factors = CpFactors::initialize(&shape, rank, cfg.seed);
    train::warmstart_factors(factors, train, epochs, cfg)
}
