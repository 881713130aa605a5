//! The nonlinear term of the hybrid model.
//!
//! For an index `(i_1, ..., i_N)` the head gathers row `i_n` of each embedding
//! matrix `B_n` (width `F`) and computes
//!
//! ```text
//! b_tilde = σ(B_1[i_1] ⊙ ... ⊙ B_N[i_N])                     element-wise flow
//! b_breve = σ(W2ᵀ σ(W1ᵀ (B_1[i_1] ⊕ ... ⊕ B_N[i_N]) + b1) + b2)  MLP flow
//! b       = z ⊙ b_tilde + (1 - z) ⊙ b_breve                    gate
//! f       = σ(wᵀ b + ε)                                        output layer
//! ```
//!
//! with `W1: NF × F²`, `W2: F² × F`. The ReLU derivative at exactly zero is 0.
//!
//! Other heads can be plugged into the trainer through [`NonlinearHead`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::rng::{derive_rng, Stream};
use crate::tensor::check_index;

/// Standard deviation of the Gaussian used for embeddings and weights.
pub const INIT_STD: f64 = 0.1;
pub const INIT_GATE: f64 = 0.5;
pub const INIT_OUT_BIAS: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative at the pre-activation `x`; ReLU uses 0 at `x == 0`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::invalid(format!("unknown activation '{other}' (expected relu|identity)"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        })
    }
}

/// A nonlinear head the trainer can fit alongside the CP term.
///
/// Index arguments are assumed to be in bounds; callers check them once.
pub trait NonlinearHead: Clone + Send + Sync {
    type Scratch: Default + Send;

    fn num_params(&self) -> usize;

    fn flatten(&self) -> Vec<f64>;

    fn unflatten(&mut self, flat: &[f64]) -> Result<()>;

    fn predict_with(&self, index: &[usize], scratch: &mut Self::Scratch) -> f64;

    /// Adds `upstream * ∂f(index)/∂θ` into the flat gradient `grad`.
    fn accumulate_gradient(&self, index: &[usize], upstream: f64, grad: &mut [f64], scratch: &mut Self::Scratch);

    fn predict(&self, index: &[usize]) -> f64 {
        self.predict_with(index, &mut Self::Scratch::default())
    }
}

/// Parameters of the default head.
#[derive(Clone, Debug, PartialEq)]
pub struct NonlinearParams {
    pub embeddings: Vec<Matrix>,
    pub mlp_w1: Matrix,
    pub mlp_b1: Vec<f64>,
    pub mlp_w2: Matrix,
    pub mlp_b2: Vec<f64>,
    pub gate_z: Vec<f64>,
    pub out_w: Vec<f64>,
    pub out_bias: f64,
    pub activation: Activation,
}

impl NonlinearParams {
    /// All-zero parameters with consistent dimensions.
    pub fn zeros(shape: &[usize], rank: usize, activation: Activation) -> Self {
        let n = shape.len();
        Self {
            embeddings: shape.iter().map(|&d| Matrix::zeros(d, rank)).collect(),
            mlp_w1: Matrix::zeros(n * rank, rank * rank),
            mlp_b1: vec![0.0; rank * rank],
            mlp_w2: Matrix::zeros(rank * rank, rank),
            mlp_b2: vec![0.0; rank],
            gate_z: vec![0.0; rank],
            out_w: vec![0.0; rank],
            out_bias: 0.0,
            activation,
        }
    }

    /// Gaussian embeddings and weights, zero MLP biases, gate at 0.5, output bias 0.1.
    pub fn random<R: Rng + ?Sized>(shape: &[usize], rank: usize, activation: Activation, rng: &mut R) -> Self {
        assert!(rank >= 1, "head rank must be at least 1");
        let n = shape.len();
        let embeddings = shape.iter().map(|&d| Matrix::random_normal(d, rank, INIT_STD, rng)).collect();
        let mlp_w1 = Matrix::random_normal(n * rank, rank * rank, INIT_STD, rng);
        let mlp_w2 = Matrix::random_normal(rank * rank, rank, INIT_STD, rng);
        let out_w = Matrix::random_normal(1, rank, INIT_STD, rng).into_vec();
        Self {
            embeddings,
            mlp_w1,
            mlp_b1: vec![0.0; rank * rank],
            mlp_w2,
            mlp_b2: vec![0.0; rank],
            gate_z: vec![INIT_GATE; rank],
            out_w,
            out_bias: INIT_OUT_BIAS,
            activation,
        }
    }

    /// Random initialization drawn from the head stream of `seed`.
    pub fn initialize(shape: &[usize], rank: usize, activation: Activation, seed: u64) -> Self {
        Self::random(shape, rank, activation, &mut derive_rng(seed, Stream::HeadInit))
    }

    pub fn rank(&self) -> usize {
        self.gate_z.len()
    }

    pub fn order(&self) -> usize {
        self.embeddings.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.embeddings.iter().map(Matrix::rows).collect()
    }

    /// Checks every dimension against `N` and `F` and that all values are finite.
    pub fn validate(&self) -> Result<()> {
        let f = self.rank();
        let n = self.order();
        if f == 0 {
            return Err(Error::dims("head rank F must be at least 1"));
        }
        if n == 0 {
            return Err(Error::dims("head needs at least one embedding matrix"));
        }
        if let Some(m) = self.embeddings.iter().find(|m| m.cols() != f) {
            return Err(Error::dims(format!("embedding has {} columns, expected F = {f}", m.cols())));
        }
        let expect = |name: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(Error::dims(format!("{name} is {}x{}, expected {}x{}", got.0, got.1, want.0, want.1)))
            }
        };
        expect("mlp_w1", (self.mlp_w1.rows(), self.mlp_w1.cols()), (n * f, f * f))?;
        expect("mlp_b1", (self.mlp_b1.len(), 1), (f * f, 1))?;
        expect("mlp_w2", (self.mlp_w2.rows(), self.mlp_w2.cols()), (f * f, f))?;
        expect("mlp_b2", (self.mlp_b2.len(), 1), (f, 1))?;
        expect("out_w", (self.out_w.len(), 1), (f, 1))?;
        if !self.flatten_ref().all(|v| v.is_finite()) {
            return Err(Error::invalid("head parameters contain non-finite values"));
        }
        Ok(())
    }

    fn flatten_ref(&self) -> impl Iterator<Item = f64> + '_ {
        self.embeddings
            .iter()
            .flat_map(|m| m.as_slice().iter())
            .chain(self.mlp_w1.as_slice())
            .chain(&self.mlp_b1)
            .chain(self.mlp_w2.as_slice())
            .chain(&self.mlp_b2)
            .chain(&self.gate_z)
            .chain(&self.out_w)
            .chain(std::iter::once(&self.out_bias))
            .copied()
    }

    fn embedding_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.order());
        let mut acc = 0;
        for m in &self.embeddings {
            offsets.push(acc);
            acc += m.rows() * m.cols();
        }
        offsets
    }

    fn layout(&self) -> Layout {
        let f = self.rank();
        let n = self.order();
        let emb: usize = self.embeddings.iter().map(|m| m.rows() * m.cols()).sum();
        let w1 = emb;
        let b1 = w1 + n * f * f * f;
        let w2 = b1 + f * f;
        let b2 = w2 + f * f * f;
        let z = b2 + f;
        let w = z + f;
        let bias = w + f;
        Layout { w1, b1, w2, b2, z, w, bias, total: bias + 1 }
    }

    fn rows_at<'a>(&'a self, index: &[usize]) -> impl Iterator<Item = &'a [f64]> + 'a {
        let index = index.to_vec();
        self.embeddings.iter().zip(index).map(|(m, i)| m.row(i))
    }

    fn check_rows(&self, rows: &[&[f64]]) -> Result<()> {
        if rows.len() != self.order() {
            return Err(Error::dims(format!("{} rows for a {}-way head", rows.len(), self.order())));
        }
        if rows.iter().any(|r| r.len() != self.rank()) {
            return Err(Error::dims(format!("every row must have length F = {}", self.rank())));
        }
        Ok(())
    }

    /// Runs the forward pass into `s`, leaving every intermediate in place.
    fn forward<'a>(&self, rows: impl Iterator<Item = &'a [f64]>, s: &mut HeadScratch) -> f64 {
        let f = self.rank();
        let act = self.activation;
        s.resize(self.order(), f);

        s.prod.iter_mut().for_each(|p| *p = 1.0);
        for (n, row) in rows.enumerate() {
            s.x0[n * f..(n + 1) * f].copy_from_slice(row);
            for (p, v) in s.prod.iter_mut().zip(row) {
                *p *= v;
            }
        }
        for (bt, &p) in s.b_tilde.iter_mut().zip(&s.prod) {
            *bt = act.apply(p);
        }

        // h1 = σ(W1ᵀ x0 + b1), accumulated row by row of W1 for contiguous access
        s.h1_pre.copy_from_slice(&self.mlp_b1);
        for (i, &xi) in s.x0.iter().enumerate() {
            if xi != 0.0 {
                for (h, w) in s.h1_pre.iter_mut().zip(self.mlp_w1.row(i)) {
                    *h += xi * w;
                }
            }
        }
        for (h, &p) in s.h1.iter_mut().zip(&s.h1_pre) {
            *h = act.apply(p);
        }

        s.h2_pre.copy_from_slice(&self.mlp_b2);
        for (j, &hj) in s.h1.iter().enumerate() {
            if hj != 0.0 {
                for (h, w) in s.h2_pre.iter_mut().zip(self.mlp_w2.row(j)) {
                    *h += hj * w;
                }
            }
        }
        for (bb, &p) in s.b_breve.iter_mut().zip(&s.h2_pre) {
            *bb = act.apply(p);
        }

        for k in 0..f {
            let z = self.gate_z[k];
            s.b[k] = z * s.b_tilde[k] + (1.0 - z) * s.b_breve[k];
        }
        s.out_pre = dot(&self.out_w, &s.b) + self.out_bias;
        act.apply(s.out_pre)
    }

    /// Reverse pass for the state left by `forward`.
    fn backward(&self, index: &[usize], upstream: f64, grad: &mut [f64], s: &mut HeadScratch) {
        let f = self.rank();
        let n_modes = self.order();
        let act = self.activation;
        let lay = self.layout();

        let d_out = upstream * act.derivative(s.out_pre);
        if d_out == 0.0 {
            return;
        }
        grad[lay.bias] += d_out;
        for k in 0..f {
            grad[lay.w + k] += d_out * s.b[k];
            let d_b = d_out * self.out_w[k];
            grad[lay.z + k] += d_b * (s.b_tilde[k] - s.b_breve[k]);
            s.d_prod[k] = d_b * self.gate_z[k] * act.derivative(s.prod[k]);
            s.d_h2[k] = d_b * (1.0 - self.gate_z[k]) * act.derivative(s.h2_pre[k]);
        }

        // second MLP layer
        for (j, &hj) in s.h1.iter().enumerate() {
            let w2_row = self.mlp_w2.row(j);
            let g_row = &mut grad[lay.w2 + j * f..lay.w2 + (j + 1) * f];
            let mut d_h1 = 0.0;
            for k in 0..f {
                g_row[k] += hj * s.d_h2[k];
                d_h1 += w2_row[k] * s.d_h2[k];
            }
            s.d_h1[j] = d_h1 * act.derivative(s.h1_pre[j]);
        }
        for k in 0..f {
            grad[lay.b2 + k] += s.d_h2[k];
        }

        // first MLP layer
        let hidden = f * f;
        for j in 0..hidden {
            grad[lay.b1 + j] += s.d_h1[j];
        }
        for (i, &xi) in s.x0.iter().enumerate() {
            let w1_row = self.mlp_w1.row(i);
            let g_row = &mut grad[lay.w1 + i * hidden..lay.w1 + (i + 1) * hidden];
            let mut d_x = 0.0;
            for j in 0..hidden {
                g_row[j] += xi * s.d_h1[j];
                d_x += w1_row[j] * s.d_h1[j];
            }
            s.d_x0[i] = d_x;
        }

        // embedding rows: MLP path plus the element-wise product path
        let offsets = self.embedding_offsets();
        for n in 0..n_modes {
            let base = offsets[n] + index[n] * f;
            for k in 0..f {
                let mut others = 1.0;
                for m in 0..n_modes {
                    if m != n {
                        others *= s.x0[m * f + k];
                    }
                }
                grad[base + k] += s.d_x0[n * f + k] + s.d_prod[k] * others;
            }
        }
    }

    /// Output for explicit rows (one per mode, each of length F).
    pub fn predict_rows(&self, rows: &[&[f64]]) -> Result<f64> {
        self.check_rows(rows)?;
        Ok(self.forward(rows.iter().copied(), &mut HeadScratch::default()))
    }

    /// Output at a tensor index, with bounds checking.
    pub fn predict_checked(&self, index: &[usize]) -> Result<f64> {
        check_index(index, &self.shape())?;
        Ok(self.predict(index))
    }

    /// Parameter-shaped gradient of `Σ residual²` over a batch of `(index, residual)` pairs.
    pub fn gradient<'a>(&self, batch: impl IntoIterator<Item = (&'a [usize], f64)>) -> Result<NonlinearParams> {
        let shape = self.shape();
        let mut grad = vec![0.0; self.num_params()];
        let mut scratch = HeadScratch::default();
        for (index, residual) in batch {
            check_index(index, &shape)?;
            self.forward(self.rows_at(index), &mut scratch);
            self.backward(index, 2.0 * residual, &mut grad, &mut scratch);
        }
        let mut out = NonlinearParams::zeros(&shape, self.rank(), self.activation);
        out.unflatten(&grad)?;
        Ok(out)
    }

    /// Applies a permutation of the F components to every parameter tied to them.
    /// New component `k` is old component `perm[k]`.
    pub fn permute_components(&self, perm: &[usize]) -> Result<NonlinearParams> {
        let f = self.rank();
        if !is_permutation(perm, f) {
            return Err(Error::invalid(format!("{perm:?} is not a permutation of 0..{f}")));
        }
        let n = self.order();
        let row_perm: Vec<usize> = (0..n).flat_map(|m| perm.iter().map(move |&p| m * f + p)).collect();
        let pick = |v: &[f64]| perm.iter().map(|&p| v[p]).collect::<Vec<_>>();
        Ok(NonlinearParams {
            embeddings: self.embeddings.iter().map(|m| m.permute_columns(perm)).collect(),
            mlp_w1: self.mlp_w1.permute_rows(&row_perm),
            mlp_b1: self.mlp_b1.clone(),
            mlp_w2: self.mlp_w2.permute_columns(perm),
            mlp_b2: pick(&self.mlp_b2),
            gate_z: pick(&self.gate_z),
            out_w: pick(&self.out_w),
            out_bias: self.out_bias,
            activation: self.activation,
        })
    }

    /// Pre-activations at every ReLU site for `index`: the element-wise
    /// product, both MLP layers and the output layer.
    pub fn preactivations(&self, index: &[usize]) -> Vec<f64> {
        let mut s = HeadScratch::default();
        self.forward(self.rows_at(index), &mut s);
        let mut out = s.prod.clone();
        out.extend_from_slice(&s.h1_pre);
        out.extend_from_slice(&s.h2_pre);
        out.push(s.out_pre);
        out
    }
}

pub(crate) fn is_permutation(perm: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    perm.len() == n && perm.iter().all(|&p| p < n && !std::mem::replace(&mut seen[p], true))
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    z: usize,
    w: usize,
    bias: usize,
    total: usize,
}

/// Forward activations and backward buffers reused across entries.
#[derive(Default, Debug)]
pub struct HeadScratch {
    x0: Vec<f64>,
    prod: Vec<f64>,
    b_tilde: Vec<f64>,
    h1_pre: Vec<f64>,
    h1: Vec<f64>,
    h2_pre: Vec<f64>,
    b_breve: Vec<f64>,
    b: Vec<f64>,
    out_pre: f64,
    d_prod: Vec<f64>,
    d_h2: Vec<f64>,
    d_h1: Vec<f64>,
    d_x0: Vec<f64>,
}

impl HeadScratch {
    fn resize(&mut self, n: usize, f: usize) {
        if self.prod.len() == f && self.x0.len() == n * f {
            return;
        }
        self.x0 = vec![0.0; n * f];
        self.d_x0 = vec![0.0; n * f];
        for v in [&mut self.prod, &mut self.b_tilde, &mut self.h2_pre, &mut self.b_breve, &mut self.b] {
            *v = vec![0.0; f];
        }
        self.d_prod = vec![0.0; f];
        self.d_h2 = vec![0.0; f];
        self.h1_pre = vec![0.0; f * f];
        self.h1 = vec![0.0; f * f];
        self.d_h1 = vec![0.0; f * f];
    }
}

impl NonlinearHead for NonlinearParams {
    type Scratch = HeadScratch;

    fn num_params(&self) -> usize {
        self.layout().total
    }

    fn flatten(&self) -> Vec<f64> {
        self.flatten_ref().collect()
    }

    fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        let lay = self.layout();
        if flat.len() != lay.total {
            return Err(Error::dims(format!("head has {} parameters, got {}", lay.total, flat.len())));
        }
        let mut at = 0;
        for m in &mut self.embeddings {
            let len = m.rows() * m.cols();
            m.as_mut_slice().copy_from_slice(&flat[at..at + len]);
            at += len;
        }
        self.mlp_w1.as_mut_slice().copy_from_slice(&flat[lay.w1..lay.b1]);
        self.mlp_b1.copy_from_slice(&flat[lay.b1..lay.w2]);
        self.mlp_w2.as_mut_slice().copy_from_slice(&flat[lay.w2..lay.b2]);
        self.mlp_b2.copy_from_slice(&flat[lay.b2..lay.z]);
        self.gate_z.copy_from_slice(&flat[lay.z..lay.w]);
        self.out_w.copy_from_slice(&flat[lay.w..lay.bias]);
        self.out_bias = flat[lay.bias];
        Ok(())
    }

    fn predict_with(&self, index: &[usize], scratch: &mut HeadScratch) -> f64 {
        self.forward(self.embeddings.iter().zip(index).map(|(m, &i)| m.row(i)), scratch)
    }

    fn accumulate_gradient(&self, index: &[usize], upstream: f64, grad: &mut [f64], scratch: &mut HeadScratch) {
        self.predict_with(index, scratch);
        self.backward(index, upstream, grad, scratch);
    }
}

/// `σ(B_1[i_1] ⊙ ... ⊙ B_N[i_N])`.
pub fn elementwise_flow(rows: &[&[f64]], activation: Activation) -> Result<Vec<f64>> {
    let f = rows.first().map_or(0, |r| r.len());
    if rows.is_empty() || rows.iter().any(|r| r.len() != f) {
        return Err(Error::dims("element-wise flow needs at least one row and equal row lengths"));
    }
    Ok((0..f).map(|k| activation.apply(rows.iter().map(|r| r[k]).product())).collect())
}

/// The concatenation MLP flow, concatenating rows in mode order.
pub fn mlp_flow(rows: &[&[f64]], params: &NonlinearParams) -> Result<Vec<f64>> {
    params.check_rows(rows)?;
    let mut s = HeadScratch::default();
    params.forward(rows.iter().copied(), &mut s);
    Ok(s.b_breve)
}
