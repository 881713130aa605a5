//! The hybrid predictor `x̂ = g(A rows) + f(B rows)`, its squared loss and checkpoints.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cp::CpFactors;
use crate::error::{Error, Result};
use crate::head::{Activation, NonlinearHead, NonlinearParams};
use crate::matrix::Matrix;
use crate::tensor::{check_index, SparseTensor};

/// Entries per work unit when accumulating over a batch. Partition boundaries
/// depend only on this constant, and partial sums are reduced in partition
/// order, so results do not depend on the thread count.
pub(crate) const CHUNK: usize = 128;

pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct JuliaModel<H = NonlinearParams> {
    shape: Vec<usize>,
    pub cp: CpFactors,
    pub head: Option<H>,
}

impl<H: NonlinearHead> JuliaModel<H> {
    pub fn new(shape: Vec<usize>, cp: CpFactors, head: Option<H>) -> Result<Self> {
        if cp.shape() != shape {
            return Err(Error::dims(format!("CP factors have shape {:?}, model shape is {shape:?}", cp.shape())));
        }
        if cp.rank() == 0 && head.is_none() {
            return Err(Error::invalid("model needs R + F >= 1"));
        }
        Ok(Self { shape, cp, head })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn predict(&self, index: &[usize]) -> Result<f64> {
        check_index(index, &self.shape)?;
        Ok(self.eval(index, &mut H::Scratch::default()))
    }

    #[inline]
    pub(crate) fn eval(&self, index: &[usize], scratch: &mut H::Scratch) -> f64 {
        let linear = self.cp.eval(index);
        match &self.head {
            Some(h) => linear + h.predict_with(index, scratch),
            None => linear,
        }
    }

    /// Nonlinear term alone (0 without a head).
    pub fn head_term(&self, index: &[usize]) -> Result<f64> {
        check_index(index, &self.shape)?;
        Ok(self.head.as_ref().map_or(0.0, |h| h.predict(index)))
    }

    /// `Σ (x - x̂)²` over `(index, value)` pairs; 0 for an empty list.
    pub fn loss<'a>(&self, entries: impl IntoIterator<Item = (&'a [usize], f64)>) -> Result<f64> {
        let mut scratch = H::Scratch::default();
        let mut total = 0.0;
        for (index, x) in entries {
            check_index(index, &self.shape)?;
            let r = x - self.eval(index, &mut scratch);
            total += r * r;
        }
        Ok(total)
    }

    /// Squared loss over selected positions of `data` (indices must already be valid).
    pub fn loss_at(&self, data: &SparseTensor, positions: &[usize]) -> f64 {
        positions
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut scratch = H::Scratch::default();
                chunk
                    .iter()
                    .map(|&p| {
                        let r = data.value(p) - self.eval(data.index(p), &mut scratch);
                        r * r
                    })
                    .sum::<f64>()
            })
            .collect::<Vec<_>>()
            .into_iter()
            .sum()
    }

    pub fn predictions_at(&self, data: &SparseTensor, positions: &[usize]) -> Vec<f64> {
        positions
            .par_chunks(CHUNK)
            .flat_map_iter(|chunk| {
                let mut scratch = H::Scratch::default();
                chunk.iter().map(move |&p| self.eval(data.index(p), &mut scratch)).collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn num_linear_params(&self) -> usize {
        self.cp.num_params()
    }

    pub fn num_head_params(&self) -> usize {
        self.head.as_ref().map_or(0, H::num_params)
    }

    /// All parameters, linear block first.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = self.cp.flatten();
        if let Some(h) = &self.head {
            flat.extend(h.flatten());
        }
        flat
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        let n_lin = self.num_linear_params();
        if flat.len() != n_lin + self.num_head_params() {
            return Err(Error::dims("flat parameter vector has the wrong length"));
        }
        self.cp.unflatten(&flat[..n_lin])?;
        if let Some(h) = &mut self.head {
            h.unflatten(&flat[n_lin..])?;
        }
        Ok(())
    }

    /// Gradient of the squared loss over `data` with respect to all parameters,
    /// in [`JuliaModel::flatten`] layout.
    pub fn loss_gradient(&self, data: &SparseTensor) -> Result<Vec<f64>> {
        if data.shape() != self.shape.as_slice() {
            return Err(Error::dims("data shape differs from model shape"));
        }
        let positions: Vec<usize> = (0..data.nnz()).collect();
        let g = batch_gradient(self, data, &positions, true, true, 1.0);
        let mut flat = g.cp;
        flat.extend(g.head);
        Ok(flat)
    }
}

pub(crate) struct Gradients {
    pub cp: Vec<f64>,
    pub head: Vec<f64>,
    /// Unscaled `Σ residual²` of the batch.
    pub loss: f64,
}

/// Gradients of `scale * Σ (x̂ - x)²` over `positions`, for the requested blocks.
pub(crate) fn batch_gradient<H: NonlinearHead>(
    model: &JuliaModel<H>,
    data: &SparseTensor,
    positions: &[usize],
    want_cp: bool,
    want_head: bool,
    scale: f64,
) -> Gradients {
    let n_cp = if want_cp { model.num_linear_params() } else { 0 };
    let n_head = if want_head { model.num_head_params() } else { 0 };
    let partials: Vec<Gradients> = positions
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Gradients { cp: vec![0.0; n_cp], head: vec![0.0; n_head], loss: 0.0 };
            let mut scratch = H::Scratch::default();
            for &p in chunk {
                let index = data.index(p);
                let residual = model.eval(index, &mut scratch) - data.value(p);
                g.loss += residual * residual;
                let upstream = 2.0 * residual * scale;
                if want_cp {
                    model.cp.accumulate_gradient(index, upstream, &mut g.cp);
                }
                if let (true, Some(h)) = (want_head, &model.head) {
                    h.accumulate_gradient(index, upstream, &mut g.head, &mut scratch);
                }
            }
            g
        })
        .collect();
    let mut total = Gradients { cp: vec![0.0; n_cp], head: vec![0.0; n_head], loss: 0.0 };
    for g in partials {
        total.loss += g.loss;
        for (a, b) in total.cp.iter_mut().zip(&g.cp) {
            *a += b;
        }
        for (a, b) in total.head.iter_mut().zip(&g.head) {
            *a += b;
        }
    }
    total
}

impl JuliaModel<NonlinearParams> {
    /// Randomly initialized model with `r` CP components and an `f`-wide head.
    pub fn initialize(shape: &[usize], r: usize, f: usize, activation: Activation, seed: u64) -> Result<Self> {
        if r + f == 0 {
            return Err(Error::invalid("rank split R/F needs R + F >= 1"));
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!("invalid shape {shape:?}")));
        }
        let cp = CpFactors::initialize(shape, r, seed);
        let head = (f > 0).then(|| NonlinearParams::initialize(shape, f, activation, seed));
        Self::new(shape.to_vec(), cp, head)
    }

    /// `(R, F)`.
    pub fn rank_split(&self) -> (usize, usize) {
        (self.cp.rank(), self.head.as_ref().map_or(0, NonlinearParams::rank))
    }

    pub fn activation(&self) -> Activation {
        self.head.as_ref().map_or(Activation::default(), |h| h.activation)
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&CheckpointFile::from_model(self))?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        match raw.get("version").and_then(serde_json::Value::as_u64) {
            Some(CHECKPOINT_VERSION) => {}
            Some(v) => return Err(Error::UnsupportedVersion(v)),
            None => return Err(Error::Checkpoint("missing or non-integer `version`".into())),
        }
        let file: CheckpointFile = serde_json::from_value(raw).map_err(|e| Error::Checkpoint(e.to_string()))?;
        file.into_model()
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorJson {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl TensorJson {
    fn matrix(m: &Matrix) -> Self {
        Self { dims: vec![m.rows(), m.cols()], data: m.as_slice().to_vec() }
    }

    fn vector(v: &[f64]) -> Self {
        Self { dims: vec![v.len()], data: v.to_vec() }
    }

    fn scalar(x: f64) -> Self {
        Self { dims: vec![], data: vec![x] }
    }

    fn into_matrix(self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        if self.dims != [rows, cols] {
            return Err(Error::Checkpoint(format!("{name} has dims {:?}, expected [{rows}, {cols}]", self.dims)));
        }
        Matrix::from_vec(rows, cols, self.data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
    }

    fn into_vector(self, name: &str, len: usize) -> Result<Vec<f64>> {
        if self.dims != [len] || self.data.len() != len {
            return Err(Error::Checkpoint(format!("{name} has dims {:?}, expected [{len}]", self.dims)));
        }
        Ok(self.data)
    }

    fn into_scalar(self, name: &str) -> Result<f64> {
        if !self.dims.is_empty() || self.data.len() != 1 {
            return Err(Error::Checkpoint(format!("{name} must be a scalar")));
        }
        Ok(self.data[0])
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u64,
    shape: Vec<usize>,
    #[serde(rename = "R")]
    r: usize,
    #[serde(rename = "F")]
    f: usize,
    activation: Activation,
    cp_factors: Vec<TensorJson>,
    embeddings: Vec<TensorJson>,
    mlp_w1: Option<TensorJson>,
    mlp_b1: Option<TensorJson>,
    mlp_w2: Option<TensorJson>,
    mlp_b2: Option<TensorJson>,
    gate_z: Option<TensorJson>,
    out_w: Option<TensorJson>,
    out_bias: Option<TensorJson>,
}

impl CheckpointFile {
    fn from_model(model: &JuliaModel) -> Self {
        let (r, f) = model.rank_split();
        let head = model.head.as_ref();
        Self {
            version: CHECKPOINT_VERSION,
            shape: model.shape.clone(),
            r,
            f,
            activation: model.activation(),
            cp_factors: model.cp.factors().iter().map(TensorJson::matrix).collect(),
            embeddings: head.map_or_else(Vec::new, |h| h.embeddings.iter().map(TensorJson::matrix).collect()),
            mlp_w1: head.map(|h| TensorJson::matrix(&h.mlp_w1)),
            mlp_b1: head.map(|h| TensorJson::vector(&h.mlp_b1)),
            mlp_w2: head.map(|h| TensorJson::matrix(&h.mlp_w2)),
            mlp_b2: head.map(|h| TensorJson::vector(&h.mlp_b2)),
            gate_z: head.map(|h| TensorJson::vector(&h.gate_z)),
            out_w: head.map(|h| TensorJson::vector(&h.out_w)),
            out_bias: head.map(|h| TensorJson::scalar(h.out_bias)),
        }
    }

    fn into_model(self) -> Result<JuliaModel> {
        let CheckpointFile { shape, r, f, activation, .. } = self;
        let n = shape.len();
        if n == 0 || shape.contains(&0) {
            return Err(Error::Checkpoint(format!("invalid shape {shape:?}")));
        }
        if r + f == 0 {
            return Err(Error::Checkpoint("R + F must be at least 1".into()));
        }
        if self.cp_factors.len() != n {
            return Err(Error::Checkpoint(format!("{} CP factors for a {n}-way shape", self.cp_factors.len())));
        }
        let factors = self
            .cp_factors
            .into_iter()
            .zip(&shape)
            .enumerate()
            .map(|(k, (t, &d))| t.into_matrix(&format!("cp_factors[{k}]"), d, r))
            .collect::<Result<Vec<_>>>()?;
        let cp = CpFactors::new(factors).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let head = if f == 0 {
            if !self.embeddings.is_empty() {
                return Err(Error::Checkpoint("F = 0 but embeddings are present".into()));
            }
            None
        } else {
            if self.embeddings.len() != n {
                return Err(Error::Checkpoint(format!("{} embeddings for a {n}-way shape", self.embeddings.len())));
            }
            let embeddings = self
                .embeddings
                .into_iter()
                .zip(&shape)
                .enumerate()
                .map(|(k, (t, &d))| t.into_matrix(&format!("embeddings[{k}]"), d, f))
                .collect::<Result<Vec<_>>>()?;
            let need = |t: Option<TensorJson>, name: &str| {
                t.ok_or_else(|| Error::Checkpoint(format!("missing `{name}` for F = {f}")))
            };
            let params = NonlinearParams {
                embeddings,
                mlp_w1: need(self.mlp_w1, "mlp_w1")?.into_matrix("mlp_w1", n * f, f * f)?,
                mlp_b1: need(self.mlp_b1, "mlp_b1")?.into_vector("mlp_b1", f * f)?,
                mlp_w2: need(self.mlp_w2, "mlp_w2")?.into_matrix("mlp_w2", f * f, f)?,
                mlp_b2: need(self.mlp_b2, "mlp_b2")?.into_vector("mlp_b2", f)?,
                gate_z: need(self.gate_z, "gate_z")?.into_vector("gate_z", f)?,
                out_w: need(self.out_w, "out_w")?.into_vector("out_w", f)?,
                out_bias: need(self.out_bias, "out_bias")?.into_scalar("out_bias")?,
                activation,
            };
            params.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
            Some(params)
        };
        JuliaModel::new(shape, cp, head).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}
