//! Sparse COO tensors, the text ingestion format and train/validation/test splits.
//!
//! Text format:
//!
//! ```text
//! # shape: 2,3,4
//! 0,0,0,1.5
//! 1,2,3,2.0
//! ```
//!
//! The header is optional; without it the shape is the per-mode maximum index
//! plus one. Fields may be separated by commas or tabs. Other `#` lines are
//! comments.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, Stream};

/// Observed entries of an N-way tensor in coordinate form.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTensor {
    shape: Vec<usize>,
    // nnz * N, entry k occupies indices[k*N..(k+1)*N]
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseTensor {
    /// Builds a tensor from flattened index tuples, checking bounds, duplicates and finiteness.
    pub fn new(shape: Vec<usize>, indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n = shape.len();
        if n == 0 {
            return Err(Error::invalid("tensor must have at least one mode"));
        }
        if shape.contains(&0) {
            return Err(Error::invalid(format!("shape {shape:?} has a zero dimension")));
        }
        if indices.len() != values.len() * n {
            return Err(Error::dims(format!(
                "{} index components for {} entries of a {n}-way tensor",
                indices.len(),
                values.len()
            )));
        }
        let mut seen = HashSet::with_capacity(values.len());
        for (k, idx) in indices.chunks_exact(n).enumerate() {
            check_index(idx, &shape)?;
            if !seen.insert(idx) {
                return Err(Error::DuplicateIndex { line: k + 1, index: idx.to_vec() });
            }
            if !values[k].is_finite() {
                return Err(Error::NonFinite { line: k + 1 });
            }
        }
        Ok(Self { shape, indices, values })
    }

    pub fn from_entries(shape: Vec<usize>, entries: &[(Vec<usize>, f64)]) -> Result<Self> {
        let n = shape.len();
        let mut indices = Vec::with_capacity(entries.len() * n);
        let mut values = Vec::with_capacity(entries.len());
        for (idx, v) in entries {
            if idx.len() != n {
                return Err(Error::dims(format!("index {idx:?} has {} modes, expected {n}", idx.len())));
            }
            indices.extend_from_slice(idx);
            values.push(*v);
        }
        Self::new(shape, indices, values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, k: usize) -> &[usize] {
        let n = self.shape.len();
        &self.indices[k * n..(k + 1) * n]
    }

    #[inline]
    pub fn value(&self, k: usize) -> f64 {
        self.values[k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn entries(&self) -> impl Iterator<Item = (&[usize], f64)> + '_ {
        self.indices.chunks_exact(self.shape.len()).zip(self.values.iter().copied())
    }

    /// New tensor holding only the entries at `positions`, in that order.
    pub fn select(&self, positions: &[usize]) -> SparseTensor {
        let n = self.order();
        let mut indices = Vec::with_capacity(positions.len() * n);
        let mut values = Vec::with_capacity(positions.len());
        for &p in positions {
            indices.extend_from_slice(self.index(p));
            values.push(self.values[p]);
        }
        SparseTensor { shape: self.shape.clone(), indices, values }
    }

    /// Writes the COO text form with a shape header and comma separators.
    pub fn write_coo<W: Write>(&self, mut out: W) -> Result<()> {
        let mut line = String::new();
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        writeln!(out, "# shape: {}", dims.join(","))?;
        for (idx, v) in self.entries() {
            line.clear();
            for i in idx {
                write!(line, "{i},").unwrap();
            }
            write!(line, "{v}").unwrap();
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn to_coo_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_coo(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("COO output is ASCII")
    }

    pub fn save_coo(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_coo(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn check_index(index: &[usize], shape: &[usize]) -> Result<()> {
    if index.len() != shape.len() || index.iter().zip(shape).any(|(i, d)| i >= d) {
        return Err(Error::IndexOutOfBounds { index: index.to_vec(), shape: shape.to_vec() });
    }
    Ok(())
}

/// How duplicate index tuples are merged during parsing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Mean,
    Sum,
}

impl std::str::FromStr for Aggregate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregate::Mean),
            "sum" => Ok(Aggregate::Sum),
            other => Err(Error::invalid(format!("unknown aggregation '{other}' (expected mean|sum)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParseOptions {
    pub n_modes: usize,
    /// `None` rejects duplicate index tuples.
    pub aggregate: Option<Aggregate>,
    /// Shift every index down by one on ingest.
    pub one_based: bool,
}

impl ParseOptions {
    pub fn new(n_modes: usize) -> Self {
        Self { n_modes, aggregate: None, one_based: false }
    }
}

fn parse_shape_header(line: &str) -> Option<&str> {
    let rest = line.strip_prefix('#')?.trim_start();
    rest.strip_prefix("shape:").map(str::trim)
}

fn split_fields(line: &str) -> impl Iterator<Item = &str> {
    line.split([',', '\t']).map(str::trim)
}

/// Reads a COO text stream. See the module docs for the format.
pub fn parse_coo<R: BufRead>(reader: R, opts: &ParseOptions) -> Result<SparseTensor> {
    let n = opts.n_modes;
    if n == 0 {
        return Err(Error::invalid("n_modes must be at least 1"));
    }
    let mut declared: Option<Vec<usize>> = None;
    let mut indices: Vec<usize> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut lines: Vec<usize> = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('#') {
            if let Some(dims) = parse_shape_header(trimmed) {
                let shape = split_fields(dims)
                    .map(|f| f.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Parse { line: lineno, message: format!("bad shape header: {e}") })?;
                if shape.len() != n {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("shape header has {} modes, expected {n}", shape.len()),
                    });
                }
                declared = Some(shape);
            }
            continue;
        }
        let fields: Vec<&str> = split_fields(trimmed).collect();
        if fields.len() != n + 1 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {} fields, found {}", n + 1, fields.len()),
            });
        }
        for f in &fields[..n] {
            let i: usize = f.parse().map_err(|_| Error::Parse { line: lineno, message: format!("bad index '{f}'") })?;
            let i = if opts.one_based {
                i.checked_sub(1)
                    .ok_or_else(|| Error::Parse { line: lineno, message: "index 0 in one-based input".into() })?
            } else {
                i
            };
            indices.push(i);
        }
        let v: f64 = fields[n]
            .parse()
            .map_err(|_| Error::Parse { line: lineno, message: format!("bad value '{}'", fields[n]) })?;
        if !v.is_finite() {
            return Err(Error::NonFinite { line: lineno });
        }
        values.push(v);
        lines.push(lineno);
    }

    let shape = match declared {
        Some(shape) => {
            for (k, idx) in indices.chunks_exact(n).enumerate() {
                check_index(idx, &shape).map_err(|_| Error::Parse {
                    line: lines[k],
                    message: format!("index {idx:?} outside declared shape {shape:?}"),
                })?;
            }
            shape
        }
        None => {
            let mut shape = vec![0usize; n];
            for idx in indices.chunks_exact(n) {
                for (d, &i) in shape.iter_mut().zip(idx) {
                    *d = (*d).max(i + 1);
                }
            }
            if values.is_empty() {
                return Err(Error::invalid("no entries and no shape header"));
            }
            shape
        }
    };

    let (indices, values) = merge_duplicates(n, indices, values, &lines, opts.aggregate)?;
    SparseTensor::new(shape, indices, values)
}

fn merge_duplicates(
    n: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
    lines: &[usize],
    aggregate: Option<Aggregate>,
) -> Result<(Vec<usize>, Vec<f64>)> {
    // slot per distinct tuple, in order of first appearance
    let mut slots: HashMap<&[usize], usize> = HashMap::with_capacity(values.len());
    let mut sums: Vec<f64> = Vec::with_capacity(values.len());
    let mut counts: Vec<usize> = Vec::with_capacity(values.len());
    let mut order: Vec<usize> = Vec::with_capacity(values.len());
    for (k, idx) in indices.chunks_exact(n).enumerate() {
        match slots.get(idx) {
            Some(&s) => {
                if aggregate.is_none() {
                    return Err(Error::DuplicateIndex { line: lines[k], index: idx.to_vec() });
                }
                sums[s] += values[k];
                counts[s] += 1;
            }
            None => {
                slots.insert(idx, sums.len());
                sums.push(values[k]);
                counts.push(1);
                order.push(k);
            }
        }
    }
    if order.len() == values.len() {
        return Ok((indices, values));
    }
    let mut out_idx = Vec::with_capacity(order.len() * n);
    let mut out_val = Vec::with_capacity(order.len());
    for (s, &k) in order.iter().enumerate() {
        out_idx.extend_from_slice(&indices[k * n..(k + 1) * n]);
        out_val.push(match aggregate {
            Some(Aggregate::Mean) => sums[s] / counts[s] as f64,
            _ => sums[s],
        });
    }
    Ok((out_idx, out_val))
}

pub fn load_coo(path: impl AsRef<Path>, opts: &ParseOptions) -> Result<SparseTensor> {
    let file = std::fs::File::open(path)?;
    parse_coo(std::io::BufReader::new(file), opts)
}

/// Partition of a tensor's entry positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl DatasetSplit {
    /// Checks disjointness and exact coverage of `0..nnz`.
    pub fn validate(&self, nnz: usize) -> Result<()> {
        let mut seen = vec![false; nnz];
        for &p in self.train.iter().chain(&self.val).chain(&self.test) {
            if p >= nnz {
                return Err(Error::invalid(format!("split position {p} >= {nnz} entries")));
            }
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid(format!("split position {p} appears twice")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("split does not cover every entry"));
        }
        Ok(())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>, nnz: usize) -> Result<Self> {
        let split: DatasetSplit = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        split.validate(nnz)?;
        Ok(split)
    }
}

/// Seeded random split. `|test| = round((1 - train_frac) * nnz)`; validation is
/// `round(val_frac_of_train * |train portion|)` positions taken from the training portion.
pub fn split_dataset(
    tensor: &SparseTensor,
    train_frac: f64,
    val_frac_of_train: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::invalid(format!("train_frac must lie in (0, 1), got {train_frac}")));
    }
    if !(0.0..1.0).contains(&val_frac_of_train) {
        return Err(Error::invalid(format!("val_frac_of_train must lie in [0, 1), got {val_frac_of_train}")));
    }
    let nnz = tensor.nnz();
    if nnz < 3 {
        return Err(Error::invalid(format!("cannot split a tensor with {nnz} entries (need at least 3)")));
    }
    let n_test = ((1.0 - train_frac) * nnz as f64).round() as usize;
    let n_portion = nnz - n_test;
    let n_val = (val_frac_of_train * n_portion as f64).round() as usize;
    if n_portion - n_val == 0 {
        return Err(Error::invalid("split leaves no training entries"));
    }

    let mut perm: Vec<usize> = (0..nnz).collect();
    perm.shuffle(&mut derive_rng(seed, Stream::Split));
    let mut test = perm[..n_test].to_vec();
    let mut val = perm[n_test..n_test + n_val].to_vec();
    let mut train = perm[n_test + n_val..].to_vec();
    test.sort_unstable();
    val.sort_unstable();
    train.sort_unstable();
    Ok(DatasetSplit { train, val, test, seed })
}
