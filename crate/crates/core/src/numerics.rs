//! Deterministic randomness, dense matrices, distances and finite differences.
//!
//! The random generator is ChaCha20 (`rand_chacha::ChaCha20Rng`), a
//! counter-based stream cipher generator whose output depends only on the
//! 64-bit seed and the 64-bit stream id, so results are identical on every
//! platform. Sub-streams for separate tasks are derived from the parent's
//! (seed, stream) and a task tag via FNV-1a; the consumed state of the
//! parent plays no part.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows with a norm at or below this are rejected by normalization.
pub const EPS_NORM: f64 = 1e-12;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET ^ seed;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Seeded ChaCha20 stream.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for a named sub-task.
    pub fn split(&self, tag: &str) -> Rng {
        let stream = fnv1a(self.stream, tag.as_bytes());
        Self::with_stream(self.seed, stream)
    }

    /// Like [`Rng::split`] with a numeric tag, e.g. an epoch index.
    pub fn split_index(&self, tag: &str, index: u64) -> Rng {
        let mut bytes = tag.as_bytes().to_vec();
        bytes.extend_from_slice(&index.to_le_bytes());
        let stream = fnv1a(self.stream, &bytes);
        Self::with_stream(self.seed, stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    /// Uniform on [lo, hi).
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// Dense row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// New matrix holding the given rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize_rows(x: &Matrix) -> Result<Matrix> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if n.is_nan() || n <= EPS_NORM {
            return Err(Error::ZeroNormRow { row: i, norm: n });
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Symmetric matrix of pairwise Euclidean distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    m: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.m + j]
    }

    /// Builds a matrix from explicit values; used to probe mining scores
    /// on hand-made distance configurations.
    pub fn from_fn(m: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut d = vec![0.0; m * m];
        for i in 0..m {
            for j in (i + 1)..m {
                let v = f(i, j);
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::NonFinite(format!("distance ({i}, {j}) = {v}")));
                }
                d[i * m + j] = v;
                d[j * m + i] = v;
            }
        }
        Ok(Self { m, d })
    }
}

/// `d_ij = sqrt(max(0, |f_i|^2 + |f_j|^2 - 2 f_i.f_j))`.
pub fn pairwise_distances(f: &Matrix) -> Result<DistanceMatrix> {
    if !f.is_finite() {
        return Err(Error::NonFinite("pairwise_distances input".into()));
    }
    let m = f.rows();
    let sq: Vec<f64> = (0..m).map(|i| dot(f.row(i), f.row(i))).collect();
    let mut d = vec![0.0; m * m];
    for i in 0..m {
        for j in (i + 1)..m {
            let v = (sq[i] + sq[j] - 2.0 * dot(f.row(i), f.row(j)))
                .max(0.0)
                .sqrt();
            d[i * m + j] = v;
            d[j * m + i] = v;
        }
    }
    Ok(DistanceMatrix { m, d })
}

/// Central-difference gradient of `func` at `x`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut func: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for idx in 0..x.as_slice().len() {
        let orig = x.as_slice()[idx];
        probe.as_mut_slice()[idx] = orig + h;
        let plus = func(&probe);
        probe.as_mut_slice()[idx] = orig - h;
        let minus = func(&probe);
        probe.as_mut_slice()[idx] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFiniteEvaluation { coordinate: idx });
        }
        grad.as_mut_slice()[idx] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest entry-wise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
