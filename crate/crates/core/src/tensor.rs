//! Dense row-major `f64` tensors and the handful of kernels the rest of the
//! crate is built on.
//!
//! Every kernel here sums in a fixed left-to-right order so results are
//! bit-reproducible from run to run.

use std::fmt;

use crate::error::{CsaError, Result};

/// Dense N-dimensional array of `f64` values in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(CsaError::InvalidShape {
                shape,
                reason: "extents must be positive and rank at least 1".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CsaError::InvalidShape {
                shape,
                reason: format!("expects {numel} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Panics on an invalid shape; for internal call sites whose shapes are
    /// already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid tensor shape {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(CsaError::InvalidShape {
                shape: vec![rows.len(), cols],
                reason: "ragged rows".into(),
            });
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                acc * d + i
            })
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|x| x * k)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(CsaError::shape("add", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// `self += other`, shapes must already agree.
    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(CsaError::InvalidShape {
                shape: self.shape.clone(),
                reason: "transpose expects a matrix".into(),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?} ...", &self.data[..16])
        }
    }
}

/// Matrix product of `a` (m×k) and `b` (k×n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(CsaError::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Mean and standard deviation over all elements. `population` selects the
/// `N` denominator, otherwise `N - 1` (0 for a single element).
pub fn reduce_mean_std(t: &Tensor, population: bool) -> (f64, f64) {
    mean_std(t.data(), population)
}

pub(crate) fn mean_std(xs: &[f64], population: bool) -> (f64, f64) {
    let n = xs.len();
    assert!(n > 0, "mean_std of empty slice");
    let mean = xs.iter().sum::<f64>() / n as f64;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    let denom = if population { n } else { n.saturating_sub(1) };
    let std = if denom == 0 { 0.0 } else { (ss / denom as f64).sqrt() };
    (mean, std)
}

/// `out[c, h, w] = p[c] * f[c, h, w]`.
pub fn broadcast_mul_channels(f: &Tensor, p: &Tensor) -> Result<Tensor> {
    if f.rank() != 3 || p.rank() != 1 || f.shape[0] != p.shape[0] {
        return Err(CsaError::shape("broadcast_mul_channels", &f.shape, &p.shape));
    }
    let plane = f.shape[1] * f.shape[2];
    let mut out = f.data.clone();
    for (chunk, &pc) in out.chunks_mut(plane).zip(&p.data) {
        for v in chunk {
            *v *= pc;
        }
    }
    Ok(Tensor::from_parts(f.shape.clone(), out))
}

/// Per-channel spatial mean of a C×H×W map (any rank ≥ 2; trailing extents
/// are flattened).
pub fn channel_means(f: &Tensor) -> Tensor {
    let c = f.shape[0];
    let plane = f.len() / c;
    let data = f
        .data
        .chunks(plane)
        .map(|ch| ch.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::from_parts(vec![c], data)
}

/// Squared Euclidean distances between the rows of a C×d matrix. Higher-rank
/// inputs are flattened to C×(product of trailing extents).
///
/// Differences are accumulated directly rather than through the Gram
/// expansion, so entries cannot go negative through cancellation; the
/// result is exactly symmetric with an exactly zero diagonal.
pub fn pairwise_sq_dist(rows: &Tensor) -> Tensor {
    let c = rows.shape[0];
    let d = rows.len() / c;
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        let ri = &rows.data[i * d..(i + 1) * d];
        for j in (i + 1)..c {
            let rj = &rows.data[j * d..(j + 1) * d];
            let s: f64 = ri.iter().zip(rj).map(|(a, b)| (a - b) * (a - b)).sum();
            let s = s.max(0.0);
            out[i * c + j] = s;
            out[j * c + i] = s;
        }
    }
    Tensor::from_parts(vec![c, c], out)
}
