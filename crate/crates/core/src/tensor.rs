//! Dense row-major f64 tensor, the universal numeric carrier of the simulator.
//!
//! Shapes are explicit `Vec<usize>` and all arithmetic follows trailing-axis
//! broadcasting: shapes align from the right and an axis of length 1 (or a
//! missing leading axis) broadcasts. Matrix products are defined for 2-D
//! tensors only, which is all the desk-scale models need.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// i.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std.max(0.0)).expect("valid std");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(lo..=hi)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-scalar tensor")
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        broadcast_zip(self, other, f)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a / b)
    }

    pub fn add_scalar(&self, s: f64) -> Self {
        self.map(|v| v + s)
    }

    pub fn mul_scalar(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn neg(&self) -> Self {
        self.mul_scalar(-1.0)
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul expects 2-D operands, got {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dims differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, &b) in dst.iter_mut().zip(row.iter()) {
                    *d += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul_t expects 2-D operands, got {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (n, k2) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul_t inner dims differ: {:?} x {:?}ᵀ",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "transpose expects 2-D, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Sum over the last axis, keeping it as length 1.
    pub fn sum_last(&self) -> Self {
        let n = self.cols();
        let rows = self.data.len() / n;
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = 1;
        let data = (0..rows)
            .map(|r| self.data[r * n..(r + 1) * n].iter().sum())
            .collect();
        Self { shape, data }
    }

    pub fn mean_last(&self) -> Self {
        let n = self.cols() as f64;
        self.sum_last().mul_scalar(1.0 / n)
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Row-wise maximum for a 2-D tensor, shape (rows, 1).
    pub fn max_last(&self) -> Self {
        let n = self.cols();
        let rows = self.data.len() / n;
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = 1;
        let data = (0..rows)
            .map(|r| {
                self.data[r * n..(r + 1) * n]
                    .iter()
                    .fold(f64::NEG_INFINITY, |m, &v| m.max(v))
            })
            .collect();
        Self { shape, data }
    }

    /// Column slice `[lo, hi)` of a 2-D tensor.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Result<Self> {
        if self.shape.len() != 2 || hi > self.shape[1] || lo >= hi {
            return Err(Error::ShapeMismatch(format!(
                "slice_cols [{lo},{hi}) on {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let w = hi - lo;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&self.data[i * n + lo..i * n + hi]);
        }
        Tensor::new(vec![m, w], data)
    }

    /// Horizontal concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(parts: &[Self]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat_cols of nothing".into()));
        }
        let m = parts[0].shape[0];
        if parts.iter().any(|p| p.shape.len() != 2 || p.shape[0] != m) {
            return Err(Error::ShapeMismatch("concat_cols row mismatch".into()));
        }
        let total: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                let n = p.shape[1];
                data.extend_from_slice(&p.data[i * n..(i + 1) * n]);
            }
        }
        Tensor::new(vec![m, total], data)
    }

    /// Mean over groups of `group` consecutive rows: (g*k, n) -> (k, n).
    pub fn mean_pool_rows(&self, group: usize) -> Result<Self> {
        if self.shape.len() != 2 || group == 0 || self.shape[0] % group != 0 {
            return Err(Error::ShapeMismatch(format!(
                "mean_pool_rows({group}) on {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let k = m / group;
        let mut data = vec![0.0; k * n];
        for i in 0..m {
            let dst = (i / group) * n;
            for j in 0..n {
                data[dst + j] += self.data[i * n + j];
            }
        }
        for v in data.iter_mut() {
            *v /= group as f64;
        }
        Tensor::new(vec![k, n], data)
    }

    /// Stack 2-D tensors with identical shapes along a new leading row axis.
    pub fn stack_rows(parts: &[Self]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("stack_rows of nothing".into()));
        }
        let shape = parts[0].shape.clone();
        if parts.iter().any(|p| p.shape != shape) {
            return Err(Error::ShapeMismatch("stack_rows shape mismatch".into()));
        }
        let rows: usize = parts.iter().map(|p| p.shape[0]).sum();
        let mut data = Vec::with_capacity(rows * shape[1]);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![rows, shape[1]], data)
    }

    /// Row slice `[lo, hi)` of a 2-D tensor.
    pub fn slice_rows(&self, lo: usize, hi: usize) -> Result<Self> {
        if self.shape.len() != 2 || hi > self.shape[0] || lo >= hi {
            return Err(Error::ShapeMismatch(format!(
                "slice_rows [{lo},{hi}) on {:?}",
                self.shape
            )));
        }
        let n = self.shape[1];
        Tensor::new(vec![hi - lo, n], self.data[lo * n..hi * n].to_vec())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn l2_distance(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "l2_distance {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn allclose(&self, other: &Self, tol: f64) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| (a - b).abs() <= tol)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Broadcast shape of two operands under trailing-axis alignment.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::ShapeMismatch(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        }
    }
    Ok(out)
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape.clone(), data);
    }
    let shape = broadcast_shape(&a.shape, &b.shape)?;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        data.push(f(read_broadcast(a, &idx, &shape), read_broadcast(b, &idx, &shape)));
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(shape, data)
}

fn read_broadcast(t: &Tensor, idx: &[usize], out_shape: &[usize]) -> f64 {
    let offset = out_shape.len() - t.shape.len();
    let mut flat = 0usize;
    for (ax, &dim) in t.shape.iter().enumerate() {
        let i = if dim == 1 { 0 } else { idx[ax + offset] };
        flat = flat * dim + i;
    }
    t.data[flat]
}

/// Reduce `grad` (shaped like the broadcast output) back onto `shape` by
/// summing over the broadcast axes. Used by reverse-mode differentiation.
pub fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out_n: usize = shape.iter().product();
    let mut out = vec![0.0; out_n];
    let gshape = grad.shape().to_vec();
    let offset = gshape.len() - shape.len();
    let mut idx = vec![0usize; gshape.len()];
    for g in grad.data() {
        let mut flat = 0usize;
        for (ax, &dim) in shape.iter().enumerate() {
            let i = if dim == 1 { 0 } else { idx[ax + offset] };
            flat = flat * dim + i;
        }
        out[flat] += *g;
        for ax in (0..gshape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < gshape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("reduce_to_shape")
}
