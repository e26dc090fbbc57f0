//! Dense real tensors and the kernels the rest of the crate is built on.
//!
//! Data is stored row-major (last axis fastest) in 64-bit floats behind an
//! `Arc`, so cloning a tensor is cheap and values are immutable once built.

mod linalg;

use std::fmt;
use std::sync::Arc;

pub use linalg::{qr_reduced, svd_full, svd_truncated, SvdResult};

use crate::error::{Error, Result};

/// Advisory tag for a tensor axis. Kernels never inspect these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AxisLabel {
    Physical,
    North,
    East,
    South,
    West,
    Label,
    Other,
}

#[derive(Clone)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
    labels: Option<Vec<AxisLabel>>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {n} entries but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: data.into(),
            labels: None,
        })
    }

    /// Internal constructor for callers that already validated the shape.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: data.into(),
            labels: None,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self::from_parts(Vec::new(), vec![x])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], x: f64) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![x; n])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_parts(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data)
    }

    /// Builds a tensor by evaluating `f` on every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn with_labels(mut self, labels: Vec<AxisLabel>) -> Result<Self> {
        if labels.len() != self.rank() {
            return Err(Error::arg(format!(
                "{} labels for a rank-{} tensor",
                labels.len(),
                self.rank()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn labels(&self) -> Option<&[AxisLabel]> {
        self.labels.as_deref()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// Value of a rank-0 (or single-entry) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on a tensor with {} entries",
            self.len()
        );
        self.data[0]
    }

    pub fn strides(&self) -> Vec<usize> {
        row_major_strides(&self.shape)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.rank());
        let off = idx
            .iter()
            .zip(self.strides())
            .map(|(&i, s)| i * s)
            .sum::<usize>();
        self.data[off]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            labels: self.labels.clone(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "elementwise op on shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
            labels: self.labels.clone(),
        })
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| c * x)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    /// Largest entrywise absolute difference, or `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Self> {
        reshape(self, new_shape)
    }

    pub fn permute(&self, order: &[usize]) -> Result<Self> {
        permute_axes(self, order)
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn t(&self) -> Self {
        assert_eq!(self.rank(), 2, "transpose of rank-{} tensor", self.rank());
        permute_axes(self, &[1, 0]).expect("valid permutation")
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::arg("matmul needs rank-2 operands"));
        }
        contract(self, other, &[(1, 0)])
    }
}

impl PartialEq for DenseTensor {
    /// Labels are advisory and do not take part in equality.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for DenseTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("DenseTensor");
        s.field("shape", &self.shape);
        if self.len() <= 32 {
            s.field("data", &&self.data[..]);
        } else {
            s.field("data", &format_args!("[{} entries]", self.len()));
        }
        if let Some(l) = &self.labels {
            s.field("labels", l);
        }
        s.finish()
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for ax in (0..shape.len().saturating_sub(1)).rev() {
        strides[ax] = strides[ax + 1] * shape[ax + 1];
    }
    strides
}

fn check_permutation(order: &[usize], rank: usize) -> Result<()> {
    if order.len() != rank {
        return Err(Error::arg(format!(
            "permutation {order:?} has length {} but tensor has rank {rank}",
            order.len()
        )));
    }
    let mut seen = vec![false; rank];
    for &o in order {
        if o >= rank || seen[o] {
            return Err(Error::arg(format!(
                "{order:?} is not a permutation of 0..{rank}"
            )));
        }
        seen[o] = true;
    }
    Ok(())
}

pub fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}

/// Reorders axes so that output axis `k` is input axis `order[k]`.
pub fn permute_axes(t: &DenseTensor, order: &[usize]) -> Result<DenseTensor> {
    check_permutation(order, t.rank())?;
    let labels = t
        .labels
        .as_ref()
        .map(|l| order.iter().map(|&o| l[o]).collect::<Vec<_>>());
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        return Ok(t.clone());
    }
    let shape: Vec<usize> = order.iter().map(|&o| t.shape[o]).collect();
    let in_strides = t.strides();
    let strides: Vec<usize> = order.iter().map(|&o| in_strides[o]).collect();
    let data = strided_copy(&t.data, &shape, &strides);
    Ok(DenseTensor {
        shape,
        data: data.into(),
        labels,
    })
}

/// Gathers `src` into a fresh row-major buffer of `shape`, where output axis
/// `k` advances `strides[k]` in the source.
fn strided_copy(src: &[f64], shape: &[usize], strides: &[usize]) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    if rank == 0 {
        out.push(src[0]);
        return out;
    }
    let inner = shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            let mut p = base;
            for _ in 0..inner {
                out.push(src[p]);
                p += inner_stride;
            }
        }
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            base -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

pub fn reshape(t: &DenseTensor, new_shape: &[usize]) -> Result<DenseTensor> {
    let n: usize = new_shape.iter().product();
    if n != t.len() || new_shape.contains(&0) {
        return Err(Error::dim(format!(
            "cannot reshape {:?} ({} entries) into {new_shape:?}",
            t.shape,
            t.len()
        )));
    }
    Ok(DenseTensor {
        shape: new_shape.to_vec(),
        data: t.data.clone(),
        labels: None,
    })
}

/// Contracts `a` and `b` over the listed `(axis of a, axis of b)` pairs.
///
/// Free axes of `a` come first in the result, followed by the free axes of
/// `b`, each group in its original order. An empty pair list is the outer
/// product.
pub fn contract(a: &DenseTensor, b: &DenseTensor, pairs: &[(usize, usize)]) -> Result<DenseTensor> {
    let mut used_a = vec![false; a.rank()];
    let mut used_b = vec![false; b.rank()];
    for &(i, j) in pairs {
        if i >= a.rank() || j >= b.rank() {
            return Err(Error::arg(format!(
                "axis pair ({i}, {j}) out of range for ranks {} and {}",
                a.rank(),
                b.rank()
            )));
        }
        if used_a[i] || used_b[j] {
            return Err(Error::arg(format!("axis paired twice in {pairs:?}")));
        }
        used_a[i] = true;
        used_b[j] = true;
        if a.shape[i] != b.shape[j] {
            return Err(Error::dim(format!(
                "contracted extents differ: a axis {i} has {}, b axis {j} has {}",
                a.shape[i], b.shape[j]
            )));
        }
    }

    let mut sorted = pairs.to_vec();
    sorted.sort_unstable();
    let ca: Vec<usize> = sorted.iter().map(|p| p.0).collect();
    let cb: Vec<usize> = sorted.iter().map(|p| p.1).collect();
    let fa: Vec<usize> = (0..a.rank()).filter(|&i| !used_a[i]).collect();
    let fb: Vec<usize> = (0..b.rank()).filter(|&j| !used_b[j]).collect();

    let m: usize = fa.iter().map(|&i| a.shape[i]).product();
    let k: usize = ca.iter().map(|&i| a.shape[i]).product();
    let n: usize = fb.iter().map(|&j| b.shape[j]).product();

    // Lay `a` out as an (m x k) matrix and `b` as (k x n), either directly or
    // transposed, copying only when the axis order forces it.
    let a_fk: Vec<usize> = fa.iter().chain(ca.iter()).copied().collect();
    let a_kf: Vec<usize> = ca.iter().chain(fa.iter()).copied().collect();
    let (a_buf, rsa, csa) = if is_identity(&a_fk) {
        (a.data.clone(), k, 1)
    } else if is_identity(&a_kf) {
        (a.data.clone(), 1, m)
    } else {
        (permute_axes(a, &a_fk)?.data, k, 1)
    };
    let b_kf: Vec<usize> = cb.iter().chain(fb.iter()).copied().collect();
    let b_fk: Vec<usize> = fb.iter().chain(cb.iter()).copied().collect();
    let (b_buf, rsb, csb) = if is_identity(&b_kf) {
        (b.data.clone(), n, 1)
    } else if is_identity(&b_fk) {
        (b.data.clone(), 1, k)
    } else {
        (permute_axes(b, &b_kf)?.data, n, 1)
    };

    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a_buf, rsa, csa, &b_buf, rsb, csb, &mut out);

    let shape: Vec<usize> = fa
        .iter()
        .map(|&i| a.shape[i])
        .chain(fb.iter().map(|&j| b.shape[j]))
        .collect();
    Ok(DenseTensor::from_parts(shape, out))
}

fn is_identity(order: &[usize]) -> bool {
    order.iter().enumerate().all(|(i, &o)| i == o)
}

/// `c = a * b` for an (m x k) by (k x n) product with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    if k == 0 {
        return;
    }
    if m * n * k <= 64 {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * rsa + p * csa] * b[p * rsb + j * csb];
                }
                c[i * n + j] = acc;
            }
        }
        return;
    }
    // SAFETY: the buffers hold at least the addressed extents; strides are
    // derived from the same shapes used to size them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
