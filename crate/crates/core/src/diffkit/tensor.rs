use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, shape_err, Result};

/// Dense row-major tensor of `f64` values.
///
/// Storage is reference counted so clones are cheap; mutation goes through
/// copy-on-write.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.numel() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.numel())
        }
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Right-aligned broadcast of two shapes, numpy style.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out` (0 on broadcast axes).
fn strides_in(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

/// Walks every index of `out` in row-major order, tracking linear offsets
/// into operands described by `strides`.
fn walk<const N: usize>(out: &[usize], strides: [&[usize]; N], mut f: impl FnMut(usize, [usize; N])) {
    let n = numel_of(out);
    if n == 0 {
        return;
    }
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let mut offs = [0usize; N];
    for o in 0..n {
        f(o, offs);
        for d in (0..nd).rev() {
            idx[d] += 1;
            for (k, s) in strides.iter().enumerate() {
                offs[k] += s[d];
            }
            if idx[d] < out[d] {
                break;
            }
            for (k, s) in strides.iter().enumerate() {
                offs[k] -= s[d] * out[d];
            }
            idx[d] = 0;
        }
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if numel_of(&shape) != data.len() {
            return invalid(format!(
                "tensor of shape {shape:?} needs {} values, got {}",
                numel_of(&shape),
                data.len()
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn vector(values: &[f64]) -> Self {
        Self::from_parts(vec![values.len()], values.to_vec())
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![v; numel_of(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn identity(n: usize) -> Self {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], d)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return invalid(format!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise binary operation with broadcasting.
    pub fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape == other.shape {
            let d = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Self::from_parts(self.shape.clone(), d));
        }
        if other.numel() == 1 && other.ndim() <= self.ndim() {
            let b = other.data[0];
            return Ok(Self::from_parts(self.shape.clone(), self.data.iter().map(|&a| f(a, b)).collect()));
        }
        if self.numel() == 1 && self.ndim() <= other.ndim() {
            let a = self.data[0];
            return Ok(Self::from_parts(other.shape.clone(), other.data.iter().map(|&b| f(a, b)).collect()));
        }
        let Some(out) = broadcast_shape(&self.shape, &other.shape) else {
            return shape_err(op, &self.shape, &other.shape);
        };
        let sa = strides_in(&self.shape, &out);
        let sb = strides_in(&other.shape, &out);
        let mut d = vec![0.0; numel_of(&out)];
        let (a, b) = (&self.data, &other.data);
        walk(&out, [&sa, &sb], |o, [ia, ib]| d[o] = f(a[ia], b[ib]));
        Ok(Self::from_parts(out, d))
    }

    pub fn add(&self, o: &Tensor) -> Result<Tensor> {
        self.zip(o, "add", |a, b| a + b)
    }

    pub fn sub(&self, o: &Tensor) -> Result<Tensor> {
        self.zip(o, "sub", |a, b| a - b)
    }

    pub fn mul(&self, o: &Tensor) -> Result<Tensor> {
        self.zip(o, "mul", |a, b| a * b)
    }

    pub fn div(&self, o: &Tensor) -> Result<Tensor> {
        self.zip(o, "div", |a, b| a / b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        match broadcast_shape(&self.shape, shape) {
            Some(out) if out == shape => {}
            _ => return shape_err("broadcast_to", &self.shape, shape),
        }
        let s = strides_in(&self.shape, shape);
        let mut d = vec![0.0; numel_of(shape)];
        let src = &self.data;
        walk(shape, [&s], |o, [i]| d[o] = src[i]);
        Ok(Self::from_parts(shape.to_vec(), d))
    }

    /// Sums a broadcast tensor back down to `shape` (adjoint of `broadcast_to`).
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        match broadcast_shape(shape, &self.shape) {
            Some(out) if out == self.shape => {}
            _ => return shape_err("sum_to_shape", &self.shape, shape),
        }
        let t = strides_in(shape, &self.shape);
        let mut d = vec![0.0; numel_of(shape)];
        let src = &self.data;
        walk(&self.shape, [&t], |o, [i]| d[i] += src[o]);
        Ok(Self::from_parts(shape.to_vec(), d))
    }

    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let mut kept = self.shape.clone();
        for &a in axes {
            if a >= self.ndim() {
                return invalid(format!("sum: axis {a} out of range for shape {:?}", self.shape));
            }
            kept[a] = 1;
        }
        let r = self.sum_to_shape(&kept)?;
        if keepdim {
            Ok(r)
        } else {
            let squeezed: Vec<usize> =
                (0..self.ndim()).filter(|d| !axes.contains(d)).map(|d| self.shape[d]).collect();
            r.reshape(&squeezed)
        }
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.numel() as f64
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return shape_err("reshape", &self.shape, shape);
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return invalid(format!("permute: {axes:?} is not a permutation of {nd} axes"));
        }
        let own = contiguous_strides(&self.shape);
        let out: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let s: Vec<usize> = axes.iter().map(|&a| own[a]).collect();
        let mut d = vec![0.0; self.numel()];
        let src = &self.data;
        walk(&out, [&s], |o, [i]| d[o] = src[i]);
        Ok(Self::from_parts(out, d))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let nd = self.ndim();
        if nd < 2 {
            return invalid("transpose needs at least two axes");
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(&axes)
    }

    /// Matrix product. `self` is `(..., m, k)`; `other` is either `(k, n)`
    /// (shared across all leading axes) or `(..., k, n)` with identical
    /// leading axes.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (&self.shape, &other.shape);
        if a.len() < 2 || b.len() < 2 {
            return shape_err("matmul", a, b);
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return shape_err("matmul", a, b);
        }
        let lead = &a[..a.len() - 2];
        let batch: usize = lead.iter().product();
        let shared = b.len() == 2;
        if !shared && &b[..b.len() - 2] != lead {
            return shape_err("matmul", a, b);
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut d = vec![0.0; batch * m * n];
        let (ad, bd) = (&self.data, &other.data);
        if shared {
            // Leading axes collapse into rows.
            matmul_kernel(ad, bd, &mut d, batch * m, k, n);
        } else {
            for bi in 0..batch {
                matmul_kernel(
                    &ad[bi * m * k..(bi + 1) * m * k],
                    &bd[bi * k * n..(bi + 1) * k * n],
                    &mut d[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        Ok(Self::from_parts(out_shape, d))
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return invalid("concat of zero tensors");
        };
        let nd = first.ndim();
        if axis >= nd {
            return invalid(format!("concat: axis {axis} out of range for rank {nd}"));
        }
        let mut total = 0;
        for p in parts {
            let same = p.ndim() == nd && (0..nd).all(|d| d == axis || p.shape[d] == first.shape[d]);
            if !same {
                return shape_err("concat", &first.shape, &p.shape);
            }
            total += p.shape[axis];
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut out_shape = first.shape.clone();
        out_shape[axis] = total;
        let mut d = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                d.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Self::from_parts(out_shape, d))
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.ndim() || start + len > self.shape[axis] {
            return invalid(format!(
                "slice [{start}, {}) on axis {axis} of shape {:?}",
                start + len,
                self.shape
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis] * inner;
        let mut d = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            d.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self::from_parts(shape, d))
    }

    /// Embeds `self` into zeros of extent `total` along `axis`, starting at `start`.
    pub fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Result<Tensor> {
        if axis >= self.ndim() || start + self.shape[axis] > total {
            return invalid(format!("pad: cannot place {:?} at {start} within {total}", self.shape));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let len = self.shape[axis] * inner;
        let mut shape = self.shape.clone();
        shape[axis] = total;
        let mut d = vec![0.0; numel_of(&shape)];
        for o in 0..outer {
            let dst = o * total * inner + start * inner;
            d[dst..dst + len].copy_from_slice(&self.data[o * len..(o + 1) * len]);
        }
        Ok(Self::from_parts(shape, d))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return shape_err("max_abs_diff", &self.shape, &other.shape);
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return shape_err("dot", &self.shape, &other.shape);
        }
        Ok(self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}
