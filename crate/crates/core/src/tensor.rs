//! Dense row-major tensors of f64 with a fixed, reproducible accumulation
//! order.
//!
//! Every public operation is pure: inputs are never mutated and outputs are
//! freshly allocated. Matrix products accumulate along the inner dimension in
//! ascending index order for every output element, so results are
//! bit-identical across runs regardless of loop tiling. Owned in-place
//! variants exist crate-internally so forward passes can keep their
//! activation footprint predictable.

use crate::error::{Error, Result};
use crate::mem;
use crate::rng::Rng;

/// Dense row-major tensor of f64.
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    trace: u64,
}

impl Tensor {
    /// Internal allocator: registers the buffer with the active memory
    /// trace. Does not validate finiteness — a diverging training run must
    /// be able to flow through to detection rather than aborting here.
    pub(crate) fn alloc(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let trace = mem::on_alloc(data.len());
        Tensor { shape, data, trace }
    }

    /// Builds a tensor, validating extents, length, and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::EmptyExtent { shape });
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::DataLength {
                expected,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "Tensor::new" });
        }
        Ok(Tensor::alloc(shape, data))
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::EmptyExtent { shape });
        }
        let len = shape.iter().product();
        Ok(Tensor::alloc(shape, vec![0.0; len]))
    }

    /// 2-d tensor from row slices; rows must be equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::EmptyExtent {
                shape: vec![rows.len(), rows.first().map_or(0, Vec::len)],
            });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::DataLength {
                    expected: cols,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Result<Tensor> {
        let mut t = Tensor::zeros(vec![n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    /// Standard-normal entries drawn row-major from `rng`.
    pub fn standard_normal(shape: Vec<usize>, rng: &mut Rng) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::EmptyExtent { shape });
        }
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.standard_normal()).collect();
        Ok(Tensor::alloc(shape, data))
    }

    /// Uniform entries in [lo, hi) drawn row-major from `rng`.
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::EmptyExtent { shape });
        }
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.uniform_in(lo, hi)).collect();
        Ok(Tensor::alloc(shape, data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// (rows, cols) of a 2-d tensor.
    pub fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::NotAMatrix {
                op,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Element (i, j) of a 2-d tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub(crate) fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Standard matrix product. For each output element the inner sum runs in
    /// ascending k, identical to a naive dot product.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (shape, data) = self.matmul_into(rhs, "matmul")?;
        Ok(Tensor::alloc(shape, data))
    }

    /// `scale * (self . rhs)`, scaling each finished element once.
    pub(crate) fn matmul_scaled(&self, rhs: &Tensor, scale: f64) -> Result<Tensor> {
        let (shape, mut data) = self.matmul_into(rhs, "matmul")?;
        for v in &mut data {
            *v *= scale;
        }
        Ok(Tensor::alloc(shape, data))
    }

    fn matmul_into(&self, rhs: &Tensor, op: &'static str) -> Result<(Vec<usize>, Vec<f64>)> {
        let (m, k) = self.matrix_dims(op)?;
        let (k2, n) = rhs.matrix_dims(op)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[kk * n..(kk + 1) * n];
                for j in 0..n {
                    o_row[j] += a * b_row[j];
                }
            }
        }
        Ok((vec![m, n], out))
    }

    /// `scale * (self . rhs^T)`: rows of both operands are contiguous, so this
    /// is the preferred form for query-key products.
    pub(crate) fn matmul_nt_scaled(&self, rhs: &Tensor, scale: f64) -> Result<Tensor> {
        let (m, k) = self.matrix_dims("matmul_nt")?;
        let (n, k2) = rhs.matrix_dims("matmul_nt")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (j, o) in o_row.iter_mut().enumerate() {
                let b_row = &rhs.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a_row[kk] * b_row[kk];
                }
                *o = scale * acc;
            }
        }
        Ok(Tensor::alloc(vec![m, n], out))
    }

    pub(crate) fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        self.matmul_nt_scaled(rhs, 1.0)
    }

    /// `scale * (self^T . rhs)`; accumulation over the shared leading
    /// dimension in ascending order.
    pub(crate) fn matmul_tn_scaled(&self, rhs: &Tensor, scale: f64) -> Result<Tensor> {
        let (k, m) = self.matrix_dims("matmul_tn")?;
        let (k2, n) = rhs.matrix_dims("matmul_tn")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_tn",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for kk in 0..k {
            let a_row = &self.data[kk * m..(kk + 1) * m];
            let b_row = &rhs.data[kk * n..(kk + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                let o_row = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    o_row[j] += a * b_row[j];
                }
            }
        }
        if scale != 1.0 {
            for v in &mut out {
                *v *= scale;
            }
        }
        Ok(Tensor::alloc(vec![m, n], out))
    }

    pub(crate) fn matmul_tn(&self, rhs: &Tensor) -> Result<Tensor> {
        self.matmul_tn_scaled(rhs, 1.0)
    }

    /// `self . vstack(blocks)` without materializing the stacked weight
    /// matrix. Accumulation order equals a plain matmul against the stack.
    pub(crate) fn matmul_blockrows(&self, blocks: &[&Tensor]) -> Result<Tensor> {
        let (m, k) = self.matrix_dims("matmul_blockrows")?;
        let n = blocks
            .first()
            .ok_or_else(|| Error::InvalidConfig {
                message: "matmul_blockrows: no blocks".into(),
            })?
            .matrix_dims("matmul_blockrows")?
            .1;
        let mut total_rows = 0;
        for b in blocks {
            let (r, c) = b.matrix_dims("matmul_blockrows")?;
            if c != n {
                return Err(Error::ShapeMismatch {
                    op: "matmul_blockrows",
                    left: blocks[0].shape.clone(),
                    right: b.shape.clone(),
                });
            }
            total_rows += r;
        }
        if total_rows != k {
            return Err(Error::ShapeMismatch {
                op: "matmul_blockrows",
                left: self.shape.clone(),
                right: vec![total_rows, n],
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            let mut offset = 0;
            for b in blocks {
                let rows = b.shape[0];
                for e in 0..rows {
                    let a = a_row[offset + e];
                    let b_row = &b.data[e * n..(e + 1) * n];
                    for j in 0..n {
                        o_row[j] += a * b_row[j];
                    }
                }
                offset += rows;
            }
        }
        Ok(Tensor::alloc(vec![m, n], out))
    }

    /// Row-wise softmax with row-max subtraction; rows sum to 1 for any
    /// finite input.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        self.matrix_dims("softmax_rows")?;
        Ok(Tensor::softmax_rows_in_place(self.clone()))
    }

    /// Owned in-place softmax; reuses the buffer, so no new activation.
    pub(crate) fn softmax_rows_in_place(mut t: Tensor) -> Tensor {
        let cols = t.shape[1];
        for row in t.data.chunks_mut(cols) {
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        t
    }

    /// Euclidean norm of each row; returns shape [rows].
    pub fn row_norms(&self) -> Result<Tensor> {
        let (m, n) = self.matrix_dims("row_norms")?;
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            out.push(row.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        Ok(Tensor::alloc(vec![m], out))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor::alloc(
            self.shape.clone(),
            self.data.iter().map(|v| v * factor).collect(),
        )
    }

    pub(crate) fn scale_in_place(mut t: Tensor, factor: f64) -> Tensor {
        for v in &mut t.data {
            *v *= factor;
        }
        t
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        Ok(Tensor::alloc(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a + b)
                .collect(),
        ))
    }

    pub(crate) fn add_in_place(mut t: Tensor, rhs: &Tensor) -> Result<Tensor> {
        if t.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: t.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        for (a, b) in t.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(t)
    }

    /// Accumulate `rhs` into an existing gradient buffer.
    pub(crate) fn add_assign(&mut self, rhs: &Tensor) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.matrix_dims("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::alloc(vec![n, m], out))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub(crate) fn hstack(parts: &[&Tensor]) -> Result<Tensor> {
        let (rows, _) = parts
            .first()
            .ok_or_else(|| Error::InvalidConfig {
                message: "hstack: no parts".into(),
            })?
            .matrix_dims("hstack")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for p in parts {
            let (r, c) = p.matrix_dims("hstack")?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "hstack",
                    left: parts[0].shape.clone(),
                    right: p.shape.clone(),
                });
            }
            widths.push(c);
            total += c;
        }
        let mut out = vec![0.0; rows * total];
        for i in 0..rows {
            let mut offset = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                out[i * total + offset..i * total + offset + w].copy_from_slice(p.row(i));
                offset += w;
            }
        }
        Ok(Tensor::alloc(vec![rows, total], out))
    }

    /// Mean of all elements.
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population variance of all elements.
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / self.data.len() as f64
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Tensor {
        Tensor::alloc(self.shape.clone(), self.data.clone())
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        if self.trace != 0 {
            mem::on_free(self.trace, self.data.len());
        }
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

/// Largest elementwise |a - b|.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape, b.shape, "max_abs_diff: shape mismatch");
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Largest elementwise |a - b| / max(|a|, |b|, 1).
pub fn max_rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape, b.shape, "max_rel_diff: shape mismatch");
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
