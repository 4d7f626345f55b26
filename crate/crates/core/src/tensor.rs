//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is a flat buffer plus a shape. All operations return new
//! tensors; nothing is aliased. Reductions walk the buffer in ascending flat
//! index order so results are bit-reproducible.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Element-wise unary functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Sqrt,
    Reciprocal,
    Exp,
    Neg,
}

/// Element-wise binary functions. The right operand may be a per-feature
/// vector broadcast over the leading axes of the left operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Unary {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Sqrt => x.sqrt(),
            Unary::Reciprocal => 1.0 / x,
            Unary::Exp => x.exp(),
            Unary::Neg => -x,
        }
    }
}

impl Binary {
    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero dimension")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        assert!(n > 0, "shape {shape:?} has a zero dimension");
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Tensor { shape: vec![data.len()], data }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has rank >= 1")
    }

    /// Number of rows when the tensor is viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn into_shape(self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data)
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank());
        let off: usize = index.iter().zip(self.strides()).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(format!("{what} expects a 2-D tensor, got shape {s:?}"))),
        }
    }

    /// Standard matrix product `[m×k] × [k×n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for (a_row, out_row) in self.data.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
            for (&a, b_row) in a_row.iter().zip(rhs.data.chunks_exact(n)) {
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// `selfᵀ × rhs` for `self: [m×k]`, `rhs: [m×n]`, without materializing
    /// the transpose.
    pub fn matmul_tn(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul_tn")?;
        let (m2, n) = rhs.dims2("matmul_tn")?;
        if m != m2 {
            return Err(Error::dim(format!(
                "matmul_tn leading dimensions disagree: {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![0.0; k * n];
        for (a_row, b_row) in self.data.chunks_exact(k).zip(rhs.data.chunks_exact(n)) {
            for (&a, out_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor { shape: vec![k, n], data: out })
    }

    /// `self × rhsᵀ` for `self: [m×n]`, `rhs: [k×n]`.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("matmul_nt")?;
        let (k, n2) = rhs.dims2("matmul_nt")?;
        if n != n2 {
            return Err(Error::dim(format!(
                "matmul_nt trailing dimensions disagree: {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = Vec::with_capacity(m * k);
        for a_row in self.data.chunks_exact(n) {
            for b_row in rhs.data.chunks_exact(n) {
                out.push(dot(a_row, b_row));
            }
        }
        Ok(Tensor { shape: vec![m, k], data: out })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    pub fn map(&self, op: Unary) -> Tensor {
        self.map_with(|x| op.apply(x))
    }

    pub fn map_with(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map_with(|x| x * s)
    }

    /// True when `rhs` broadcasts as a per-feature vector over `self`.
    fn is_row_broadcast(&self, rhs: &Tensor) -> bool {
        rhs.rank() == 1 && rhs.shape[0] == self.last_dim() && self.shape != rhs.shape
    }

    pub fn zip(&self, op: Binary, rhs: &Tensor) -> Result<Tensor> {
        if self.shape == rhs.shape {
            let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| op.apply(a, b)).collect();
            return Ok(Tensor { shape: self.shape.clone(), data });
        }
        if self.is_row_broadcast(rhs) {
            let f = rhs.numel();
            let mut data = Vec::with_capacity(self.numel());
            for row in self.data.chunks_exact(f) {
                data.extend(row.iter().zip(&rhs.data).map(|(&a, &b)| op.apply(a, b)));
            }
            return Ok(Tensor { shape: self.shape.clone(), data });
        }
        Err(Error::dim(format!(
            "cannot broadcast {:?} against {:?}",
            rhs.shape, self.shape
        )))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(Binary::Add, rhs)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(Binary::Sub, rhs)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(Binary::Mul, rhs)
    }

    /// In-place `self += rhs` for identical shapes.
    pub fn add_assign(&mut self, rhs: &Tensor) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(Error::dim(format!(
                "add_assign shape mismatch: {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    /// Reduces over the given axes, removing them from the shape. Reducing
    /// every axis yields a tensor of shape `[1]`.
    pub fn reduce(&self, axes: &[usize], op: Reduce) -> Result<Tensor> {
        if axes.is_empty() {
            return Err(Error::Degenerate("reduction over an empty axis set".into()));
        }
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::dim(format!(
                    "axis {a} out of range for shape {:?}",
                    self.shape
                )));
            }
            reduced[a] = true;
        }
        let kept: Vec<usize> = (0..rank).filter(|&a| !reduced[a]).collect();
        let out_shape: Vec<usize> = if kept.is_empty() {
            vec![1]
        } else {
            kept.iter().map(|&a| self.shape[a]).collect()
        };
        let count: usize = (0..rank).filter(|&a| reduced[a]).map(|a| self.shape[a]).product();

        // Output stride contributed by each input axis (zero for reduced axes).
        let mut out_stride = vec![0usize; rank];
        let mut s = 1;
        for &a in kept.iter().rev() {
            out_stride[a] = s;
            s *= self.shape[a];
        }

        let init = match op {
            Reduce::Max => f64::NEG_INFINITY,
            _ => 0.0,
        };
        let mut out = vec![init; out_shape.iter().product()];
        let mut index = vec![0usize; rank];
        for &v in &self.data {
            let o: usize = index.iter().zip(&out_stride).map(|(i, s)| i * s).sum();
            match op {
                Reduce::Max => {
                    if v > out[o] || v.is_nan() {
                        out[o] = v;
                    }
                }
                _ => out[o] += v,
            }
            for ax in (0..rank).rev() {
                index[ax] += 1;
                if index[ax] < self.shape[ax] {
                    break;
                }
                index[ax] = 0;
            }
        }
        if op == Reduce::Mean {
            let c = count as f64;
            out.iter_mut().for_each(|v| *v /= c);
        }
        Ok(Tensor { shape: out_shape, data: out })
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sums over all leading axes, leaving a `[last_dim]` vector.
    pub fn sum_rows(&self) -> Tensor {
        let f = self.last_dim();
        let mut out = vec![0.0; f];
        for row in self.data.chunks_exact(f) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Tensor { shape: vec![f], data: out }
    }

    /// Contiguous block of the first axis: `self[start..start+len]`.
    pub fn slice_outer(&self, start: usize, len: usize) -> Result<Tensor> {
        let outer = self.shape[0];
        if len == 0 || start + len > outer {
            return Err(Error::dim(format!(
                "slice {start}..{} out of range for shape {:?}",
                start + len,
                self.shape
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Tensor {
            shape,
            data: self.data[start * inner..(start + len) * inner].to_vec(),
        })
    }

    /// Concatenates along the first axis. All parts must agree on the
    /// remaining axes.
    pub fn concat_outer(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let tail = &first.shape[1..];
        let mut outer = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::dim(format!(
                    "concat_outer shape mismatch: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            outer += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = outer;
        Ok(Tensor { shape, data })
    }

    /// Concatenates along the last axis.
    pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let rows = first.rows();
        let lead = &first.shape[..first.rank() - 1];
        for p in parts {
            if &p.shape[..p.rank() - 1] != lead {
                return Err(Error::dim(format!(
                    "concat_last shape mismatch: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
        }
        let width: usize = parts.iter().map(|p| p.last_dim()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                let f = p.last_dim();
                data.extend_from_slice(&p.data[r * f..(r + 1) * f]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        Ok(Tensor { shape, data })
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Tensor> {
        let f = self.last_dim();
        if len == 0 || start + len > f {
            return Err(Error::dim(format!(
                "column slice {start}..{} out of range for shape {:?}",
                start + len,
                self.shape
            )));
        }
        let mut data = Vec::with_capacity(self.rows() * len);
        for row in self.data.chunks_exact(f) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = len;
        Ok(Tensor { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Dot product with four fixed accumulators; the summation order depends only
/// on the slice length.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let i2 = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(i2.matmul(&a).unwrap(), a);
    }

    #[test]
    fn row_times_column() {
        let a = t2(&[&[1.0, 2.0]]);
        let b = t2(&[&[3.0], &[4.0]]);
        // 1*3 + 2*4
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = t2(&[&[1.0, -2.0, 0.5], &[3.0, 4.0, -1.0]]);
        let b = t2(&[&[2.0, 1.0], &[0.0, -3.0]]);
        let tn = a.matmul_tn(&b).unwrap();
        assert_eq!(tn, a.transpose().unwrap().matmul(&b).unwrap());
        let c = t2(&[&[1.0, 1.0, 2.0], &[0.0, -1.0, 3.0], &[2.0, 2.0, 2.0]]);
        let nt = a.matmul_nt(&c).unwrap();
        let explicit = a.matmul(&c.transpose().unwrap()).unwrap();
        assert!(nt.max_abs_diff(&explicit) < 1e-15);
    }

    #[test]
    fn unary_fixed_points() {
        let z = Tensor::zeros(&[2, 3]);
        assert!(z.map(Unary::Sigmoid).data().iter().all(|&v| v == 0.5));
        assert!(z.map(Unary::Tanh).data().iter().all(|&v| v == 0.0));
        let four = Tensor::vector(vec![4.0, 0.25]);
        assert_eq!(four.map(Unary::Sqrt).data(), &[2.0, 0.5]);
        assert_eq!(four.map(Unary::Reciprocal).data(), &[0.25, 4.0]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn add_vectors() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn per_feature_broadcast() {
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::vector(vec![10.0, 20.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!(a.mul(&b).unwrap().data(), &[10.0, 40.0, 30.0, 80.0]);
        let bad = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert!(matches!(a.add(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn reductions() {
        let v = Tensor::vector(vec![2.0, 4.0]);
        assert_eq!(v.reduce(&[0], Reduce::Mean).unwrap().data(), &[3.0]);
        assert_eq!(Tensor::zeros(&[3, 2]).reduce(&[0, 1], Reduce::Sum).unwrap().data(), &[0.0]);
        assert!(matches!(v.reduce(&[1], Reduce::Max), Err(Error::Dimension(_))));
        assert!(matches!(v.reduce(&[], Reduce::Sum), Err(Error::Degenerate(_))));

        let x = Tensor::new(vec![2, 3], vec![1.0, 5.0, 2.0, 7.0, 0.0, 3.0]).unwrap();
        assert_eq!(x.reduce(&[0], Reduce::Sum).unwrap().data(), &[8.0, 5.0, 5.0]);
        assert_eq!(x.reduce(&[1], Reduce::Max).unwrap().data(), &[5.0, 7.0]);
        assert_eq!(x.reduce(&[1], Reduce::Mean).unwrap().data(), &[8.0 / 3.0, 10.0 / 3.0]);
    }

    #[test]
    fn middle_axis_reduction() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = Tensor::new(vec![2, 3, 4], data).unwrap();
        let r = x.reduce(&[1], Reduce::Sum).unwrap();
        assert_eq!(r.shape(), &[2, 4]);
        // brute force
        for i in 0..2 {
            for k in 0..4 {
                let s: f64 = (0..3).map(|j| x.get(&[i, j, k])).sum();
                assert_eq!(r.get(&[i, k]), s);
            }
        }
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t2(&[&[5.0], &[6.0]]);
        let c = Tensor::concat_last(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.slice_last(0, 2).unwrap(), a);
        assert_eq!(c.slice_last(2, 1).unwrap(), b);
        let s = Tensor::concat_outer(&[&a, &a]).unwrap();
        assert_eq!(s.shape(), &[4, 2]);
        assert_eq!(s.slice_outer(2, 2).unwrap(), a);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in small_matrix(3, 4), b in small_matrix(4, 2), c in small_matrix(2, 5)) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right) < 1e-9);
        }

        #[test]
        fn adding_zero_vector_is_exact(x in small_matrix(4, 3)) {
            prop_assert_eq!(x.add(&Tensor::zeros(&[3])).unwrap(), x.clone());
            prop_assert_eq!(x.add(&Tensor::zeros(&[4, 3])).unwrap(), x);
        }

        #[test]
        fn mean_over_unit_axis_is_identity(x in small_matrix(1, 6)) {
            let m = x.reduce(&[0], Reduce::Mean).unwrap();
            prop_assert_eq!(m.data(), x.data());
        }
    }
}
