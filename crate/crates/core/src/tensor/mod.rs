//! Dense f64 tensors, a reverse-mode tape, parameters with Adam state, and
//! finite-difference checking.

mod linalg;
pub mod gradcheck;
pub mod params;
pub mod tape;

pub use params::{clip_global_norm, linear_anneal, AdamConfig, Gradients, ParamStore};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit reals.
///
/// An empty shape denotes a scalar holding one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking `product(shape) == data.len()` and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        let t = Tensor { shape, data };
        t.ensure_finite("tensor construction")?;
        Ok(t)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    /// Matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape("dims2", format!("expected a matrix, got {other:?}"))),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        let cols = self.shape[self.shape.len() - 1];
        self.data[row * cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Plain matrix product outside any tape.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        linalg::gemm_nn(m, k, n, &self.data, &other.data, &mut out, false);
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    /// Adds a row vector to every row.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, c) = self.dims2()?;
        if bias.len() != c {
            return Err(Error::shape("add_row", format!("{} vs {c}", bias.len())));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        Tensor::from_parts(self.shape.clone(), data)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(&self.shape, axis)?;
        let mut out = vec![0.0; self.data.len()];
        softmax_into(&self.data, &mut out, outer, len, inner);
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }
}

/// Splits a shape around `axis` into `(outer, len, inner)` extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(
            "axis",
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..len {
                max = max.max(x[idx(k)]);
            }
            let mut total = 0.0;
            for k in 0..len {
                let e = (x[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[idx(k)] /= total;
            }
        }
    }
}

pub(crate) fn log_softmax_into(x: &[f64], out: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..len {
                max = max.max(x[idx(k)]);
            }
            let mut total = 0.0;
            for k in 0..len {
                total += (x[idx(k)] - max).exp();
            }
            let lse = max + total.ln();
            for k in 0..len {
                out[idx(k)] = x[idx(k)] - lse;
            }
        }
    }
}

/// Cosine similarity of two equally long vectors.
///
/// Returns `(similarity, degenerate)`; when either vector has zero norm the
/// similarity is defined as 0 and `degenerate` is set.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<(f64, bool)> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("{} vs {}", a.len(), b.len()),
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok((0.0, true));
    }
    Ok(((dot / (na * nb)).clamp(-1.0, 1.0), false))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_shape_and_finiteness() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![2, 1], vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn matmul_identity_and_selection() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap(), m);

        let sel = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let col = Tensor::from_rows(&[vec![2.0], vec![3.0]]).unwrap();
        assert_eq!(sel.matmul(&col).unwrap().data(), &[2.0]);

        assert!(m.matmul(&Tensor::zeros(&[3, 1])).is_err());
    }

    #[test]
    fn softmax_cases() {
        let t = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        assert_eq!(t.softmax(0).unwrap().data(), &[0.5, 0.5]);

        let t = Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap();
        let s = t.softmax(0).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-300);

        let t = Tensor::new(vec![3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        let s = t.softmax(0).unwrap();
        for (got, want) in s.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }

        assert!(t.softmax(1).is_err());
    }

    #[test]
    fn softmax_along_inner_axis_of_matrix() {
        let t = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0]]).unwrap();
        let s = t.softmax(0).unwrap();
        // columns sum to one
        assert!((s.at(0, 0) + s.at(1, 0) - 1.0).abs() < 1e-15);
        assert!((s.at(0, 1) + s.at(1, 1) - 1.0).abs() < 1e-15);
        assert!((s.at(0, 0) - s.at(0, 1)).abs() < 1e-15);
    }

    #[test]
    fn cosine_cases() {
        let a = [1.0, 2.0, -3.0];
        assert!((cosine_similarity(&a, &a).unwrap().0 - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((cosine_similarity(&a, &neg).unwrap().0 + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), (0.0, false));
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), (0.0, true));
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }
}
