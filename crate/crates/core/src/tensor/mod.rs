//! Dense `f64` tensors and a small reverse-mode differentiation tape.
//!
//! Every tape operation works on row-major matrices; one-dimensional tensors
//! are treated as a single row. The free functions in this module
//! ([`linear`], [`softmax`], [`layer_norm`], [`multi_head_attention`]) are
//! convenience wrappers that evaluate one operation on a throwaway tape.

mod tape;

pub use tape::{Tape, Var};

use thiserror::Error;

/// Variance floor added inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("degenerate distribution in {op}: row {row} is fully masked")]
    Degenerate { op: &'static str, row: usize },
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Builds a `rows × cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("Tensor::from_rows", "ragged rows"));
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (a vector is one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub(crate) fn as_matrix(&self) -> Tensor {
        Tensor {
            shape: vec![self.rows(), self.cols()],
            data: self.data.clone(),
        }
    }
}

/// `x·w + b` for `x: [n×d_in]`, `w: [d_in×d_out]`, `b: [d_out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.as_matrix());
    let wv = tape.constant(w.as_matrix());
    let bv = tape.constant(b.as_matrix());
    let out = tape.linear(xv, wv, bv)?;
    Ok(tape.value(out).clone())
}

/// Softmax along `axis` of an arbitrary-rank tensor.
///
/// Entries equal to `-inf` receive probability exactly zero. A slice where
/// every entry is `-inf` is rejected as a degenerate distribution.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor, TensorError> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(shape_err(
            "softmax",
            format!("axis {axis} out of range for rank {}", shape.len()),
        ));
    }
    if x.data.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(TensorError::NonFinite { op: "softmax" });
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len)
                .map(|k| x.data[idx(k)])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::Degenerate {
                    op: "softmax",
                    row: o * inner + i,
                });
            }
            let mut sum = 0.0;
            for k in 0..len {
                let e = (x.data[idx(k)] - max).exp();
                out[idx(k)] = e;
                sum += e;
            }
            for k in 0..len {
                out[idx(k)] /= sum;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Row-wise layer normalization followed by the affine `gain`/`bias` map.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.as_matrix());
    let g = tape.constant(gain.as_matrix());
    let b = tape.constant(bias.as_matrix());
    let out = tape.layer_norm(xv, g, b)?;
    Ok(tape.value(out).clone())
}

/// Projection weights for [`multi_head_attention`].
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

/// Multi-head scaled dot-product attention with an output projection.
///
/// `mask[i*n + j] == true` forbids query `i` from attending to key `j`.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    weights: &AttentionWeights,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let qv = tape.constant(q.as_matrix());
    let kv = tape.constant(k.as_matrix());
    let vv = tape.constant(v.as_matrix());
    let wq = tape.constant(weights.wq.as_matrix());
    let wk = tape.constant(weights.wk.as_matrix());
    let wv = tape.constant(weights.wv.as_matrix());
    let wo = tape.constant(weights.wo.as_matrix());
    let bo = tape.constant(weights.bo.as_matrix());
    let qp = tape.matmul(qv, wq)?;
    let kp = tape.matmul(kv, wk)?;
    let vp = tape.matmul(vv, wv)?;
    let att = tape.attention(qp, kp, vp, heads, mask.map(<[bool]>::to_vec))?;
    let out = tape.linear(att, wo, bo)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn linear_identity_and_hand_sum() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        assert_eq!(linear(&x, &w, &b).unwrap().data(), &[1.0, 2.0]);

        let x = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![2.0], vec![3.0]]).unwrap();
        let b = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert_eq!(linear(&x, &w, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn linear_rejects_bad_shapes() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3]);
        assert!(matches!(linear(&x, &w, &b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::row_vector(vec![0.0, 0.0]), 1).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::row_vector(vec![f64::NEG_INFINITY, 0.0]), 1).unwrap();
        assert_eq!(s.data(), &[0.0, 1.0]);
        // exp(k)/Σexp evaluated independently of the implementation.
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let oracle: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp() / z).collect();
        let s = softmax(&Tensor::row_vector(vec![1.0, 2.0, 3.0]), 1).unwrap();
        assert!(close(s.data(), &oracle, 1e-15));
        assert!(close(s.data(), &[0.09003057, 0.24472847, 0.66524096], 1e-8));
    }

    #[test]
    fn softmax_degenerate_row() {
        let x = Tensor::row_vector(vec![f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert!(matches!(
            softmax(&x, 1),
            Err(TensorError::Degenerate { .. })
        ));
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!(close(s.data(), &[0.5, 0.5, 0.5, 0.5], 1e-15));
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::filled(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        let x = Tensor::row_vector(vec![5.0; 4]);
        assert_eq!(layer_norm(&x, &g, &b).unwrap().data(), &[0.0; 4]);

        let g = Tensor::filled(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let y = layer_norm(&Tensor::row_vector(vec![1.0, -1.0]), &g, &b).unwrap();
        let expected = 1.0 / (1.0f64 + LAYER_NORM_EPS).sqrt();
        assert!(close(y.data(), &[expected, -expected], 1e-15));
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn attention_single_key_returns_value() {
        let eye = |d: usize| {
            let mut t = Tensor::zeros(&[d, d]);
            for i in 0..d {
                t.data_mut()[i * d + i] = 1.0;
            }
            t
        };
        let w = AttentionWeights {
            wq: eye(2),
            wk: eye(2),
            wv: eye(2),
            wo: eye(2),
            bo: Tensor::zeros(&[2]),
        };
        let v = Tensor::row_vector(vec![0.3, -0.7]);
        let out = multi_head_attention(&v, &v, &v, &w, 1, Some(&[false])).unwrap();
        assert!(close(out.data(), v.data(), 1e-15));
    }
}
