//! Dense row-major tensors with optional tape participation.
//!
//! A tensor is an immutable `(shape, data)` pair behind an `Arc`; clones are
//! cheap. Operations are ordinary functions of tensor values. When an input
//! participates in a [`tape::Tape`], the operation also records a node so
//! reverse-mode gradients can be computed later; otherwise the same code is a
//! pure forward evaluation. Tensors without a tape handle are `Send + Sync`
//! and may be shared across threads; taped tensors must stay on the thread
//! that owns their tape's use.

pub mod conv;
pub mod gradcheck;
pub mod io;
pub mod matmul;
pub mod ops;
pub mod tape;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use tape::NodeRef;

#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    pub(crate) node: Option<NodeRef<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Tensor<S>> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                msg: format!("shape wants {} elements, data has {}", numel, data.len()),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor<S> {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![S::zero(); numel]),
            node: None,
        }
    }

    pub fn full(shape: &[usize], v: S) -> Tensor<S> {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; numel]),
            node: None,
        }
    }

    pub fn scalar(v: S) -> Tensor<S> {
        Tensor::full(&[], v)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.data.as_ref().clone()
    }

    /// Value of a 0-d or single-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "item",
                msg: "expected exactly one element".into(),
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    /// Element at multi-dimensional `index` (row-major).
    pub fn at(&self, index: &[usize]) -> S {
        debug_assert_eq!(index.len(), self.shape.len());
        let st = strides(&self.shape);
        let off: usize = index.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    /// Same values, no tape participation.
    pub fn detach(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn is_on_tape(&self) -> bool {
        self.node.is_some()
    }

    /// Untaped element-wise rebuild; used by in-place parameter updates.
    pub fn detached_map(&self, mut f: impl FnMut(S) -> S) -> Tensor<S> {
        let data: Vec<S> = self.data.iter().map(|&v| f(v)).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            node: None,
        }
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<S>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Exact bit equality of shape and every element.
    pub fn bits_eq(&self, other: &Tensor<S>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_le_bytes_vec() == b.to_le_bytes_vec())
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Lossy dtype conversion, dropping any tape handle.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        let data: Vec<T> = self.data.iter().map(|&v| T::from_lossy(v.as_f64())).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            node: None,
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let head: Vec<&S> = self.data.iter().take(6).collect();
        write!(
            f,
            "Tensor{{shape: {:?}, taped: {}, data: {:?}{}}}",
            self.shape,
            self.node.is_some(),
            head,
            if self.numel() > 6 { ", ..." } else { "" }
        )
    }
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_numel() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn at_is_row_major() {
        let t = Tensor::<f32>::from_vec(&[2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
        assert_eq!(strides(&[]), Vec::<usize>::new());
    }

    #[test]
    fn cast_round_trip_f32() {
        let t = Tensor::<f32>::from_vec(&[3], vec![1.5, -2.25, 0.125]).unwrap();
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert!(t.bits_eq(&back));
    }
}
