use std::sync::Arc;

use crate::error::{DiffError, Result};
use crate::NodeId;

/// Dense row-major `f64` tensor.
///
/// A tensor either lives on a [`Tape`](crate::Tape) (it carries a node id and
/// receives gradients) or is a constant. Values are shared, so cloning is cheap.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Arc<[usize]>,
    data: Arc<[f64]>,
    node: Option<NodeId>,
}

/// Equal shapes and bitwise-equal values; tape membership is ignored.
impl PartialEq for Tensor {
    fn eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Tensor {
    /// Builds a constant tensor, rejecting wrong value counts and non-finite values.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let expected = numel(shape);
        if shape.contains(&0) {
            return Err(DiffError::InvalidShape {
                op: "tensor",
                shape: shape.to_vec(),
            });
        }
        if expected != data.len() {
            return Err(DiffError::ValueCount {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op: "tensor" });
        }
        Ok(Tensor {
            shape: shape.into(),
            data: data.into(),
            node: None,
        })
    }

    /// Scalar constant. Panics on a non-finite literal.
    pub fn scalar(value: f64) -> Tensor {
        assert!(value.is_finite(), "non-finite scalar literal");
        Tensor {
            shape: Arc::from([1usize]),
            data: Arc::from([value]),
            node: None,
        }
    }

    pub fn vector(values: &[f64]) -> Result<Tensor> {
        Tensor::new(&[values.len()], values.to_vec())
    }

    pub fn matrix(rows: usize, cols: usize, values: &[f64]) -> Result<Tensor> {
        Tensor::new(&[rows, cols], values.to_vec())
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape, vec![0.0; numel(shape)]).expect("zero tensor is valid")
    }

    pub fn eye(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::new(&[n, n], data).expect("identity is valid")
    }

    pub(crate) fn from_parts(shape: Arc<[usize]>, data: Arc<[f64]>, node: Option<NodeId>) -> Tensor {
        Tensor { shape, data, node }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub(crate) fn shape_arc(&self) -> Arc<[usize]> {
        self.shape.clone()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<[f64]> {
        self.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_constant(&self) -> bool {
        self.node.is_none()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Same values, detached from any tape.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
