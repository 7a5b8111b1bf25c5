use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathcore::{softmax, Distribution};

/// The source-trained linear classifier `g_w(z) = W z + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    /// `K x d_z`, one row per class.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearHead {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        let (k, _) = weight.dim();
        if k < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 classes, got {k}")));
        }
        if bias.len() != k {
            return Err(Error::ShapeMismatch {
                expected: k,
                actual: bias.len(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn logits(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: z.len(),
            });
        }
        Ok(self.weight.dot(&z) + &self.bias)
    }

    pub fn probs(&self, z: ArrayView1<f64>) -> Result<Distribution> {
        Ok(softmax(self.logits(z)?.as_slice().expect("contiguous")))
    }

    pub fn predict(&self, z: ArrayView1<f64>) -> Result<usize> {
        Ok(crate::mathcore::argmax(
            self.logits(z)?.as_slice().expect("contiguous"),
        ))
    }
}
