//! Dense affine layers, `z = x Wᵀ + b`, with weights stored `(out, in)`.
//!
//! The affine map and the activation are kept separate so the score network
//! can add its error-injection term between them.

use serde::{Deserialize, Serialize};

use super::{init_glorot, matmul, matmul_at, matmul_bt, Matrix, Rng};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn apply(self, pre: &Matrix) -> Matrix {
        match self {
            Activation::Identity => pre.clone(),
            Activation::Relu => pre.map(|v| v.max(0.0)),
        }
    }

    /// Gradient w.r.t. the pre-activation. ReLU's derivative at 0 is taken as 0.
    pub fn backward(self, pre: &Matrix, dout: &Matrix) -> Result<Matrix> {
        if !pre.same_shape(dout) {
            return Err(Error::shape(
                "activation backward",
                pre.shape(),
                dout.shape(),
            ));
        }
        Ok(match self {
            Activation::Identity => dout.clone(),
            Activation::Relu => {
                let data = pre
                    .as_slice()
                    .iter()
                    .zip(dout.as_slice())
                    .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
                    .collect();
                Matrix::from_vec(pre.rows(), pre.cols(), data)?
            }
        })
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub weight: Matrix,
    pub bias: Matrix,
    pub input: Matrix,
}

impl Dense {
    /// Glorot weights, zero bias.
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            weight: init_glorot(out_dim, in_dim, rng)?,
            bias: Matrix::zeros(1, out_dim),
            activation,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: Matrix::zeros(1, out_dim),
            activation,
        }
    }

    pub fn from_parts(weight: Matrix, bias: Matrix, activation: Activation) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.rows() {
            return Err(Error::shape("dense bias", weight.shape(), bias.shape()));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Pre-activation `x Wᵀ + b` for a batch of rows.
    pub fn affine(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(
                "dense forward",
                x.shape(),
                self.weight.shape(),
            ));
        }
        let mut z = matmul_bt(x, &self.weight)?;
        z.add_row_broadcast(&self.bias)?;
        Ok(z)
    }

    /// Backward through the affine map given the gradient on its output.
    pub fn affine_backward(&self, x: &Matrix, dpre: &Matrix) -> Result<AffineGrads> {
        Ok(AffineGrads {
            weight: matmul_at(dpre, x)?,
            bias: dpre.sum_rows(),
            input: matmul(dpre, &self.weight)?,
        })
    }
}
