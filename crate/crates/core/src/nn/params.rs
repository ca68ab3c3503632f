use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor on the tape, tracked or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.var(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::DimensionMismatch {
                what: "flat parameters",
                expected: self.numel(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape.clone()).collect()
    }
}

/// Uniform initialization with bound `sqrt(6 / fan_in)`, suited to layers
/// followed by a rectifier.
pub fn he_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let b = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.random_range(-b..b)).collect(),
    }
}

/// Fully connected layer `x W + b` with `W [in, out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize, zero: bool) -> Self {
        let w = if zero {
            Tensor::zeros(&[fan_in, fan_out])
        } else {
            he_uniform(rng, &[fan_in, fan_out], fan_in)
        };
        Dense {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        tape.add_row(y, p[self.b])
    }
}

/// 3x3-style convolution with bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv {
            w: store.add(format!("{name}.w"), he_uniform(rng, &[cout, cin, k, k], cin * k * k)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout])),
            stride,
            pad,
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.w], p[self.b], self.stride, self.pad)
    }
}
