//! Dense row-major `f64` tensors, reverse-mode autodiff and optimizers.
//!
//! Values live in [`Tensor`]. Differentiable computations are recorded on a
//! [`Tape`]: parameters are bound by reference, every op is evaluated eagerly
//! and its inputs and saved intermediates are kept so that
//! [`Tape::backward`] can run the reverse sweep. Gradients are handed back
//! keyed by the bound tensors (see [`Gradients::get`]).

mod ops;
pub mod gradcheck;
mod optim;
mod tape;

pub use optim::{AdamConfig, Optimizer, OptimizerKind};
pub use ops::log_softmax;
pub use tape::{Gradients, Tape, Var};

use crate::rng::{self, RngExt};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: index {index} out of range 0..{bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// A dense row-major array of `f64` with an optional gradient buffer.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// The gradient buffer is scratch space and does not take part.
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data && self.requires_grad == other.requires_grad
    }
}

/// Initialization schemes for [`seeded_init`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, `fan_in = shape[0]`.
    UniformScaled,
    Zeros,
    Ones,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Contract(format!(
                "shape {shape:?} must be non-empty with positive dimensions"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Shape {
                op: "Tensor::new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: true,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n]).expect("positive shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar")
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(TensorError::Contract("ragged rows".into()));
        }
        Self::new(vec![m, n], rows.concat())
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

    /// Row count of a 2-D tensor (1 for vectors).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Column count of a 2-D tensor (length for vectors).
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    /// Adds `g` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::Shape {
                op: "accumulate_grad",
                left: self.shape.clone(),
                right: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Makes sure a (zero) gradient buffer exists.
    pub fn ensure_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    /// Little-endian bytes of the values, used for bit-exact comparisons.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }
}

/// Deterministic initialization for `(shape, scheme, seed)`.
pub fn seeded_init(shape: &[usize], scheme: InitScheme, seed: u64) -> Tensor {
    match scheme {
        InitScheme::Zeros => Tensor::zeros(shape),
        InitScheme::Ones => Tensor::filled(shape, 1.0),
        InitScheme::UniformScaled => {
            let fan_in = shape[0] as f64;
            let bound = 1.0 / fan_in.sqrt();
            let mut rng = rng::seeded(seed);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::new(shape.to_vec(), data).expect("positive shape")
        }
    }
}
