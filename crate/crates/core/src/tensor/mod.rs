//! Dense tensors and a minimal tape-based reverse-mode autodiff engine.
//!
//! A [`Tensor`] is a plain owned buffer with an optional gradient
//! accumulator; it lives across training steps. A [`Graph`] is built fresh
//! for each forward pass: tensors enter it as leaves, every operation is
//! recorded in topological order, and [`Graph::backward`] walks the record
//! once in reverse.

mod gradcheck;
mod graph;
mod ops;
mod scalar;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport, FULL_CHECK_LIMIT};
pub use graph::{BackwardReport, Gradients, Graph, NodeId, Var};
pub use ops::UnaryKind;
pub use scalar::{Precision, Scalar};

pub(crate) use ops::{rope_rotate, softplus};
pub(crate) use scalar::gemm;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::{Error, Result};

/// Initialisation recipe for [`Tensor::create`]. Random inits carry their
/// seed so that creation is a pure function of its arguments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
    Normal { mean: f64, std: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    pub requires_grad: bool,
    grad: Option<Vec<F>>,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor shape must have at least one extent"));
    }
    if let Some(bad) = shape.iter().find(|&&e| e == 0) {
        return Err(Error::shape(format!(
            "tensor extents must be positive, got {bad} in {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn create(shape: impl Into<Vec<usize>>, init: Init) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        let data = match init {
            Init::Zeros => vec![F::zero(); n],
            Init::Ones => vec![F::one(); n],
            Init::Constant(c) => vec![F::c(c); n],
            Init::Uniform { lo, hi, seed } => {
                if !(lo < hi) {
                    return Err(Error::config(format!(
                        "uniform init needs lo < hi, got [{lo}, {hi})"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dist = Uniform::new(lo, hi).map_err(|e| Error::config(e.to_string()))?;
                (0..n).map(|_| F::c(dist.sample(&mut rng))).collect()
            }
            Init::Normal { mean, std, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dist = Normal::new(mean, std).map_err(|e| Error::config(e.to_string()))?;
                (0..n).map(|_| F::c(dist.sample(&mut rng))).collect()
            }
        };
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::create(shape, Init::Zeros)
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
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

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, g: &[F]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), n);
        }
        Ok(self)
    }

    /// Elementwise conversion to another precision.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::c(v.f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape and data.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }
}
