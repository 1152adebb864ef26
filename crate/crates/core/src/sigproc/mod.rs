//! FFT machinery, causal convolutions and linear state-space systems.

pub mod conv;
mod fft;
mod ssm;

pub use conv::{depthwise_causal_conv, fft_causal_conv};
pub use fft::{fft, FftPlan};
pub use ssm::StateSpaceSystem;

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Per-channel impulse response `h: [L, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterResponse<F: Scalar> {
    h: Tensor<F>,
}

impl<F: Scalar> FilterResponse<F> {
    pub fn new(h: Tensor<F>) -> Result<Self> {
        if h.shape().len() != 2 {
            return Err(Error::shape(format!(
                "filter must be [L, channels], got {:?}",
                h.shape()
            )));
        }
        if !h.all_finite() {
            return Err(Error::numeric("filter response has non-finite entries"));
        }
        Ok(FilterResponse { h })
    }

    pub fn len(&self) -> usize {
        self.h.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.h.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.h
    }

    pub fn into_tensor(self) -> Tensor<F> {
        self.h
    }
}
