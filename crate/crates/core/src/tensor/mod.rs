//! Dense 4-D tensors, the gradient tape, and the parameter store.
//!
//! Everything is `f64` in NCHW row-major order. Forward ops live on [`Tape`];
//! a single [`Tape::backward`] call consumes the tape and returns the gradient
//! of every leaf that was marked as requiring one.

mod kernels;
mod param;
mod tape;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use kernels::{conv_out_len, same_padding};
pub use param::{ParamGroup, ParamId, ParamStore};
pub use tape::{BatchStats, Gradients, NormStats, Tape, Var};

/// (batch, channels, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    /// A row vector stored along the channel axis.
    pub const fn vector(len: usize) -> Self {
        Self::new(1, len, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn with_channels(self, c: usize) -> Self {
        Self { c, ..self }
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}x{}x{}x{}]", self.n, self.c, self.h, self.w)
    }
}

/// Dense tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
    #[serde(default)]
    pub requires_grad: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grad: Option<Vec<f64>>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.numel()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Shape4, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::invalid(
                "Tensor4::from_vec",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape4::scalar(), value)
    }

    pub fn vector(values: &[f64]) -> Self {
        Self {
            shape: Shape4::vector(values.len()),
            data: values.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::invalid(
                "Tensor4::set_grad",
                format!("{} values for shape {}", grad.len(), self.shape),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + h) * s.w + w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Numerically stable softmax over a flat slice.
pub fn softmax_lastdim(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax_lastdim", "empty input"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax_lastdim input"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_lastdim(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(softmax_lastdim(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
        // 1 / (1 + e^-2)
        let p = softmax_lastdim(&[2.0, 0.0]).unwrap();
        assert!((p[0] - 0.880797).abs() < 1e-6);
        assert!((p[1] - 0.119203).abs() < 1e-6);
        assert!(softmax_lastdim(&[f64::NAN, 0.0]).is_err());
        assert!(softmax_lastdim(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }
}
