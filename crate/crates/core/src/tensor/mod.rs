//! Dense tensors and tape-based reverse-mode differentiation.
//!
//! Values are stored as `f64`. In [`DType::F32`] mode every primitive rounds
//! its output to single precision, so results carry f32 rounding behaviour
//! while the memory tracker accounts 4 bytes per element.

pub mod gradcheck;
pub mod kernels;
pub mod memory;
mod tape;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use tape::{ConvParams, Gradients, Tape, Var};
pub(crate) use tape::embedded_taps;

/// Softmax with max subtraction.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    tape::softmax_slice(x)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("state error: {0}")]
    State(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }
}

impl std::str::FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}

pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
}

impl Tensor {
    pub fn new(shape: &[usize], mut data: Vec<f64>, dtype: DType) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Dimension(format!(
                "shape {shape:?} has a zero-sized dimension"
            )));
        }
        if numel != data.len() {
            return Err(TensorError::Dimension(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        if dtype == DType::F32 {
            data.iter_mut().for_each(|v| *v = dtype.round(*v));
        }
        Ok(Self::from_parts(shape.to_vec(), data, dtype))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        memory::register(data.len() * dtype.size_of());
        Self { shape, data, dtype }
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n], dtype)
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![dtype.round(value); n], dtype)
    }

    pub fn scalar(value: f64, dtype: DType) -> Self {
        Self::from_parts(vec![1], vec![dtype.round(value)], dtype)
    }

    pub fn from_vec(data: Vec<f64>, dtype: DType) -> Self {
        let n = data.len();
        let data = data.into_iter().map(|v| dtype.round(v)).collect();
        Self::from_parts(vec![n], data, dtype)
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

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn bytes(&self) -> usize {
        self.data.len() * self.dtype.size_of()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.clone()
    }

    /// First element; used for scalar tensors.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone(), self.dtype)
    }

    /// Re-round into another precision.
    pub fn cast(&self, dtype: DType) -> Tensor {
        let data = self.data.iter().map(|&v| dtype.round(v)).collect();
        Tensor::from_parts(self.shape.clone(), data, dtype)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let dtype = self.dtype;
        let data = self.data.iter().map(|&v| dtype.round(f(v))).collect();
        Tensor::from_parts(self.shape.clone(), data, dtype)
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, "zip_map")?;
        let dtype = self.dtype;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| dtype.round(f(a, b)))
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data, dtype))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// `self += c * other`, in place.
    pub fn axpy(&mut self, c: f64, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "axpy")?;
        let dtype = self.dtype;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = dtype.round(*a + c * b);
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `max|a - b| / max(1e-30, max|b|)`.
    pub fn max_rel_diff(&self, reference: &Tensor) -> Result<f64> {
        let diff = self.max_abs_diff(reference)?;
        Ok(diff / reference.max_abs().max(1e-30))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::Dimension(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub(crate) fn dims4(&self, what: &str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(TensorError::Dimension(format!(
                "{what} expects a 4-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.clone(), self.dtype)
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        memory::release(self.data.len() * self.dtype.size_of());
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data && self.dtype == other.dtype
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor({:?}, {:?}, [", self.shape, self.dtype)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "])")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(matches!(
            Tensor::new(&[2, 3], vec![0.0; 5], DType::F64),
            Err(TensorError::Dimension(_))
        ));
        assert!(Tensor::new(&[2, 3], vec![0.0; 6], DType::F64).is_ok());
    }

    #[test]
    fn f32_mode_rounds() {
        let t = Tensor::from_vec(vec![0.1], DType::F32);
        assert_eq!(t.item(), 0.1f32 as f64);
        let t = Tensor::from_vec(vec![0.1], DType::F64);
        assert_eq!(t.item(), 0.1);
    }
}
