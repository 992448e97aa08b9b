//! Dense row-major tensors over a generic float type.
//!
//! The buffer is behind an `Arc` so cloning a tensor (which the tape does
//! constantly while recording backward closures) is O(1); mutation goes
//! through copy-on-write.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Float scalar usable by the autodiff engine. `f32` drives training,
/// `f64` drives finite-difference gradient checking.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Convert an `f64` constant into the active float type.
#[inline]
pub fn c<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("f64 constant representable in float type")
}

/// A dense tensor: shape plus a shared row-major buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    /// Build a tensor, checking that the buffer length matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Structure(format!(
                "tensor shape {:?} implies {} elements, buffer holds {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![F::zero(); n]) }
    }

    /// Constant-filled tensor of the given shape.
    pub fn full(shape: &[usize], value: F) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![value; n]) }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: F) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![value]) }
    }

    /// Rank-1 tensor from a slice.
    pub fn vector(values: &[F]) -> Self {
        Tensor { shape: vec![values.len()], data: Arc::new(values.to_vec()) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size along dimension `i`.
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// Mutable view of the buffer; clones it first if shared.
    pub fn data_mut(&mut self) -> &mut [F] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// The single value of a rank-0 / single-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return Err(Error::Structure(format!(
                "item() requires exactly one element, tensor has shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Same buffer under a new shape with an equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Structure(format!(
                "reshape from {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor { shape, data: Arc::clone(&self.data) })
    }

    /// Element-wise map into a new tensor.
    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        let data: Vec<F> = self.data.iter().map(|&x| f(x)).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    /// Element-wise binary combine; shapes must match exactly.
    pub fn zip(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Structure(format!(
                "elementwise combine on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data: Vec<F> =
            self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data: Arc::new(data) })
    }

    /// Accumulate `other` into `self` in place (shapes must match).
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Structure(format!(
                "gradient accumulation on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let dst = self.data_mut();
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d = *d + *s;
        }
        Ok(())
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Sum of squares of all elements, in f64.
    pub fn sq_norm_f64(&self) -> f64 {
        self.data.iter().map(|x| x.to_f64().unwrap_or(f64::NAN).powi(2)).sum()
    }

    /// Copy with every element converted through f64.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        let data: Vec<G> = self.data.iter().map(|x| c::<G>(x.to_f64().unwrap())).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    /// Build from f64 values, casting into the active float type.
    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        let data: Vec<F> = values.iter().map(|&x| c::<F>(x)).collect();
        Tensor::new(shape, data)
    }

    /// All elements as f64.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
    }
}
