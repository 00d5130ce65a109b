//! Dense tensors and the reverse-mode tape.
//!
//! Training runs in `f32`; the same code instantiates with `f64` for
//! tighter gradient-check tolerances.

mod params;
mod tape;

pub use params::{read_fpm, write_fpm, ModelParams, Param, FPM_MAGIC};
pub use tape::{Tape, TensorId};

use crate::error::{Error, Result};

/// Scalar type the engine is generic over.
pub trait Real:
    num_traits::Float + From<f32> + Into<f64> + Default + std::fmt::Debug + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Lift an `f32` constant into the working scalar type.
#[inline]
pub fn real<R: Real>(v: f32) -> R {
    <R as From<f32>>::from(v)
}

/// Sum in a canonical (bit-ordered) sequence so the result does not depend
/// on how the inputs were laid out. Needed where a reduction must be exactly
/// invariant under spatial permutations such as flips.
pub fn canonical_sum<R: Real>(vals: &[R]) -> R {
    let mut sorted: Vec<R> = vals.to_vec();
    sorted.sort_unstable_by(|a, b| {
        let fa: f64 = (*a).into();
        let fb: f64 = (*b).into();
        fa.total_cmp(&fb)
    });
    let mut acc = R::zero();
    for v in sorted {
        acc = acc + v;
    }
    acc
}

/// Dense n-dimensional array, row-major. A rank-0 shape holds one scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R> {
    pub shape: Vec<usize>,
    pub data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![R::zero(); numel] }
    }

    pub fn filled(shape: &[usize], v: R) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; numel] }
    }

    pub fn scalar(v: R) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| real(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True when this tensor holds exactly one value.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> R {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v.into()).collect(),
        }
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| {
                    let f: f64 = v.into();
                    <S as num_traits::NumCast>::from(f).unwrap()
                })
                .collect(),
        }
    }
}
