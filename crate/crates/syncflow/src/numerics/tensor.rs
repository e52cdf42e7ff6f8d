//! Dense row-major tensors, generic over the scalar type.
//!
//! All production code uses the `f32` instantiation ([`Tensor`]); `f64`
//! tensors exist for gradient-check oracles.

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::SplitMix64;

/// A dense tensor. `data.len()` always equals the product of `shape`, and
/// every value is finite; both are enforced at construction and after each
/// tape operation.
#[derive(Debug, Clone, PartialEq)]
pub struct GTensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    /// Marks a leaf the tape should differentiate with respect to.
    pub requires_grad: bool,
}

/// The 32-bit working-precision tensor used across the crate.
pub type Tensor = GTensor<f32>;

impl<T: Scalar> GTensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<GTensor<T>> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        ensure_finite(&data, "tensor construction")?;
        Ok(GTensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    /// Construct without the finite check; for internal ops that already
    /// validated their output.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> GTensor<T> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        GTensor {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> GTensor<T> {
        let n = shape.iter().product();
        GTensor::from_parts(shape.to_vec(), vec![T::ZERO; n])
    }

    pub fn full(shape: &[usize], value: T) -> GTensor<T> {
        let n = shape.iter().product();
        GTensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: T) -> GTensor<T> {
        GTensor::from_parts(vec![], vec![value])
    }

    /// I.i.d. draws from Normal(0, std^2). Values are drawn at f32
    /// precision and widened, so the f32 and f64 instantiations of a model
    /// share bit-identical parameter values.
    pub fn randn(shape: &[usize], std: f32, rng: &mut SplitMix64) -> GTensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f32(rng.normal() * std)).collect();
        GTensor::from_parts(shape.to_vec(), data)
    }

    pub fn with_grad(mut self) -> GTensor<T> {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor with {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<GTensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(GTensor {
            shape,
            data: self.data.clone(),
            requires_grad: self.requires_grad,
        })
    }

    /// Stack equal-shaped tensors along a new leading axis.
    pub fn stack(items: &[&GTensor<T>]) -> Result<GTensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack of zero tensors".to_string()))?;
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for t in items {
            if t.shape() != first.shape() {
                return Err(Error::shape(format!(
                    "stack shape mismatch: {:?} vs {:?}",
                    t.shape(),
                    first.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        Ok(GTensor::from_parts(shape, data))
    }

    /// Elementwise check used in tests and overall health asserts.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &GTensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::ZERO, |m, v| m.maximum(v))
    }

    /// Widen to f64 (lossless).
    pub fn widen(&self) -> GTensor<f64> {
        GTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f64()).collect(),
            requires_grad: self.requires_grad,
        }
    }
}

impl Tensor {
    /// Bitwise equality, distinct from approximate `PartialEq` on floats.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Errors out when any value is NaN or infinite.
pub(crate) fn ensure_finite<T: Scalar>(data: &[T], context: &str) -> Result<()> {
    if let Some(idx) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::numerical(format!(
            "non-finite value {} at index {idx} in {context}",
            data[idx]
        )));
    }
    Ok(())
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_rejected() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Tensor::new(vec![2], vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![f32::INFINITY, 0.0]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, -2.0]).is_ok());
    }

    #[test]
    fn ensure_finite_catches_all_positions() {
        let mut v = vec![0.0f32; 100];
        v[99] = f32::NEG_INFINITY;
        assert!(ensure_finite(&v, "test").is_err());
        v[99] = 1.0;
        assert!(ensure_finite(&v, "test").is_ok());
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
        assert_eq!(strides(&[]), Vec::<usize>::new());
    }

    #[test]
    fn randn_deterministic_and_widen_lossless() {
        let mut a = SplitMix64::new(9);
        let mut b = SplitMix64::new(9);
        let x: Tensor = Tensor::randn(&[4, 4], 0.02, &mut a);
        let y: GTensor<f64> = GTensor::randn(&[4, 4], 0.02, &mut b);
        assert!(x.bit_eq(&{
            let mut c = SplitMix64::new(9);
            Tensor::randn(&[4, 4], 0.02, &mut c)
        }));
        for (xa, ya) in x.data().iter().zip(y.data()) {
            assert_eq!(xa.to_f64(), *ya);
        }
        let w = x.widen();
        for (xa, wa) in x.data().iter().zip(w.data()) {
            assert_eq!(xa.to_f64(), *wa);
        }
    }
}
