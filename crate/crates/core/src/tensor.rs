//! Dense row-major tensor value type.
//!
//! `Tensor` is plain data: shape, elements, and an optional gradient buffer.
//! Differentiable computation happens on a [`crate::tape::Tape`], which owns
//! one `Tensor` per recorded node. Long-lived parameters are also `Tensor`s;
//! they are copied onto a tape at the start of each step.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    /// Standard-normal fill. Samples are drawn in f64 and narrowed, so f32
    /// and f64 tensors built from the same RNG state agree up to rounding.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| S::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<S>>) {
        debug_assert!(grad.as_ref().map_or(true, |g| g.len() == self.data.len()));
        self.grad = grad;
    }

    /// Accumulates `delta` into the gradient buffer, allocating it on first
    /// touch. Tensors not tracked for gradients are left untouched.
    pub fn accumulate_grad(&mut self, delta: &[S]) {
        if !self.requires_grad {
            return;
        }
        let grad = self.grad.get_or_insert_with(|| vec![S::zero(); self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts element-wise to another scalar type. Gradients do not carry over.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&x| T::from_f64(x.to_f64())).collect();
        Tensor { shape: self.shape.clone(), data, requires_grad: self.requires_grad, grad: None }
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
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
    fn shape_data_mismatch_is_an_error() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn untracked_tensor_never_accumulates() {
        let mut t = Tensor::<f32>::zeros(vec![2]);
        t.accumulate_grad(&[1.0, 1.0]);
        assert!(t.grad().is_none());
    }

    #[test]
    fn grad_accumulates_when_tracked() {
        let mut t = Tensor::<f32>::zeros(vec![2]).with_grad();
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
    }

    #[test]
    fn randn_is_deterministic_in_seed() {
        use rand::SeedableRng;
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f32>::randn(vec![16], 1.0, &mut r1);
        let b = Tensor::<f32>::randn(vec![16], 1.0, &mut r2);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
        assert!(strides(&[]).is_empty());
    }
}
