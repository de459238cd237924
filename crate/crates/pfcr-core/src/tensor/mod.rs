//! Dense tensors with a reverse-mode gradient tape.
//!
//! Forward computation runs in `f32` in production paths; gradient-check
//! tests instantiate the same code at `f64`.

mod optim;
mod tape;

pub use optim::{adam_step, cosine_lr, Adam, AdamState};
pub use tape::{Op, Tape, TensorId};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Floating-point element type for tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Round to nearest integer, ties to even.
    fn round_half_even(self) -> Self;
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn round_half_even(self) -> Self {
        self.round_ties_even()
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn round_half_even(self) -> Self {
        self.round_ties_even()
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Dense row-major tensor. `grad`, when present, has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![S::zero(); n])
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n])
    }

    pub fn scalar(value: S) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Self {
        Tensor::new(shape, values.iter().map(|&v| S::from_f64(v)).collect())
    }

    /// Samples from N(0, std), redrawing values outside two standard deviations.
    pub fn trunc_normal(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            // Box-Muller; pairs are drawn independently.
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                data.push(S::from_f64(z * std));
            }
        }
        Tensor::new(shape, data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn min_max(&self) -> (S, S) {
        assert!(!self.data.is_empty(), "min_max of empty tensor");
        let mut lo = self.data[0];
        let mut hi = self.data[0];
        for &v in &self.data[1..] {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }

    /// Converts element type; used when moving f32 checkpoints into f64 tests.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn shape_data_mismatch_panics() {
        let _ = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn trunc_normal_is_deterministic_and_bounded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f32>::trunc_normal(vec![64], 0.02, &mut r1);
        let b = Tensor::<f32>::trunc_normal(vec![64], 0.02, &mut r2);
        assert_eq!(a.data, b.data);
        assert!(a.data.iter().all(|v| v.abs() <= 0.04 + 1e-7));
    }

    #[test]
    fn round_half_even_ties() {
        assert_eq!(2.5f32.round_half_even(), 2.0);
        assert_eq!(3.5f32.round_half_even(), 4.0);
        assert_eq!((-2.5f64).round_half_even(), -2.0);
    }
}
