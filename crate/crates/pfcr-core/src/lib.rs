//! Post-training quantization toolkit for small vision transformers.
//!
//! The crate is organized around a minimal reverse-mode autodiff engine
//! ([`tensor`]), fake-quantizers with straight-through gradients ([`quant`]),
//! a configurable toy ViT ([`vit`]), a fine-to-coarse reconstruction engine
//! ([`recon`]), the two-stage progressive optimization driver ([`pos`]), and
//! an experiment harness ([`harness`]) covering datasets, baseline training,
//! evaluation, checkpoints, reports, and ablation suites.

pub mod gradcheck;
pub mod harness;
pub mod pos;
pub mod quant;
pub mod recon;
pub mod tensor;
pub mod vit;

pub use tensor::{Scalar, Tensor};
