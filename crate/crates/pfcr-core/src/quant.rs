//! Uniform and power-of-two fake-quantizers with min/max calibration.
//!
//! Weights use channel-wise uniform quantization, activations use layer-wise
//! uniform quantization, and post-softmax probabilities use the log2 scheme.
//! Every quantizer's scale is a trainable leaf once placed on a tape;
//! zero-points stay fixed after calibration.

use crate::tensor::{Scalar, Tape, Tensor, TensorId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Scale fallback when the calibrated range collapses to a point.
pub const DEGENERATE_SCALE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("cannot calibrate an empty tensor")]
    EmptyInput,
    #[error("per-channel axis {axis} out of range for shape {shape:?}")]
    BadAxis { axis: usize, shape: Vec<usize> },
    #[error("invalid quantizer spec: {0}")]
    BadSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Uniform,
    Log2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerChannel { axis: usize },
    PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    Activation,
    PostSoftmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub scheme: Scheme,
    pub granularity: Granularity,
    pub role: Role,
}

impl QuantSpec {
    pub fn weight(bits: u32) -> Self {
        QuantSpec { bits, scheme: Scheme::Uniform, granularity: Granularity::PerChannel { axis: 1 }, role: Role::Weight }
    }

    pub fn activation(bits: u32) -> Self {
        QuantSpec { bits, scheme: Scheme::Uniform, granularity: Granularity::PerLayer, role: Role::Activation }
    }

    pub fn post_softmax(bits: u32) -> Self {
        QuantSpec { bits, scheme: Scheme::Log2, granularity: Granularity::PerLayer, role: Role::PostSoftmax }
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if self.bits < 2 {
            return Err(QuantError::BadSpec(format!("bits must be >= 2, got {}", self.bits)));
        }
        match self.role {
            Role::PostSoftmax if self.scheme != Scheme::Log2 => {
                Err(QuantError::BadSpec("post-softmax role requires the log2 scheme".into()))
            }
            Role::Weight if !matches!(self.granularity, Granularity::PerChannel { .. }) => {
                Err(QuantError::BadSpec("weight role requires per-channel granularity".into()))
            }
            Role::Activation if self.granularity != Granularity::PerLayer => {
                Err(QuantError::BadSpec("activation role requires per-layer granularity".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn qmax(&self) -> u64 {
        (1u64 << self.bits) - 1
    }
}

/// Calibrated scale/zero-point state. `scale` and `zero_point` have one entry
/// per channel (per-layer quantizers hold a single entry); zero-points are
/// integral and empty for the log2 scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams<S: Scalar> {
    pub scale: Vec<S>,
    pub zero_point: Vec<S>,
    pub bits: u32,
}

/// A spec plus its calibrated parameters, attachable to a tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer<S: Scalar> {
    pub spec: QuantSpec,
    pub params: QuantParams<S>,
}

fn calibrate_slice<S: Scalar>(values: impl Iterator<Item = S>, bits: u32) -> (S, S) {
    let mut lo = S::infinity();
    let mut hi = S::neg_infinity();
    for v in values {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    uniform_params_from_range(lo, hi, bits)
}

/// Scale/zero-point from an observed `[lo, hi]` range; collapsed ranges fall
/// back to the degenerate scale. The range is widened to include zero so the
/// integer zero-point always lands inside `[0, 2^b - 1]` and the round-trip
/// error stays within half a step everywhere in the range.
pub fn uniform_params_from_range<S: Scalar>(lo: S, hi: S, bits: u32) -> (S, S) {
    let qmax = S::from_f64(((1u64 << bits) - 1) as f64);
    if hi == lo {
        return (S::from_f64(DEGENERATE_SCALE), S::zero());
    }
    let lo = lo.min(S::zero());
    let hi = hi.max(S::zero());
    let scale = (hi - lo) / qmax;
    let z = (-(lo / scale)).round_half_even().max(S::zero()).min(qmax);
    (scale, z)
}

/// Calibrated parameters from a recorded activation range.
pub fn params_from_range<S: Scalar>(lo: S, hi: S, spec: &QuantSpec) -> QuantParams<S> {
    match spec.scheme {
        Scheme::Log2 => {
            let scale = if hi > S::zero() { hi } else { S::from_f64(DEGENERATE_SCALE) };
            QuantParams { scale: vec![scale], zero_point: vec![], bits: spec.bits }
        }
        Scheme::Uniform => {
            let (s, z) = uniform_params_from_range(lo, hi, spec.bits);
            QuantParams { scale: vec![s], zero_point: vec![z], bits: spec.bits }
        }
    }
}

/// Min/max calibration over `x` according to the spec's scheme and
/// granularity. A collapsed range falls back to the degenerate scale.
pub fn calibrate_minmax<S: Scalar>(x: &Tensor<S>, spec: &QuantSpec) -> Result<QuantParams<S>, QuantError> {
    if x.data.is_empty() {
        return Err(QuantError::EmptyInput);
    }
    spec.validate()?;
    match (spec.scheme, spec.granularity) {
        (Scheme::Log2, _) => {
            let (_, hi) = x.min_max();
            let scale = if hi > S::zero() { hi } else { S::from_f64(DEGENERATE_SCALE) };
            Ok(QuantParams { scale: vec![scale], zero_point: vec![], bits: spec.bits })
        }
        (Scheme::Uniform, Granularity::PerLayer) => {
            let (s, z) = calibrate_slice(x.data.iter().copied(), spec.bits);
            Ok(QuantParams { scale: vec![s], zero_point: vec![z], bits: spec.bits })
        }
        (Scheme::Uniform, Granularity::PerChannel { axis }) => {
            if axis >= x.shape.len() {
                return Err(QuantError::BadAxis { axis, shape: x.shape.clone() });
            }
            let channels = x.shape[axis];
            let stride: usize = x.shape[axis + 1..].iter().product();
            let mut scale = Vec::with_capacity(channels);
            let mut zero_point = Vec::with_capacity(channels);
            for ch in 0..channels {
                let values = x
                    .data
                    .iter()
                    .enumerate()
                    .filter(move |(i, _)| (i / stride) % channels == ch)
                    .map(|(_, &v)| v);
                let (s, z) = calibrate_slice(values, spec.bits);
                scale.push(s);
                zero_point.push(z);
            }
            Ok(QuantParams { scale, zero_point, bits: spec.bits })
        }
    }
}

fn channel_of(index: usize, shape: &[usize], axis: Option<usize>) -> usize {
    match axis {
        None => 0,
        Some(ax) => {
            let stride: usize = shape[ax + 1..].iter().product();
            (index / stride) % shape[ax]
        }
    }
}

fn axis_of(granularity: Granularity) -> Option<usize> {
    match granularity {
        Granularity::PerChannel { axis } => Some(axis),
        Granularity::PerLayer => None,
    }
}

/// Maps values onto the integer grid `[0, 2^b - 1]`.
pub fn quantize_uniform<S: Scalar>(x: &Tensor<S>, p: &QuantParams<S>, axis: Option<usize>) -> Tensor<S> {
    let qmax = S::from_f64(((1u64 << p.bits) - 1) as f64);
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = channel_of(i, &x.shape, axis);
            ((v / p.scale[ch]).round_half_even() + p.zero_point[ch]).max(S::zero()).min(qmax)
        })
        .collect();
    Tensor::new(x.shape.clone(), data)
}

pub fn dequantize_uniform<S: Scalar>(codes: &Tensor<S>, p: &QuantParams<S>, axis: Option<usize>) -> Tensor<S> {
    let data = codes
        .data
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let ch = channel_of(i, &codes.shape, axis);
            p.scale[ch] * (c - p.zero_point[ch])
        })
        .collect();
    Tensor::new(codes.shape.clone(), data)
}

/// Maps non-negative values onto power-of-two codes; zero takes the largest
/// code (the smallest representable magnitude).
pub fn quantize_log2<S: Scalar>(x: &Tensor<S>, p: &QuantParams<S>) -> Tensor<S> {
    let qmax = S::from_f64(((1u64 << p.bits) - 1) as f64);
    let s = p.scale[0];
    let data = x
        .data
        .iter()
        .map(|&v| {
            if v <= S::zero() {
                qmax
            } else {
                (-(v / s).log2()).round_half_even().max(S::zero()).min(qmax)
            }
        })
        .collect();
    Tensor::new(x.shape.clone(), data)
}

pub fn dequantize_log2<S: Scalar>(codes: &Tensor<S>, p: &QuantParams<S>) -> Tensor<S> {
    let s = p.scale[0];
    let data = codes.data.iter().map(|&c| s * S::from_f64(f64::exp2(-c.to_f64()))).collect();
    Tensor::new(codes.shape.clone(), data)
}

impl<S: Scalar> Quantizer<S> {
    pub fn calibrated(spec: QuantSpec, x: &Tensor<S>) -> Result<Self, QuantError> {
        let params = calibrate_minmax(x, &spec)?;
        Ok(Quantizer { spec, params })
    }

    pub fn quantize(&self, x: &Tensor<S>) -> Tensor<S> {
        match self.spec.scheme {
            Scheme::Uniform => quantize_uniform(x, &self.params, axis_of(self.spec.granularity)),
            Scheme::Log2 => quantize_log2(x, &self.params),
        }
    }

    pub fn dequantize(&self, codes: &Tensor<S>) -> Tensor<S> {
        match self.spec.scheme {
            Scheme::Uniform => dequantize_uniform(codes, &self.params, axis_of(self.spec.granularity)),
            Scheme::Log2 => dequantize_log2(codes, &self.params),
        }
    }

    /// Quantize-dequantize without touching a tape.
    pub fn fake_quant_value(&self, x: &Tensor<S>) -> Tensor<S> {
        self.dequantize(&self.quantize(x))
    }

    /// Records the differentiable quantize-dequantize on `tape`. The scale
    /// enters as its own leaf; pass `trainable` to request its gradient.
    pub fn fake_quant(&self, tape: &mut Tape<S>, x: TensorId, trainable: bool) -> (TensorId, TensorId) {
        let mut scale = Tensor::new(vec![self.params.scale.len()], self.params.scale.clone());
        scale.requires_grad = trainable;
        let scale_id = tape.leaf(scale);
        let out = match self.spec.scheme {
            Scheme::Uniform => tape.fake_quant_uniform(
                x,
                scale_id,
                &self.params.zero_point,
                self.spec.bits,
                axis_of(self.spec.granularity),
            ),
            Scheme::Log2 => tape.fake_quant_log2(x, scale_id, self.spec.bits),
        };
        (out, scale_id)
    }
}
