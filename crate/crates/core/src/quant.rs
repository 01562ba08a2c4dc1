//! PACT clipped activations, k-bit fake quantization and low-bit weight packing.
//!
//! Activations are clipped to `[0, α]` and snapped to `2^k` uniformly spaced
//! levels. Weights use a symmetric per-tensor grid with `2^(k-1) - 1`
//! positive levels. Rounding is half away from zero everywhere. Backward
//! passes treat rounding as the identity (straight-through estimator).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Layer, Model};
use crate::tensor::Tensor;

/// A validated bit width in `2..=8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Bits(u8);

impl Bits {
    pub const MIN: u8 = 2;
    pub const MAX: u8 = 8;

    pub fn new(k: u32) -> Result<Self> {
        if (Self::MIN as u32..=Self::MAX as u32).contains(&k) {
            Ok(Self(k as u8))
        } else {
            Err(Error::InvalidArgument(format!(
                "bit width {k} outside [{}, {}]",
                Self::MIN,
                Self::MAX
            )))
        }
    }

    pub fn get(self) -> u32 {
        self.0 as u32
    }

    /// Highest activation code, `2^k - 1`.
    pub fn activation_levels(self) -> f32 {
        ((1u32 << self.0) - 1) as f32
    }

    /// Largest weight code magnitude, `2^(k-1) - 1`.
    pub fn weight_qmax(self) -> f32 {
        ((1u32 << (self.0 - 1)) - 1) as f32
    }
}

impl fmt::Display for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for Bits {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let k: u32 = s
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad bit width {s:?}")))?;
        Bits::new(k)
    }
}

/// How a model is quantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantSpec {
    pub bits: Bits,
    /// Fake-quantize conv/dense weights (symmetric per-tensor). Biases never are.
    pub quantize_weights: bool,
    /// Snap PACT outputs to the `2^k`-level grid.
    pub quantize_activations: bool,
}

impl QuantSpec {
    /// Weights and activations at `bits`, as used for quantization-aware training.
    pub fn full(bits: Bits) -> Self {
        Self {
            bits,
            quantize_weights: true,
            quantize_activations: true,
        }
    }

    /// Weights only, as produced by post-training quantization.
    pub fn weights_only(bits: Bits) -> Self {
        Self {
            bits,
            quantize_weights: true,
            quantize_activations: false,
        }
    }
}

/// Smallest value α may take after an update.
pub const ALPHA_FLOOR: f32 = 1e-3;

/// Default initial clipping level for every PACT layer.
pub const DEFAULT_ALPHA_INIT: f32 = 6.0;

/// Clipping-level state for one PACT layer together with its update rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PactParams {
    pub alpha: f32,
    pub alpha_lr: f32,
    pub alpha_reg: f32,
}

fn check_alpha(alpha: f32) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "PACT clip α must be positive, got {alpha}"
        )))
    }
}

#[inline]
pub(crate) fn pact_clip(x: f32, alpha: f32) -> f32 {
    if x < 0.0 {
        0.0
    } else if x < alpha {
        x
    } else {
        alpha
    }
}

#[inline]
pub(crate) fn quantize_level(y: f32, alpha: f32, levels: f32) -> f32 {
    let code = (y * levels / alpha).round();
    if code >= levels {
        alpha
    } else {
        code * (alpha / levels)
    }
}

/// Elementwise clip to `[0, α]`.
pub fn pact_forward(x: &Tensor, alpha: f32) -> Result<Tensor> {
    check_alpha(alpha)?;
    x.check_finite("pact_forward")?;
    Ok(x.map(|v| pact_clip(v, alpha)))
}

/// Snaps clipped activations onto `2^k` levels spanning `[0, α]`.
pub fn pact_quantize(y: &Tensor, alpha: f32, bits: Bits) -> Result<Tensor> {
    check_alpha(alpha)?;
    y.check_finite("pact_quantize")?;
    let levels = bits.activation_levels();
    Ok(y.map(|v| quantize_level(v, alpha, levels)))
}

/// Straight-through backward for PACT: returns `(dx, dα)`.
///
/// Gradient passes where `0 ≤ x < α` and is routed to α where `x ≥ α`.
pub fn pact_backward(x: &Tensor, alpha: f32, upstream: &Tensor) -> Result<(Tensor, f32)> {
    if x.shape() != upstream.shape() {
        return Err(Error::shape(
            "pact_backward",
            format!("x {:?} vs upstream {:?}", x.shape(), upstream.shape()),
        ));
    }
    let mut dalpha = 0.0f32;
    let mut dx = Vec::with_capacity(x.len());
    for (&xi, &g) in x.data().iter().zip(upstream.data()) {
        if xi >= alpha {
            dalpha += g;
            dx.push(0.0);
        } else if xi >= 0.0 {
            dx.push(g);
        } else {
            dx.push(0.0);
        }
    }
    Ok((Tensor::new(x.shape(), dx)?, dalpha))
}

/// Per-tensor symmetric scale `max|w| / (2^(k-1) - 1)`.
pub fn weight_scale(w: &Tensor, bits: Bits) -> f32 {
    w.max_abs() / bits.weight_qmax()
}

/// Symmetric per-tensor fake quantization of a weight tensor.
///
/// A zero scale (all-zero tensor) returns the input unchanged.
pub fn quantize_weights_qat(w: &Tensor, bits: Bits) -> Tensor {
    let scale = weight_scale(w, bits);
    if scale == 0.0 {
        return w.clone();
    }
    w.map(|v| (v / scale).round() * scale)
}

fn code_range(bits: Bits) -> (i32, i32) {
    let half = 1i32 << (bits.get() - 1);
    (-half, half - 1)
}

/// Packs grid-valued weights as `k`-bit two's complement codes, LSB first
/// within each byte, in flat row-major order; the last byte is zero padded.
pub fn pack_weights(w: &Tensor, bits: Bits, scale: f32) -> Result<Vec<u8>> {
    let k = bits.get() as usize;
    let (lo, hi) = code_range(bits);
    let mut out = vec![0u8; (w.len() * k).div_ceil(8)];
    for (i, &v) in w.data().iter().enumerate() {
        let code = if scale == 0.0 {
            if v != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "pack_weights: element {i} = {v} with zero scale"
                )));
            }
            0i32
        } else {
            let c = (v / scale).round();
            if (v - c * scale).abs() > 1e-6 * v.abs().max(1.0) || c < lo as f32 || c > hi as f32 {
                return Err(Error::InvalidArgument(format!(
                    "pack_weights: element {i} = {v} is not on the {k}-bit grid of scale {scale}"
                )));
            }
            c as i32
        };
        let bits_val = (code as u32) & ((1u32 << k) - 1);
        let pos = i * k;
        let (byte, shift) = (pos / 8, pos % 8);
        let wide = bits_val << shift;
        out[byte] |= wide as u8;
        if shift + k > 8 {
            out[byte + 1] |= (wide >> 8) as u8;
        }
    }
    Ok(out)
}

/// Inverse of [`pack_weights`].
pub fn unpack_weights(bytes: &[u8], shape: &[usize], bits: Bits, scale: f32) -> Result<Tensor> {
    let k = bits.get() as usize;
    let n: usize = shape.iter().product();
    let need = (n * k).div_ceil(8);
    if bytes.len() != need {
        return Err(Error::InvalidArgument(format!(
            "unpack_weights: {} bytes for {n} codes of {k} bits (expected {need})",
            bytes.len()
        )));
    }
    let mask = (1u32 << k) - 1;
    let sign = 1u32 << (k - 1);
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let pos = i * k;
        let (byte, shift) = (pos / 8, pos % 8);
        let mut wide = bytes[byte] as u32;
        if byte + 1 < bytes.len() {
            wide |= (bytes[byte + 1] as u32) << 8;
        }
        let raw = (wide >> shift) & mask;
        let code = if raw & sign != 0 {
            raw as i32 - (1i32 << k)
        } else {
            raw as i32
        };
        data.push(code as f32 * scale);
    }
    Tensor::new(shape.to_vec(), data)
}

/// Post-training quantization: snaps every conv/dense weight tensor to its
/// `k`-bit grid. Biases and clipping levels are left as they are; activation
/// quantization keeps whatever setting the model already had.
pub fn quantize_weights_ptq(model: &Model, bits: Bits) -> Model {
    let activations = model.quant().is_some_and(|q| q.quantize_activations);
    let mut out = model.clone().with_quant(Some(QuantSpec {
        bits,
        quantize_weights: true,
        quantize_activations: activations,
    }));
    for layer in out.layers_mut() {
        if let Layer::Conv { weight, .. } | Layer::Dense { weight, .. } = layer {
            *weight = quantize_weights_qat(weight, bits);
        }
    }
    out
}
