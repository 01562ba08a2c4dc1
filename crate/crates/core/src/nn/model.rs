//! CNN classifier description, parameters and forward pass.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::quant::{Bits, QuantSpec};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Convolutions are always 3×3, stride 1, padding 1.
pub const CONV_KERNEL: usize = 3;
pub const CONV_PADDING: usize = 1;
/// Pooling is always 2×2 non-overlapping.
pub const POOL_WINDOW: usize = 2;

/// One entry of an architecture description.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { out_channels: usize },
    Activation,
    MaxPool,
    Dense { out_features: usize },
}

/// Ordered layer list, written as e.g. `conv:16,act,pool,dense:8`.
///
/// The feature map is flattened implicitly before the first dense layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Three `conv → act → pool` blocks (16/32/64 channels), then
    /// `dense(128) → act → dense(num_classes)`.
    pub fn default_cnn(num_classes: usize) -> Self {
        use LayerSpec::*;
        let mut layers = Vec::new();
        for ch in [16, 32, 64] {
            layers.extend([Conv { out_channels: ch }, Activation, MaxPool]);
        }
        layers.extend([
            Dense { out_features: 128 },
            Activation,
            Dense {
                out_features: num_classes,
            },
        ]);
        Self { layers }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            match l {
                LayerSpec::Conv { out_channels } => write!(f, "conv:{out_channels}")?,
                LayerSpec::Activation => f.write_str("act")?,
                LayerSpec::MaxPool => f.write_str("pool")?,
                LayerSpec::Dense { out_features } => write!(f, "dense:{out_features}")?,
            }
        }
        Ok(())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |tok: &str| Error::InvalidArgument(format!("bad architecture token {tok:?}"));
        let size = |tok: &str, v: &str| -> Result<usize> {
            v.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| bad(tok))
        };
        let layers = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|tok| match tok.split_once(':') {
                Some(("conv", n)) => Ok(LayerSpec::Conv {
                    out_channels: size(tok, n)?,
                }),
                Some(("dense", n)) => Ok(LayerSpec::Dense {
                    out_features: size(tok, n)?,
                }),
                None if tok == "act" => Ok(LayerSpec::Activation),
                None if tok == "pool" => Ok(LayerSpec::MaxPool),
                _ => Err(bad(tok)),
            })
            .collect::<Result<Vec<_>>>()?;
        if layers.is_empty() {
            return Err(Error::InvalidArgument("empty architecture".into()));
        }
        Ok(Self { layers })
    }
}

/// Shape of a single input image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn square(channels: usize, side: usize) -> Self {
        Self {
            channels,
            height: side,
            width: side,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Nonlinearity used at every `act` position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    /// Clip to a learnable `[0, α]`.
    Pact,
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Pact => "pact",
        })
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "pact" => Ok(Self::Pact),
            _ => Err(Error::InvalidArgument(format!("unknown activation {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv { weight: Tensor, bias: Tensor },
    Activation { alpha: f32 },
    MaxPool,
    Dense { weight: Tensor, bias: Tensor },
}

/// A CNN classifier with float master parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    input: InputShape,
    num_classes: usize,
    activation: ActivationKind,
    quant: Option<QuantSpec>,
    layers: Vec<Layer>,
}

/// Tape handles for one model's parameters.
#[derive(Debug, Clone)]
pub struct BoundModel {
    layers: Vec<BoundLayer>,
}

#[derive(Debug, Clone, Copy)]
enum BoundLayer {
    Conv { weight: Var, bias: Var },
    Activation { alpha: Var },
    MaxPool,
    Dense { weight: Var, bias: Var },
}

impl BoundModel {
    /// Weight and bias handles in declaration order.
    pub fn params(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| match *l {
                BoundLayer::Conv { weight, bias } | BoundLayer::Dense { weight, bias } => {
                    vec![weight, bias]
                }
                _ => vec![],
            })
            .collect()
    }

    /// Clipping-level handles, one per activation layer.
    pub fn alphas(&self) -> Vec<Var> {
        self.layers
            .iter()
            .filter_map(|l| match *l {
                BoundLayer::Activation { alpha } => Some(alpha),
                _ => None,
            })
            .collect()
    }
}

/// Per-layer output shapes `[C, H, W]` or `[F]`, validating compatibility.
fn infer_shapes(
    arch: &Architecture,
    input: InputShape,
    num_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    let invalid = |msg: String| Error::InvalidArgument(format!("architecture {arch}: {msg}"));
    let mut cur = input.dims().to_vec();
    let mut shapes = Vec::with_capacity(arch.layers.len());
    for (i, l) in arch.layers.iter().enumerate() {
        cur = match *l {
            LayerSpec::Conv { out_channels } => {
                if cur.len() != 3 {
                    return Err(invalid(format!("conv at position {i} after flatten")));
                }
                vec![out_channels, cur[1], cur[2]]
            }
            LayerSpec::MaxPool => {
                if cur.len() != 3 || !cur[1].is_multiple_of(POOL_WINDOW) || !cur[2].is_multiple_of(POOL_WINDOW) {
                    return Err(invalid(format!("pool at position {i} on map {cur:?}")));
                }
                vec![cur[0], cur[1] / POOL_WINDOW, cur[2] / POOL_WINDOW]
            }
            LayerSpec::Activation => cur,
            LayerSpec::Dense { out_features } => vec![out_features],
        };
        shapes.push(cur.clone());
    }
    match arch.layers.last() {
        Some(LayerSpec::Dense { out_features }) if *out_features == num_classes => Ok(shapes),
        _ => Err(invalid(format!("must end in dense:{num_classes}"))),
    }
}

impl Model {
    /// He-uniform weights, zero biases and `alpha_init` at every activation.
    pub fn new(
        arch: Architecture,
        input: InputShape,
        num_classes: usize,
        activation: ActivationKind,
        alpha_init: f32,
        seed: u64,
    ) -> Result<Self> {
        if !(alpha_init > 0.0 && alpha_init.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "initial α must be positive, got {alpha_init}"
            )));
        }
        let shapes = infer_shapes(&arch, input, num_classes)?;
        let mut rng = rng::stream(seed, &[rng::purpose::INIT]);
        let mut prev: Vec<usize> = input.dims().to_vec();
        let mut layers = Vec::with_capacity(arch.layers.len());
        for (spec, out_shape) in arch.layers.iter().zip(&shapes) {
            let layer = match *spec {
                LayerSpec::Conv { out_channels } => {
                    let shape = [out_channels, prev[0], CONV_KERNEL, CONV_KERNEL];
                    let fan_in = prev[0] * CONV_KERNEL * CONV_KERNEL;
                    Layer::Conv {
                        weight: he_uniform(&shape, fan_in, &mut rng),
                        bias: Tensor::zeros([out_channels]),
                    }
                }
                LayerSpec::Dense { out_features } => {
                    let fan_in: usize = prev.iter().product();
                    Layer::Dense {
                        weight: he_uniform(&[fan_in, out_features], fan_in, &mut rng),
                        bias: Tensor::zeros([out_features]),
                    }
                }
                LayerSpec::Activation => Layer::Activation { alpha: alpha_init },
                LayerSpec::MaxPool => Layer::MaxPool,
            };
            layers.push(layer);
            prev.clone_from(out_shape);
        }
        Ok(Self {
            arch,
            input,
            num_classes,
            activation,
            quant: None,
            layers,
        })
    }

    /// Assembles a model from stored parts, validating every shape.
    pub fn from_parts(
        arch: Architecture,
        input: InputShape,
        num_classes: usize,
        activation: ActivationKind,
        quant: Option<QuantSpec>,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        let template = Self::new(arch, input, num_classes, activation, 1.0, 0)?;
        if layers.len() != template.layers.len() {
            return Err(Error::InvalidArgument(
                "layer count does not match architecture".into(),
            ));
        }
        for (i, (a, b)) in layers.iter().zip(&template.layers).enumerate() {
            let ok = match (a, b) {
                (
                    Layer::Conv { weight, bias },
                    Layer::Conv {
                        weight: w2,
                        bias: b2,
                    },
                )
                | (
                    Layer::Dense { weight, bias },
                    Layer::Dense {
                        weight: w2,
                        bias: b2,
                    },
                ) => weight.shape() == w2.shape() && bias.shape() == b2.shape(),
                (Layer::Activation { alpha }, Layer::Activation { .. }) => *alpha > 0.0,
                (Layer::MaxPool, Layer::MaxPool) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "layer {i} does not match architecture"
                )));
            }
        }
        Ok(Self { layers, ..template }.with_quant(quant))
    }

    pub fn with_quant(mut self, quant: Option<QuantSpec>) -> Self {
        self.quant = quant;
        self
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_shape(&self) -> InputShape {
        self.input
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn quant(&self) -> Option<QuantSpec> {
        self.quant
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Weight and bias tensors in declaration order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Conv { weight, bias } | Layer::Dense { weight, bias } => vec![weight, bias],
                _ => vec![],
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                Layer::Conv { weight, bias } | Layer::Dense { weight, bias } => vec![weight, bias],
                _ => vec![],
            })
            .collect()
    }

    pub fn alphas(&self) -> Vec<f32> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Activation { alpha } => Some(*alpha),
                _ => None,
            })
            .collect()
    }

    pub fn alphas_mut(&mut self) -> Vec<&mut f32> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Activation { alpha } => Some(alpha),
                _ => None,
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Records every parameter as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<BoundModel> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(match l {
                    Layer::Conv { weight, bias } => BoundLayer::Conv {
                        weight: tape.leaf(weight.clone(), requires_grad)?,
                        bias: tape.leaf(bias.clone(), requires_grad)?,
                    },
                    Layer::Dense { weight, bias } => BoundLayer::Dense {
                        weight: tape.leaf(weight.clone(), requires_grad)?,
                        bias: tape.leaf(bias.clone(), requires_grad)?,
                    },
                    Layer::Activation { alpha } => BoundLayer::Activation {
                        alpha: tape.leaf(
                            Tensor::scalar(*alpha),
                            requires_grad && self.activation == ActivationKind::Pact,
                        )?,
                    },
                    Layer::MaxPool => BoundLayer::MaxPool,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundModel { layers })
    }

    fn weight_bits(&self) -> Option<Bits> {
        self.quant.filter(|q| q.quantize_weights).map(|q| q.bits)
    }

    fn activation_bits(&self) -> Option<Bits> {
        self.quant
            .filter(|q| q.quantize_activations)
            .map(|q| q.bits)
    }

    /// Records the forward pass of a `[N, C, H, W]` batch; returns `[N, classes]` logits.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundModel, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 4 || shape[1..] != self.input.dims() {
            return Err(Error::shape(
                "model",
                format!(
                    "input {shape:?} does not match [N, {:?}]",
                    self.input.dims()
                ),
            ));
        }
        let wbits = self.weight_bits();
        let abits = self.activation_bits();
        let mut h = x;
        let mut flat = false;
        for layer in &bound.layers {
            h = match *layer {
                BoundLayer::Conv { weight, bias } => {
                    let w = match wbits {
                        Some(k) => tape.weight_quant(weight, k)?,
                        None => weight,
                    };
                    tape.conv2d(h, w, Some(bias), 1, CONV_PADDING)?
                }
                BoundLayer::Activation { alpha } => match self.activation {
                    ActivationKind::Relu => tape.relu(h)?,
                    ActivationKind::Pact => tape.pact(h, alpha, abits)?,
                },
                BoundLayer::MaxPool => tape.maxpool2d(h, POOL_WINDOW)?,
                BoundLayer::Dense { weight, bias } => {
                    if !flat {
                        h = tape.flatten(h)?;
                        flat = true;
                    }
                    let w = match wbits {
                        Some(k) => tape.weight_quant(weight, k)?,
                        None => weight,
                    };
                    tape.dense(h, w, bias)?
                }
            };
        }
        Ok(h)
    }

    /// Inference logits for a `[N, C, H, W]` batch.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let out = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Arg-max class per sample, evaluated in chunks of `chunk` samples.
    pub fn predict(&self, x: &Tensor, chunk: usize) -> Result<Vec<usize>> {
        let n = x.shape()[0];
        let per = x.len() / n;
        let mut preds = Vec::with_capacity(n);
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let mut shape = x.shape().to_vec();
            shape[0] = end - start;
            let batch = Tensor::new(shape, x.data()[start * per..end * per].to_vec())?;
            let logits = self.logits(&batch)?;
            preds.extend(logits.data().chunks(self.num_classes).map(argmax));
        }
        Ok(preds)
    }
}

/// Index of the first maximal element.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}
