//! `SQCK` checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SQCK" | u16 version = 1 | u32 header_len | header (UTF-8 key=value lines)
//! tensor blobs in declaration order:
//!   f32 tensors:    n × f32
//!   packed tensors: f32 scale, then ⌈n·k/8⌉ bytes of k-bit codes
//! ```
//!
//! Weights are packed whenever the model's quant spec quantizes weights;
//! biases are always stored as f32.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Architecture, InputShape, Layer, Model};
use crate::quant::{self, Bits, QuantSpec};
use crate::train::{Metrics, TrainConfig};

pub const MAGIC: &[u8; 4] = b"SQCK";
pub const VERSION: u16 = 1;

/// A model plus free-form metadata (config echo, metrics, class names).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Encoding {
    F32,
    Packed(Bits),
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_config(mut self, config: &TrainConfig) -> Self {
        for (k, v) in config.to_pairs() {
            self.metadata.insert(format!("config.{k}"), v);
        }
        self
    }

    pub fn with_metrics(mut self, prefix: &str, m: &Metrics) -> Self {
        self.metadata
            .insert(format!("metrics.{prefix}.accuracy"), m.accuracy.to_string());
        self.metadata.insert(
            format!("metrics.{prefix}.sensitivity"),
            m.macro_sensitivity.to_string(),
        );
        self.metadata.insert(
            format!("metrics.{prefix}.specificity"),
            m.macro_specificity.to_string(),
        );
        self
    }

    pub fn with_class_names(mut self, names: &[String]) -> Self {
        self.metadata.insert("class_names".into(), names.join(";"));
        self
    }

    pub fn class_names(&self) -> Option<Vec<String>> {
        self.metadata
            .get("class_names")
            .map(|s| s.split(';').map(str::to_string).collect())
    }

    /// Training config echoed into the header, if present.
    pub fn config(&self) -> Result<Option<TrainConfig>> {
        let mut cfg = TrainConfig::default();
        let mut any = false;
        for (k, v) in &self.metadata {
            if let Some(key) = k.strip_prefix("config.") {
                cfg.set(key, v)?;
                any = true;
            }
        }
        Ok(any.then_some(cfg))
    }

    /// Bit width of packed weights, if weights are stored packed.
    pub fn packed_bits(&self) -> Option<Bits> {
        self.model
            .quant()
            .filter(|q| q.quantize_weights)
            .map(|q| q.bits)
    }

    fn encodings(&self) -> Vec<Encoding> {
        let wbits = self.packed_bits();
        self.model
            .layers()
            .iter()
            .flat_map(|l| match l {
                Layer::Conv { .. } | Layer::Dense { .. } => {
                    vec![wbits.map_or(Encoding::F32, Encoding::Packed), Encoding::F32]
                }
                _ => vec![],
            })
            .collect()
    }

    fn header(&self) -> String {
        let m = &self.model;
        let mut lines = vec![
            format!("arch={}", m.architecture()),
            format!(
                "input={}x{}x{}",
                m.input_shape().channels,
                m.input_shape().height,
                m.input_shape().width
            ),
            format!("classes={}", m.num_classes()),
            format!("activation={}", m.activation()),
            format!(
                "alphas={}",
                m.alphas()
                    .iter()
                    .map(f32::to_string)
                    .collect::<Vec<_>>()
                    .join(",")
            ),
        ];
        if let Some(q) = m.quant() {
            lines.push(format!("quant.bits={}", q.bits));
            lines.push(format!("quant.weights={}", q.quantize_weights));
            lines.push(format!("quant.activations={}", q.quantize_activations));
        }
        for (i, (t, e)) in m.params().iter().zip(self.encodings()).enumerate() {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let enc = match e {
                Encoding::F32 => "f32".to_string(),
                Encoding::Packed(k) => format!("packed{k}"),
            };
            lines.push(format!("tensor.{i:03}={} {enc}", shape.join("x")));
        }
        for (k, v) in &self.metadata {
            lines.push(format!("{k}={}", v.replace('\n', " ")));
        }
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = self.header();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (t, e) in self.model.params().into_iter().zip(self.encodings()) {
            match e {
                Encoding::F32 => {
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Encoding::Packed(k) => {
                    let q = quant::quantize_weights_qat(t, k);
                    let scale = quant::weight_scale(&q, k);
                    out.extend_from_slice(&scale.to_le_bytes());
                    out.extend(quant::pack_weights(&q, k, scale)?);
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic (expected \"SQCK\")".into(),
            });
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let header_len = u32::from_le_bytes(r.array()?) as usize;
        let header_start = r.pos;
        let header = std::str::from_utf8(r.take(header_len)?).map_err(|e| Error::Format {
            offset: header_start + e.valid_up_to(),
            message: "header is not UTF-8".into(),
        })?;
        let parsed = parse_header(header, header_start)?;

        let mut quant = None;
        if let Some(bits) = parsed.fields.get("quant.bits") {
            quant = Some(QuantSpec {
                bits: bits
                    .parse()
                    .map_err(|e: Error| parsed.err("quant.bits", e.to_string()))?,
                quantize_weights: parsed.boolean("quant.weights")?,
                quantize_activations: parsed.boolean("quant.activations")?,
            });
        }
        let arch: Architecture = parsed
            .get("arch")?
            .parse()
            .map_err(|e: Error| parsed.err("arch", e.to_string()))?;
        let dims: Vec<usize> = parsed
            .get("input")?
            .split('x')
            .map(|d| d.parse().map_err(|_| parsed.err("input", "bad dimension")))
            .collect::<Result<_>>()?;
        let [channels, height, width] = dims[..] else {
            return Err(parsed.err("input", "expected CxHxW"));
        };
        let classes: usize = parsed
            .get("classes")?
            .parse()
            .map_err(|_| parsed.err("classes", "not a number"))?;
        let activation = parsed
            .get("activation")?
            .parse()
            .map_err(|e: Error| parsed.err("activation", e.to_string()))?;
        let alphas: Vec<f32> = parsed
            .get("alphas")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| parsed.err("alphas", "bad value")))
            .collect::<Result<_>>()?;

        // Build a template to learn the tensor order and shapes, then fill it.
        let input = InputShape {
            channels,
            height,
            width,
        };
        let template = Model::new(arch.clone(), input, classes, activation, 1.0, 0)
            .map_err(|e| parsed.err("arch", e.to_string()))?;
        let mut ckpt = Checkpoint::new(template.with_quant(quant));
        let encodings = ckpt.encodings();
        let mut tensors = Vec::with_capacity(encodings.len());
        for (i, (t, enc)) in ckpt.model.params().into_iter().zip(&encodings).enumerate() {
            let key = format!("tensor.{i:03}");
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let expect = match enc {
                Encoding::F32 => format!("{} f32", shape.join("x")),
                Encoding::Packed(k) => format!("{} packed{k}", shape.join("x")),
            };
            if parsed.get(&key)? != expect {
                return Err(parsed.err(&key, format!("expected {expect:?}")));
            }
            let n = t.len();
            let loaded = match enc {
                Encoding::F32 => {
                    let raw = r.take(n * 4)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    crate::tensor::Tensor::new(t.shape(), data)?
                }
                Encoding::Packed(k) => {
                    let scale = f32::from_le_bytes(r.array()?);
                    let at = r.pos;
                    let raw = r.take((n * k.get() as usize).div_ceil(8))?;
                    quant::unpack_weights(raw, t.shape(), *k, scale).map_err(|e| Error::Format {
                        offset: at,
                        message: e.to_string(),
                    })?
                }
            };
            if !loaded.is_finite() {
                return Err(Error::Format {
                    offset: r.pos,
                    message: format!("{key} contains non-finite values"),
                });
            }
            tensors.push(loaded);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        for (dst, src) in ckpt.model.params_mut().into_iter().zip(tensors) {
            *dst = src;
        }
        let slots = ckpt.model.alphas_mut();
        if slots.len() != alphas.len() {
            return Err(parsed.err(
                "alphas",
                format!(
                    "{} values for {} activation layers",
                    alphas.len(),
                    slots.len()
                ),
            ));
        }
        for (slot, a) in slots.into_iter().zip(alphas) {
            if !(a > 0.0 && a.is_finite()) {
                return Err(parsed.err("alphas", format!("non-positive α {a}")));
            }
            *slot = a;
        }
        ckpt.metadata = parsed.extra;
        Ok(ckpt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                message: format!(
                    "unexpected end of file: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

const STRUCTURAL: &[&str] = &["arch", "input", "classes", "activation", "alphas"];

struct ParsedHeader {
    fields: BTreeMap<String, String>,
    offsets: BTreeMap<String, usize>,
    extra: BTreeMap<String, String>,
    end: usize,
}

impl ParsedHeader {
    fn err(&self, key: &str, msg: impl std::fmt::Display) -> Error {
        Error::Format {
            offset: self.offsets.get(key).copied().unwrap_or(self.end),
            message: format!("{key}: {msg}"),
        }
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| self.err(key, "missing"))
    }

    fn boolean(&self, key: &str) -> Result<bool> {
        self.get(key)?
            .parse()
            .map_err(|_| self.err(key, "expected true/false"))
    }
}

fn parse_header(text: &str, base: usize) -> Result<ParsedHeader> {
    let mut fields = BTreeMap::new();
    let mut offsets = BTreeMap::new();
    let mut extra = BTreeMap::new();
    let mut offset = base;
    for line in text.split_inclusive('\n') {
        let content = line.trim_end_matches('\n');
        if !content.is_empty() {
            let (k, v) = content.split_once('=').ok_or_else(|| Error::Format {
                offset,
                message: format!("header line {content:?} lacks '='"),
            })?;
            let structural =
                STRUCTURAL.contains(&k) || k.starts_with("quant.") || k.starts_with("tensor.");
            if structural {
                fields.insert(k.to_string(), v.to_string());
                offsets.insert(k.to_string(), offset);
            } else {
                extra.insert(k.to_string(), v.to_string());
            }
        }
        offset += line.len();
    }
    Ok(ParsedHeader {
        fields,
        offsets,
        extra,
        end: base + text.len(),
    })
}

/// Writes `model` with its training config and metrics.
pub fn save_checkpoint(
    model: &Model,
    config: &TrainConfig,
    metrics: &Metrics,
    path: &Path,
) -> Result<()> {
    Checkpoint::new(model.clone())
        .with_config(config)
        .with_metrics("val", metrics)
        .save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    Checkpoint::load(path).map(|c| c.model)
}
