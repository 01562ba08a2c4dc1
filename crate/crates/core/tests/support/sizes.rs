//! Checkpoint byte sizes of the default architecture at 64×64, 8 classes.

#![allow(dead_code)]

use sgq_core::nn::{ActivationKind, Architecture, InputShape, Model};
use sgq_core::quant::{Bits, QuantSpec};
use sgq_core::Checkpoint;

pub const MAX_RATIO_8: f64 = 0.30;
pub const MAX_RATIO_4: f64 = 0.17;

pub struct SizeReport {
    pub float_bytes: usize,
    pub packed8_bytes: usize,
    pub packed4_bytes: usize,
}

impl SizeReport {
    pub fn ratio8(&self) -> f64 {
        self.packed8_bytes as f64 / self.float_bytes as f64
    }

    pub fn ratio4(&self) -> f64 {
        self.packed4_bytes as f64 / self.float_bytes as f64
    }

    pub fn passed(&self) -> bool {
        self.ratio8() <= MAX_RATIO_8 && self.ratio4() <= MAX_RATIO_4
    }
}

fn bytes(activation: ActivationKind, quant: Option<QuantSpec>) -> usize {
    let model = Model::new(
        Architecture::default_cnn(8),
        InputShape::square(3, 64),
        8,
        activation,
        6.0,
        0,
    )
    .unwrap()
    .with_quant(quant);
    Checkpoint::new(model).to_bytes().unwrap().len()
}

pub fn default_sizes() -> SizeReport {
    SizeReport {
        float_bytes: bytes(ActivationKind::Relu, None),
        packed8_bytes: bytes(
            ActivationKind::Pact,
            Some(QuantSpec::full(Bits::new(8).unwrap())),
        ),
        packed4_bytes: bytes(
            ActivationKind::Pact,
            Some(QuantSpec::full(Bits::new(4).unwrap())),
        ),
    }
}
