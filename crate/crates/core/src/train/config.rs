use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::Architecture;
use crate::quant::{Bits, DEFAULT_ALPHA_INIT};
use crate::saliency::SaliencyTarget;

/// Training regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Saliency-guided training with PACT activations and k-bit fake quantization.
    SgtPact,
    /// Saliency-guided training in full precision.
    SgtBaseline,
    /// Plain cross-entropy training with ReLU activations.
    FloatBaseline,
}

impl Mode {
    pub fn is_saliency_guided(self) -> bool {
        !matches!(self, Mode::FloatBaseline)
    }

    /// Saliency objective used when none is configured explicitly.
    pub fn default_saliency_target(self) -> SaliencyTarget {
        match self {
            Mode::SgtBaseline => SaliencyTarget::TrueClassLogit,
            _ => SaliencyTarget::Loss,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::SgtPact => "sgt_pact",
            Mode::SgtBaseline => "sgt_baseline",
            Mode::FloatBaseline => "float_baseline",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgt_pact" => Ok(Mode::SgtPact),
            "sgt_baseline" => Ok(Mode::SgtBaseline),
            "float_baseline" => Ok(Mode::FloatBaseline),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mode {s:?} (expected sgt_pact, sgt_baseline or float_baseline)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam learning rate τ.
    pub lr: f32,
    /// Clipping-level learning rate τ_α.
    pub alpha_lr: f32,
    /// Weight η of the squared-L2 penalty on α.
    pub alpha_reg: f32,
    pub alpha_init: f32,
    pub lambda1: f32,
    pub lambda2: f32,
    pub bits: Bits,
    pub mask_ratio: f32,
    pub mode: Mode,
    pub seed: u64,
    /// Apply rotation/flip/jitter to training batches.
    pub augment: bool,
    /// In [`Mode::SgtPact`], fake-quantize weights and activations. Turning
    /// this off leaves PACT clipping and α learning in place.
    pub fake_quant: bool,
    /// Overrides [`Mode::default_saliency_target`].
    pub saliency_target: Option<SaliencyTarget>,
    /// Layer layout; `None` uses [`Architecture::default_cnn`].
    pub arch: Option<Architecture>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            lr: 1e-3,
            alpha_lr: 1e-2,
            alpha_reg: 1e-4,
            alpha_init: DEFAULT_ALPHA_INIT,
            lambda1: 1.0,
            lambda2: 1e-4,
            bits: Bits::new(8).expect("8 bits"),
            mask_ratio: 0.5,
            mode: Mode::SgtPact,
            seed: 0,
            augment: true,
            fake_quant: true,
            saliency_target: None,
            arch: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    pub fn saliency_target(&self) -> SaliencyTarget {
        self.saliency_target
            .unwrap_or_else(|| self.mode.default_saliency_target())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        for (name, v) in [
            ("lr", self.lr),
            ("alpha-lr", self.alpha_lr),
            ("alpha-init", self.alpha_init),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("eta", self.alpha_reg),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!(
                "mask ratio must be in [0, 1), got {}",
                self.mask_ratio
            ));
        }
        Ok(())
    }

    /// Flat `key=value` pairs, using the same keys [`TrainConfig::set`] accepts.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut v = vec![
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("alpha-lr", self.alpha_lr.to_string()),
            ("eta", self.alpha_reg.to_string()),
            ("alpha-init", self.alpha_init.to_string()),
            ("lambda1", self.lambda1.to_string()),
            ("lambda2", self.lambda2.to_string()),
            ("bits", self.bits.to_string()),
            ("mask-ratio", self.mask_ratio.to_string()),
            ("mode", self.mode.to_string()),
            ("seed", self.seed.to_string()),
            ("augment", self.augment.to_string()),
            ("fake-quant", self.fake_quant.to_string()),
            ("saliency", self.saliency_target().to_string()),
        ];
        if let Some(a) = &self.arch {
            v.push(("arch", a.to_string()));
        }
        v.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Sets one option by key. Underscores and dashes are interchangeable.
    /// Returns `Ok(false)` if the key is not a training option.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let key = key.trim().replace('_', "-");
        let k = key.as_str();
        match k {
            "epochs" => self.epochs = parse(k, value)?,
            "batch" | "batch-size" => self.batch_size = parse(k, value)?,
            "lr" => self.lr = parse(k, value)?,
            "alpha-lr" => self.alpha_lr = parse(k, value)?,
            "eta" | "alpha-reg" => self.alpha_reg = parse(k, value)?,
            "alpha-init" => self.alpha_init = parse(k, value)?,
            "lambda1" => self.lambda1 = parse(k, value)?,
            "lambda2" => self.lambda2 = parse(k, value)?,
            "bits" => self.bits = value.parse()?,
            "mask-ratio" => self.mask_ratio = parse(k, value)?,
            "mode" => self.mode = value.trim().parse()?,
            "seed" => self.seed = parse(k, value)?,
            "augment" => self.augment = parse(k, value)?,
            "fake-quant" => self.fake_quant = parse(k, value)?,
            "saliency" => self.saliency_target = Some(value.parse()?),
            "arch" => self.arch = Some(value.parse()?),
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_training_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.mask_ratio), (50, 128, 0.5));
        assert_eq!(
            (c.lr, c.alpha_lr, c.lambda1, c.lambda2, c.alpha_reg),
            (1e-3, 1e-2, 1.0, 1e-4, 1e-4)
        );
        assert_eq!(c.alpha_init, 6.0);
        c.validate().unwrap();
    }

    #[test]
    fn pairs_round_trip() {
        let mut c = TrainConfig {
            mode: Mode::SgtBaseline,
            seed: 42,
            lr: 3.5e-4,
            ..Default::default()
        };
        c.arch = Some(Architecture::default_cnn(8));
        let mut d = TrainConfig::default();
        for (k, v) in c.to_pairs() {
            assert!(d.set(&k, &v).unwrap(), "{k}");
        }
        // the echoed saliency target becomes explicit
        assert_eq!(d.saliency_target, Some(SaliencyTarget::TrueClassLogit));
        d.saliency_target = None;
        assert_eq!(c, d);
    }

    #[test]
    fn unknown_and_bad_values() {
        let mut c = TrainConfig::default();
        assert!(!c.set("nonsense", "1").unwrap());
        assert!(c.set("bits", "9").is_err());
        assert!(c.set("mode", "fancy").is_err());
        c.mask_ratio = 1.0;
        assert!(c.validate().is_err());
    }
}
