//! Input-gradient saliency, adaptive low-saliency masking and saliency-map export.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Masking ratio and hybrid-loss weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaliencyConfig {
    /// Fraction of lowest-saliency input features zeroed per sample, in `[0, 1)`.
    pub mask_ratio: f32,
    /// Weight of the KL consistency term.
    pub lambda1: f32,
    /// Weight of the L1 saliency penalty.
    pub lambda2: f32,
}

impl SaliencyConfig {
    pub fn new(mask_ratio: f32, lambda1: f32, lambda2: f32) -> Result<Self> {
        check_ratio(mask_ratio)?;
        if !(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda1.is_finite() && lambda2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be non-negative, got λ1={lambda1}, λ2={lambda2}"
            )));
        }
        Ok(Self {
            mask_ratio,
            lambda1,
            lambda2,
        })
    }
}

/// Which scalar the input gradient is taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaliencyTarget {
    /// Cross-entropy loss against the labels.
    Loss,
    /// Sum of the true-class logits.
    TrueClassLogit,
}

impl fmt::Display for SaliencyTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SaliencyTarget::Loss => "loss",
            SaliencyTarget::TrueClassLogit => "logit",
        })
    }
}

impl FromStr for SaliencyTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "loss" => Ok(SaliencyTarget::Loss),
            "logit" => Ok(SaliencyTarget::TrueClassLogit),
            other => Err(Error::InvalidArgument(format!(
                "bad saliency target {other:?} (expected loss or logit)"
            ))),
        }
    }
}

/// A single-image saliency map.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// Gradient values shaped `[C, H, W]` like the input image.
    pub values: Tensor,
    pub source_label: usize,
    /// Largest per-pixel channel-max magnitude; export divides by it.
    pub normalization: f32,
}

impl SaliencyMap {
    pub fn new(values: Tensor, source_label: usize) -> Result<Self> {
        let gray = channel_max_abs(&values)?;
        let normalization = gray.data().iter().fold(0.0f32, |m, &v| m.max(v));
        Ok(Self {
            values,
            source_label,
            normalization,
        })
    }

    /// Grayscale pixels: `round(255 · v / max)` of the per-pixel channel-max magnitude.
    pub fn pixels(&self) -> Result<(usize, usize, Vec<u8>)> {
        let gray = channel_max_abs(&self.values)?;
        let (h, w) = (gray.shape()[0], gray.shape()[1]);
        let max = self.normalization as f64;
        let px = gray
            .data()
            .iter()
            .map(|&v| {
                if max == 0.0 {
                    0
                } else {
                    (255.0 * v as f64 / max).round().clamp(0.0, 255.0) as u8
                }
            })
            .collect();
        Ok((w, h, px))
    }

    pub fn to_pgm(&self) -> Result<Vec<u8>> {
        let (w, h, px) = self.pixels()?;
        Ok(crate::data::ppm::encode_pgm(w, h, &px))
    }
}

fn check_ratio(ratio: f32) -> Result<()> {
    if (0.0..1.0).contains(&ratio) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "mask ratio must be in [0, 1), got {ratio}"
        )))
    }
}

/// `[C, H, W]` (or `[1, C, H, W]`) → `[H, W]` maximum magnitude over channels.
fn channel_max_abs(s: &Tensor) -> Result<Tensor> {
    let dims = match s.shape() {
        [c, h, w] | [1, c, h, w] => [*c, *h, *w],
        other => {
            return Err(Error::shape(
                "saliency_map",
                format!("expected one [C, H, W] image, got {other:?}"),
            ))
        }
    };
    let [c, h, w] = dims;
    let mut out = vec![0.0f32; h * w];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&s.data()[ch * h * w..(ch + 1) * h * w]) {
            *o = o.max(v.abs());
        }
    }
    Tensor::new([h, w], out)
}

/// Gradient of `objective` with respect to the leaf `x`, visiting only the
/// part of the tape between them.
pub fn input_gradient(tape: &Tape, objective: Var, x: Var) -> Result<Tensor> {
    let mut grads = tape.backward_wrt(objective, &[x])?;
    Ok(grads
        .take(x)
        .unwrap_or_else(|| Tensor::zeros(tape.value(x).shape().to_vec())))
}

/// Records the saliency objective for already-computed logits.
pub fn record_objective(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    target: SaliencyTarget,
) -> Result<Var> {
    match target {
        SaliencyTarget::Loss => tape.cross_entropy(logits, labels),
        SaliencyTarget::TrueClassLogit => tape.select_sum(logits, labels),
    }
}

/// `S = ∇_X ℓ(f(X), y)` for a `[N, C, H, W]` batch (mean cross-entropy).
pub fn compute_saliency(model: &Model, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    compute_saliency_for(model, x, labels, SaliencyTarget::Loss)
}

/// Input gradient of the chosen objective.
pub fn compute_saliency_for(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    target: SaliencyTarget,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false)?;
    let xv = tape.leaf(x.clone(), true)?;
    let logits = model.forward(&mut tape, &bound, xv)?;
    let obj = record_objective(&mut tape, logits, labels, target)?;
    input_gradient(&tape, obj, xv)
}

/// Per-sample threshold chosen by [`adaptive_threshold`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    /// Largest masked magnitude; just below the smallest magnitude when nothing is masked.
    pub epsilon: f32,
    /// Number of features to mask, `⌊ρ·n⌋`.
    pub count: usize,
}

fn per_sample(s: &Tensor) -> (usize, usize) {
    let n = s.shape()[0];
    (n, s.len() / n)
}

/// Per-sample ε such that exactly `⌊ρ·n⌋` features fall at or below it,
/// ties among equal magnitudes resolved towards lower flat indices.
pub fn adaptive_threshold(s: &Tensor, ratio: f32) -> Result<Vec<Threshold>> {
    check_ratio(ratio)?;
    let (n, per) = per_sample(s);
    let count = (ratio as f64 * per as f64).floor() as usize;
    let mut out = Vec::with_capacity(n);
    let mut order: Vec<usize> = Vec::with_capacity(per);
    for row in s.data().chunks(per) {
        let epsilon = if count == 0 {
            row.iter()
                .fold(f32::INFINITY, |m, v| m.min(v.abs()))
                .next_down()
        } else {
            order.clear();
            order.extend(0..per);
            let (_, nth, _) = order.select_nth_unstable_by(count - 1, |&a, &b| {
                row[a].abs().total_cmp(&row[b].abs()).then(a.cmp(&b))
            });
            row[*nth].abs()
        };
        out.push(Threshold { epsilon, count });
    }
    Ok(out)
}

fn check_pair(op: &'static str, x: &Tensor, s: &Tensor, n_thresholds: usize) -> Result<()> {
    if x.shape() != s.shape() {
        return Err(Error::shape(
            op,
            format!("X {:?} vs S {:?}", x.shape(), s.shape()),
        ));
    }
    if n_thresholds != x.shape()[0] {
        return Err(Error::shape(
            op,
            format!("{n_thresholds} thresholds for batch of {}", x.shape()[0]),
        ));
    }
    Ok(())
}

/// `X̃ = X ⊙ 𝕀(|S| > ε)` with one ε per sample.
pub fn mask_features(x: &Tensor, s: &Tensor, epsilon: &[f32]) -> Result<Tensor> {
    check_pair("mask_features", x, s, epsilon.len())?;
    let (_, per) = per_sample(x);
    let mut out = x.clone();
    for ((xr, sr), &eps) in out
        .data_mut()
        .chunks_mut(per)
        .zip(s.data().chunks(per))
        .zip(epsilon)
    {
        for (xv, sv) in xr.iter_mut().zip(sr) {
            if sv.abs() <= eps {
                *xv = 0.0;
            }
        }
    }
    Ok(out)
}

/// Masks exactly `count` features per sample: all with `|S| < ε`, then
/// those with `|S| == ε` in increasing index order.
pub fn mask_adaptive(x: &Tensor, s: &Tensor, thresholds: &[Threshold]) -> Result<Tensor> {
    check_pair("mask_adaptive", x, s, thresholds.len())?;
    let (_, per) = per_sample(x);
    let mut out = x.clone();
    for ((xr, sr), t) in out
        .data_mut()
        .chunks_mut(per)
        .zip(s.data().chunks(per))
        .zip(thresholds)
    {
        if t.count == 0 {
            continue;
        }
        let below = sr.iter().filter(|v| v.abs() < t.epsilon).count();
        let mut ties_left = t.count.saturating_sub(below);
        for (xv, sv) in xr.iter_mut().zip(sr) {
            let m = sv.abs();
            if m < t.epsilon {
                *xv = 0.0;
            } else if m == t.epsilon && ties_left > 0 {
                *xv = 0.0;
                ties_left -= 1;
            }
        }
    }
    Ok(out)
}

/// Mean over the batch of `Σ_j |S_j|`.
pub fn saliency_l1(s: &Tensor) -> f32 {
    let (n, per) = per_sample(s);
    let total: f64 = s
        .data()
        .chunks(per)
        .map(|r| r.iter().map(|v| v.abs() as f64).sum::<f64>())
        .sum();
    (total / n as f64) as f32
}

/// Writes a binary PGM of one image's saliency.
pub fn export_saliency_map(s: &Tensor, path: &Path) -> Result<SaliencyMap> {
    let map = SaliencyMap::new(s.clone(), 0)?;
    fs::write(path, map.to_pgm()?).map_err(|e| Error::io(path, e))?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[&[f32]]) -> Tensor {
        let per = rows[0].len();
        Tensor::new([rows.len(), per], rows.concat()).unwrap()
    }

    #[test]
    fn median_split_masks_two_smallest() {
        let s = batch(&[&[0.05, -0.1, 0.5, 0.9]]);
        let t = adaptive_threshold(&s, 0.5).unwrap();
        assert_eq!(t[0].count, 2);
        assert_eq!(t[0].epsilon, 0.1);
        let x = batch(&[&[1.0, 2.0, 3.0, 4.0]]);
        assert_eq!(
            mask_adaptive(&x, &s, &t).unwrap().data(),
            &[0.0, 0.0, 3.0, 4.0]
        );
        let eps: Vec<f32> = t.iter().map(|t| t.epsilon).collect();
        assert_eq!(
            mask_features(&x, &s, &eps).unwrap().data(),
            &[0.0, 0.0, 3.0, 4.0]
        );
    }

    #[test]
    fn zero_ratio_masks_nothing() {
        let s = batch(&[&[0.3, 0.2, 0.9]]);
        let t = adaptive_threshold(&s, 0.0).unwrap();
        assert_eq!(t[0].count, 0);
        assert!(t[0].epsilon < 0.2 && t[0].epsilon >= 0.0);
        let x = batch(&[&[1.0, 2.0, 3.0]]);
        let eps = [t[0].epsilon];
        assert_eq!(mask_features(&x, &s, &eps).unwrap(), x);
        assert_eq!(mask_adaptive(&x, &s, &t).unwrap(), x);
    }

    #[test]
    fn ties_mask_lowest_indices() {
        let s = batch(&[&[0.5, -0.5, 0.5, 0.5]]);
        let t = adaptive_threshold(&s, 0.5).unwrap();
        let x = batch(&[&[1.0, 2.0, 3.0, 4.0]]);
        assert_eq!(
            mask_adaptive(&x, &s, &t).unwrap().data(),
            &[0.0, 0.0, 3.0, 4.0]
        );
    }

    #[test]
    fn threshold_extremes() {
        let s = batch(&[&[0.2, 0.4], &[0.1, 0.3]]);
        let x = batch(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(mask_features(&x, &s, &[0.0, 0.0]).unwrap(), x);
        let all = mask_features(&x, &s, &[1.0, 1.0]).unwrap();
        assert!(all.data().iter().all(|&v| v == 0.0));
        assert!(mask_features(&x, &s, &[0.0]).is_err());
        assert!(mask_features(&x, &batch(&[&[0.1, 0.2, 0.3]]), &[0.0]).is_err());
    }

    #[test]
    fn l1_cases() {
        assert_eq!(saliency_l1(&Tensor::zeros([2, 3])), 0.0);
        assert_eq!(saliency_l1(&batch(&[&[1.0, -2.0, 3.0]])), 6.0);
        let s = batch(&[&[0.5, -1.5], &[2.0, 0.25]]);
        assert_eq!(saliency_l1(&s.scale(-4.0)), 4.0 * saliency_l1(&s));
    }

    #[test]
    fn ratio_validation() {
        let s = batch(&[&[0.1, 0.2]]);
        assert!(adaptive_threshold(&s, 1.0).is_err());
        assert!(adaptive_threshold(&s, -0.1).is_err());
        assert!(SaliencyConfig::new(0.5, -1.0, 0.0).is_err());
    }

    #[test]
    fn pgm_pixels_normalize_by_max() {
        let zero = SaliencyMap::new(Tensor::zeros([3, 2, 2]), 0).unwrap();
        assert_eq!(zero.pixels().unwrap().2, vec![0; 4]);
        let mut hot = Tensor::zeros([3, 2, 2]);
        hot.data_mut()[4 + 3] = -0.02;
        let (w, h, px) = SaliencyMap::new(hot, 0).unwrap().pixels().unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(px, vec![0, 0, 0, 255]);
    }
}
