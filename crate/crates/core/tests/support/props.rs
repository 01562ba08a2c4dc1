//! Randomized property checks shared by the test suites and the acceptance
//! target. Each returns `Err` with a description of the first violation.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgq_core::nn::{ActivationKind, Architecture, InputShape, Model};
use sgq_core::quant::{self, Bits};
use sgq_core::saliency::{adaptive_threshold, input_gradient, mask_adaptive, mask_features};
use sgq_core::tape::Tape;
use sgq_core::train::Metrics;
use sgq_core::Tensor;

pub type Check = Result<(), String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Slack for float rounding in the half-step bound, relative to α.
pub const HALF_STEP_SLACK: f32 = 1e-6;

/// PACT clip + k-bit quantization over `samples` random (x, α) pairs:
/// range, level count, half-step error and idempotence.
pub fn activation_quantizer(k: u32, samples: usize, seed: u64) -> Vec<(&'static str, Check)> {
    let bits = Bits::new(k).unwrap();
    let levels = bits.activation_levels();
    let mut r = rng(seed);
    let mut range = Ok(());
    let mut half_step = Ok(());
    let mut idempotent = Ok(());
    let mut distinct: BTreeSet<u32> = BTreeSet::new();
    // One α for the level count, a fresh α per sample for the rest.
    let fixed_alpha = r.random_range(0.1f32..10.0);
    for i in 0..samples {
        let alpha = if i % 2 == 0 {
            fixed_alpha
        } else {
            r.random_range(0.01f32..20.0)
        };
        let x = Tensor::from_vec(vec![r.random_range(-2.0 * alpha..2.0 * alpha)]);
        let y = quant::pact_forward(&x, alpha).unwrap();
        let q = quant::pact_quantize(&y, alpha, bits).unwrap();
        let (yv, qv) = (y.data()[0], q.data()[0]);
        if range.is_ok() && !(0.0..=alpha).contains(&qv) {
            range = Err(format!(
                "x={} α={alpha}: output {qv} outside [0, α]",
                x.data()[0]
            ));
        }
        let bound = alpha / (2.0 * levels) + HALF_STEP_SLACK * alpha;
        if half_step.is_ok() && (qv - yv).abs() > bound {
            half_step = Err(format!(
                "y={yv} α={alpha}: |q−y|={} > {bound}",
                (qv - yv).abs()
            ));
        }
        let again = quant::pact_quantize(&q, alpha, bits).unwrap().data()[0];
        if idempotent.is_ok() && again.to_bits() != qv.to_bits() {
            idempotent = Err(format!("y={yv} α={alpha}: q={qv} requantizes to {again}"));
        }
        if alpha == fixed_alpha {
            distinct.insert(qv.to_bits());
        }
    }
    let max_levels = 1usize << k;
    let level_count = if distinct.len() <= max_levels {
        Ok(())
    } else {
        Err(format!(
            "{} distinct outputs for one α, more than 2^{k}",
            distinct.len()
        ))
    };
    vec![
        ("range", range),
        ("levels", level_count),
        ("half-step", half_step),
        ("idempotent", idempotent),
    ]
}

/// Symmetric weight quantization: idempotence and exact pack/unpack round-trip.
pub fn weight_packing(k: u32, samples: usize, seed: u64) -> Vec<(&'static str, Check)> {
    let bits = Bits::new(k).unwrap();
    let mut r = rng(seed);
    let mut idempotent = Ok(());
    let mut roundtrip = Ok(());
    for _ in 0..samples {
        let n = r.random_range(1..=40);
        let spread = r.random_range(0.01f32..5.0);
        let w = Tensor::from_vec((0..n).map(|_| r.random_range(-spread..spread)).collect());
        let q = quant::quantize_weights_qat(&w, bits);
        if idempotent.is_ok() && quant::quantize_weights_qat(&q, bits) != q {
            idempotent = Err(format!("{w:?} not idempotent"));
        }
        let scale = quant::weight_scale(&q, bits);
        let packed = quant::pack_weights(&q, bits, scale).unwrap();
        if packed.len() != (n * k as usize).div_ceil(8) {
            roundtrip = Err(format!("{n} codes packed into {} bytes", packed.len()));
        }
        let back = quant::unpack_weights(&packed, q.shape(), bits, scale).unwrap();
        let same = back
            .data()
            .iter()
            .zip(q.data())
            .all(|(a, b)| a.to_bits() == b.to_bits() || (*a == 0.0 && *b == 0.0));
        if roundtrip.is_ok() && !same {
            roundtrip = Err(format!("{q:?} unpacked as {back:?}"));
        }
    }
    vec![
        ("weight idempotent", idempotent),
        ("pack round-trip", roundtrip),
    ]
}

/// Distinct magnitudes with relative gaps of at least 1e-3, random signs and order.
pub fn tie_free_saliency(r: &mut ChaCha8Rng, n: usize, features: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * features);
    for _ in 0..n {
        let mut mags: Vec<f32> = Vec::with_capacity(features);
        let mut m = r.random_range(1e-4f32..1e-2);
        for _ in 0..features {
            mags.push(m);
            m *= r.random_range(1.002f32..1.2);
        }
        for i in (1..features).rev() {
            mags.swap(i, r.random_range(0..=i));
        }
        data.extend(
            mags.into_iter()
                .map(|v| if r.random_bool(0.5) { v } else { -v }),
        );
    }
    Tensor::new([n, features], data).unwrap()
}

/// Adaptive masking at ratio `ρ`: exact count, kept entries untouched,
/// agreement with the ε formula and invariance under positive rescaling.
pub fn masking(samples: usize, ratio: f32, seed: u64) -> Vec<(&'static str, Check)> {
    let mut r = rng(seed);
    let mut count = Ok(());
    let mut kept = Ok(());
    let mut formula = Ok(());
    let mut rescale = Ok(());
    for _ in 0..samples {
        let (n, f) = (r.random_range(1..=4), r.random_range(1..=64));
        let s = tie_free_saliency(&mut r, n, f);
        // Non-zero inputs so zeroed positions are exactly the masked ones.
        let x = Tensor::new(
            [n, f],
            (0..n * f).map(|_| r.random_range(0.1f32..1.0)).collect(),
        )
        .unwrap();
        let th = adaptive_threshold(&s, ratio).unwrap();
        let masked = mask_adaptive(&x, &s, &th).unwrap();
        let expect = (ratio as f64 * f as f64).floor() as usize;
        for (row, (mr, xr)) in masked.data().chunks(f).zip(x.data().chunks(f)).enumerate() {
            let zeros = mr.iter().filter(|v| **v == 0.0).count();
            if count.is_ok() && zeros != expect {
                count = Err(format!(
                    "row {row} of {f} features: {zeros} zeroed, expected {expect}"
                ));
            }
            if kept.is_ok()
                && !mr
                    .iter()
                    .zip(xr)
                    .all(|(m, x)| *m == 0.0 || m.to_bits() == x.to_bits())
            {
                kept = Err(format!("row {row}: kept entry altered"));
            }
        }
        let eps: Vec<f32> = th.iter().map(|t| t.epsilon).collect();
        if formula.is_ok() && mask_features(&x, &s, &eps).unwrap() != masked {
            formula = Err("mask_features disagrees with mask_adaptive on tie-free input".into());
        }
        let c = r.random_range(0.01f32..100.0);
        let scaled = s.scale(c);
        let th2 = adaptive_threshold(&scaled, ratio).unwrap();
        if rescale.is_ok() && mask_adaptive(&x, &scaled, &th2).unwrap() != masked {
            rescale = Err(format!("mask changed when S was scaled by {c}"));
        }
    }
    vec![
        ("exact count", count),
        ("kept bit-identical", kept),
        ("ε formula", formula),
        ("rescale invariant", rescale),
    ]
}

/// Masks from the input gradient of `c·CE` on a small model equal those of `CE`.
pub fn loss_rescale_on_model(trials: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let arch: Architecture = "conv:4,act,pool,dense:8,act,dense:3".parse().unwrap();
    for t in 0..trials {
        let model = Model::new(
            arch.clone(),
            InputShape::square(3, 6),
            3,
            ActivationKind::Pact,
            2.0,
            seed + t as u64,
        )
        .unwrap();
        let x = Tensor::new(
            [2, 3, 6, 6],
            (0..216).map(|_| r.random_range(0.0f32..1.0)).collect(),
        )
        .unwrap();
        let labels = [r.random_range(0..3), r.random_range(0..3)];
        // Powers of two keep the rescaled gradient exact.
        let c = 2f32.powi(r.random_range(-6..=6));
        let sal = |scale: f32| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false).unwrap();
            let xv = tape.leaf(x.clone(), true).unwrap();
            let logits = model.forward(&mut tape, &bound, xv).unwrap();
            let ce = tape.cross_entropy(logits, &labels).unwrap();
            let obj = tape.scale(ce, scale).unwrap();
            input_gradient(&tape, obj, xv).unwrap()
        };
        let (s1, s2) = (sal(1.0), sal(c));
        let m1 = mask_adaptive(&x, &s1, &adaptive_threshold(&s1, 0.5).unwrap()).unwrap();
        let m2 = mask_adaptive(&x, &s2, &adaptive_threshold(&s2, 0.5).unwrap()).unwrap();
        if m1 != m2 {
            return Err(format!(
                "trial {t}: mask changed when the loss was scaled by {c}"
            ));
        }
    }
    Ok(())
}

/// Metrics by explicit per-class, per-sample counting.
pub fn oracle_metrics(pred: &[usize], actual: &[usize], classes: usize) -> (f64, f64, f64) {
    let mut sens = Vec::new();
    let mut spec = Vec::new();
    for c in 0..classes {
        let (mut tp, mut fn_, mut tn, mut fp) = (0u64, 0u64, 0u64, 0u64);
        for (&p, &a) in pred.iter().zip(actual) {
            match (a == c, p == c) {
                (true, true) => tp += 1,
                (true, false) => fn_ += 1,
                (false, false) => tn += 1,
                (false, true) => fp += 1,
            }
        }
        if tp + fn_ > 0 {
            sens.push(tp as f64 / (tp + fn_) as f64);
        }
        if tn + fp > 0 {
            spec.push(tn as f64 / (tn + fp) as f64);
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let correct = pred.iter().zip(actual).filter(|(p, a)| p == a).count();
    (correct as f64 / pred.len() as f64, mean(&sens), mean(&spec))
}

/// Compares [`Metrics`] against [`oracle_metrics`] on random vectors.
pub fn metrics_oracle(vectors: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    for v in 0..vectors {
        let classes = r.random_range(2..=8);
        let n = r.random_range(1..=200);
        let actual: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        // Mix of accurate and random predictors.
        let skill = r.random_range(0.0..1.0);
        let pred: Vec<usize> = actual
            .iter()
            .map(|&a| {
                if r.random_bool(skill) {
                    a
                } else {
                    r.random_range(0..classes)
                }
            })
            .collect();
        let m = Metrics::from_predictions(&pred, &actual, classes).map_err(|e| e.to_string())?;
        let (acc, sens, spec) = oracle_metrics(&pred, &actual, classes);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
        if !(close(m.accuracy, acc)
            && close(m.macro_sensitivity, sens)
            && close(m.macro_specificity, spec))
        {
            return Err(format!(
                "vector {v}: got ({}, {}, {}), oracle ({acc}, {sens}, {spec})",
                m.accuracy, m.macro_sensitivity, m.macro_specificity
            ));
        }
        let trace: u64 = (0..classes).map(|c| m.confusion[c][c]).sum();
        if m.total() != n as u64 || !close(m.accuracy, trace as f64 / n as f64) {
            return Err(format!("vector {v}: confusion total or trace mismatch"));
        }
        for c in 0..classes {
            let cc = m.class_counts(c);
            if cc.tp + cc.fn_ != m.confusion[c].iter().sum::<u64>() {
                return Err(format!(
                    "vector {v}: class {c} TP+FN differs from its row sum"
                ));
            }
        }
    }
    Ok(())
}
