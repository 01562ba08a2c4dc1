//! Hybrid loss against separately computed CE, KL and saliency-L1 terms.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgq_core::nn::{cross_entropy, kl_from_logits};
use sgq_core::saliency::saliency_l1;
use sgq_core::train::hybrid_loss;
use sgq_core::Tensor;

pub const TOLERANCE: f64 = 1e-6;

pub struct HybridReport {
    pub cases: usize,
    /// Largest |L − (CE + λ1·KL + λ2·L1)|.
    pub worst: f64,
    /// Every case with λ1 = λ2 = 0 returned CE bit for bit.
    pub reduces_to_ce: bool,
}

impl HybridReport {
    pub fn passed(&self) -> bool {
        self.worst <= TOLERANCE && self.reduces_to_ce
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn hybrid_decomposition(cases: usize, seed: u64) -> HybridReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut reduces_to_ce = true;
    for _ in 0..cases {
        let (n, c) = (rng.random_range(1..=8), rng.random_range(2..=8));
        let a = uniform(&mut rng, &[n, c], -3.0, 3.0);
        let b = uniform(&mut rng, &[n, c], -3.0, 3.0);
        let s = uniform(&mut rng, &[n, 3, 4, 4], -0.01, 0.01);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let (l1, l2) = (rng.random_range(0.0f32..2.0), rng.random_range(0.0f32..2.0));

        let ce = cross_entropy(&a, &labels).unwrap();
        let kl = kl_from_logits(&a, &b).unwrap();
        let pen = saliency_l1(&s);
        let assembled = ce as f64 + l1 as f64 * kl as f64 + l2 as f64 * pen as f64;
        let total = hybrid_loss(&a, &b, &labels, &s, l1, l2).unwrap();
        worst = worst.max((total as f64 - assembled).abs());

        reduces_to_ce &= hybrid_loss(&a, &b, &labels, &s, 0.0, 0.0)
            .unwrap()
            .to_bits()
            == ce.to_bits();
    }
    HybridReport {
        cases,
        worst,
        reduces_to_ce,
    }
}
