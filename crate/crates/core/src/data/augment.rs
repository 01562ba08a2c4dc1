//! Right-angle rotation, horizontal flip and per-channel color jitter.

use rand::Rng;

use crate::tensor::Tensor;

/// Jitter factors are drawn uniformly from this range.
pub const JITTER_RANGE: (f32, f32) = (0.8, 1.2);

/// One concrete draw of augmentation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    /// Counter-clockwise quarter turns, `0..4`.
    pub quarter_turns: u8,
    pub flip: bool,
    /// One multiplicative factor per channel.
    pub jitter: Vec<f32>,
}

impl AugmentParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            quarter_turns: 0,
            flip: false,
            jitter: vec![1.0; channels],
        }
    }

    pub fn sample(rng: &mut impl Rng, channels: usize) -> Self {
        let quarter_turns = rng.random_range(0..4u8);
        let flip = rng.random_bool(0.5);
        let jitter = (0..channels)
            .map(|_| rng.random_range(JITTER_RANGE.0..=JITTER_RANGE.1))
            .collect();
        Self {
            quarter_turns,
            flip,
            jitter,
        }
    }

    /// Applies rotation, then flip, then jitter with clamping to `[0, 1]`.
    /// Non-square images only rotate by multiples of 180°.
    pub fn apply(&self, image: &Tensor) -> Tensor {
        let [c, h, w] = *image.shape() else {
            panic!("augment expects [C, H, W], got {:?}", image.shape())
        };
        assert_eq!(self.jitter.len(), c, "one jitter factor per channel");
        let turns = if h == w {
            self.quarter_turns % 4
        } else {
            (self.quarter_turns % 4) & 2
        };
        let src = image.data();
        let mut out = vec![0.0f32; image.len()];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            let f = self.jitter[ch];
            for y in 0..h {
                for x in 0..w {
                    // flip after rotation: read from the mirrored output column
                    let xr = if self.flip { w - 1 - x } else { x };
                    let (sy, sx) = match turns {
                        0 => (y, xr),
                        1 => (xr, w - 1 - y),
                        2 => (h - 1 - y, w - 1 - xr),
                        _ => (h - 1 - xr, y),
                    };
                    let v = plane[sy * w + sx];
                    out[(ch * h + y) * w + x] = if f == 1.0 { v } else { (v * f).clamp(0.0, 1.0) };
                }
            }
        }
        Tensor::new(image.shape(), out).expect("shape")
    }
}

/// Draws parameters from `rng` and applies them.
pub fn augment(image: &Tensor, rng: &mut impl Rng) -> Tensor {
    AugmentParams::sample(rng, image.shape()[0]).apply(image)
}
