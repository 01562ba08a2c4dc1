//! Synthetic 8-class corpus: a bright Gaussian blob at one of eight fixed
//! positions (a 3×3 grid without its centre) over noisy background.

use rand_distr::{Distribution, Normal};

use super::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::nn::InputShape;
use crate::rng;
use crate::tensor::Tensor;

pub const MAX_CLASSES: usize = 8;
const BACKGROUND: f32 = 0.25;
const BLOB_AMPLITUDE: f32 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub per_class: usize,
    pub classes: usize,
    pub resolution: usize,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 8 classes with background noise σ = 0.1.
    pub fn new(per_class: usize, resolution: usize, seed: u64) -> Self {
        Self {
            per_class,
            classes: MAX_CLASSES,
            resolution,
            noise_sigma: 0.1,
            seed,
        }
    }
}

/// Blob centre for `class` in fractional image coordinates.
fn blob_centre(class: usize) -> (f32, f32) {
    const CELLS: [(usize, usize); 8] = [
        (0, 0),
        (0, 1),
        (0, 2),
        (1, 0),
        (1, 2),
        (2, 0),
        (2, 1),
        (2, 2),
    ];
    let (r, c) = CELLS[class];
    ((r as f32 + 0.5) / 3.0, (c as f32 + 0.5) / 3.0)
}

/// Noise-free image of `class`, shaped `[3, res, res]`.
pub fn template(class: usize, resolution: usize) -> Tensor {
    let (cy, cx) = blob_centre(class);
    let res = resolution as f32;
    let radius = (res / 10.0).max(1.0);
    let mut plane = Vec::with_capacity(resolution * resolution);
    for y in 0..resolution {
        for x in 0..resolution {
            let dy = (y as f32 + 0.5) - cy * res;
            let dx = (x as f32 + 0.5) - cx * res;
            let blob = (-(dx * dx + dy * dy) / (2.0 * radius * radius)).exp();
            plane.push(BACKGROUND + BLOB_AMPLITUDE * blob);
        }
    }
    Tensor::new([3, resolution, resolution], plane.repeat(3)).expect("shape")
}

/// Generates `per_class` samples for each class, interleaved by class.
pub fn synthetic_dataset(spec: SyntheticSpec) -> Result<Dataset> {
    if spec.per_class < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 samples per class, got {}",
            spec.per_class
        )));
    }
    if spec.classes == 0 || spec.classes > MAX_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "classes must be in 1..={MAX_CLASSES}, got {}",
            spec.classes
        )));
    }
    if spec.resolution < 3 {
        return Err(Error::InvalidArgument(format!(
            "resolution {} too small",
            spec.resolution
        )));
    }
    let templates: Vec<Tensor> = (0..spec.classes)
        .map(|c| template(c, spec.resolution))
        .collect();
    let noise = (spec.noise_sigma > 0.0)
        .then(|| Normal::new(0.0f32, spec.noise_sigma))
        .transpose()
        .map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?;
    let total = spec.per_class * spec.classes;
    let samples = (0..total)
        .map(|i| {
            let label = i % spec.classes;
            let mut image = templates[label].clone();
            if let Some(dist) = &noise {
                let mut rng = rng::stream(spec.seed, &[rng::purpose::SYNTHETIC, i as u64]);
                for v in image.data_mut() {
                    *v = (*v + dist.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            Sample {
                image,
                label,
                split: Split::Train,
                name: format!("synth_{i:05}"),
            }
        })
        .collect();
    Ok(Dataset {
        samples,
        class_names: (0..spec.classes).map(|c| format!("class{c}")).collect(),
        input: InputShape::square(3, spec.resolution),
        skipped: 0,
    })
}
