//! Datasets: class-per-directory PPM corpora, stratified splits,
//! augmentation and a synthetic blob-position task.

pub mod augment;
pub mod ppm;
pub mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::InputShape;
use crate::rng;
use crate::tensor::Tensor;

pub use augment::{augment, AugmentParams};
pub use synthetic::{synthetic_dataset, SyntheticSpec};

/// Default side length images are resized to.
pub const DEFAULT_RESOLUTION: usize = 64;

/// Train/validation/test fractions used by default.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[C, H, W]` with values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub split: Split,
    /// File stem, used to name exported artefacts.
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub input: InputShape,
    /// Images that failed to decode during loading.
    pub skipped: usize,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in self.samples.iter().filter(|s| s.split == split) {
            counts[s.label] += 1;
        }
        counts
    }

    /// Stacks the chosen samples into a `[B, C, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let imgs: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].image).collect();
        let labels = indices.iter().map(|&i| self.samples[i].label).collect();
        Ok((Tensor::stack(&imgs)?, labels))
    }

    /// Writes the corpus as `<root>/<class>/<name>.ppm`.
    pub fn write_corpus(&self, root: &Path) -> Result<()> {
        for (c, name) in self.class_names.iter().enumerate() {
            let dir = root.join(name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for s in self.samples.iter().filter(|s| s.label == c) {
                let path = dir.join(format!("{}.ppm", s.name));
                let bytes = ppm::encode_ppm(&tensor_to_rgb(&s.image)?);
                fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }
}

/// `[3, H, W]` in `[0, 1]` → 8-bit RGB.
pub fn tensor_to_rgb(t: &Tensor) -> Result<ppm::RgbImage> {
    let [3, h, w] = *t.shape() else {
        return Err(Error::shape(
            "tensor_to_rgb",
            format!("expected [3, H, W], got {:?}", t.shape()),
        ));
    };
    let d = t.data();
    let mut pixels = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            pixels.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(ppm::RgbImage {
        width: w,
        height: h,
        pixels,
    })
}

/// Bilinear resize (pixel-centre aligned) to `side × side`, scaled to `[0, 1]`, as `[3, side, side]`.
pub fn rgb_to_tensor(img: &ppm::RgbImage, side: usize) -> Tensor {
    let (sw, sh) = (img.width, img.height);
    let mut data = vec![0.0f32; 3 * side * side];
    let src = |x: usize, y: usize, c: usize| img.pixels[(y * sw + x) * 3 + c] as f32;
    if sw == side && sh == side {
        for y in 0..side {
            for x in 0..side {
                for c in 0..3 {
                    data[(c * side + y) * side + x] = src(x, y, c) / 255.0;
                }
            }
        }
        return Tensor::new([3, side, side], data).expect("shape");
    }
    let coord = |o: usize, src_len: usize| -> (usize, usize, f32) {
        let pos = ((o as f32 + 0.5) * src_len as f32 / side as f32 - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(src_len - 1);
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, pos - lo as f32)
    };
    for y in 0..side {
        let (y0, y1, ty) = coord(y, sh);
        for x in 0..side {
            let (x0, x1, tx) = coord(x, sw);
            for c in 0..3 {
                let top = src(x0, y0, c) + (src(x1, y0, c) - src(x0, y0, c)) * tx;
                let bot = src(x0, y1, c) + (src(x1, y1, c) - src(x0, y1, c)) * tx;
                let v = top + (bot - top) * ty;
                data[(c * side + y) * side + x] = (v / 255.0).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new([3, side, side], data).expect("shape")
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Loads `<root>/<class>/*.ppm`, classes in lexicographic order. Every
/// sample starts in the training split; call [`split_dataset`] afterwards.
pub fn load_image_dataset(root: &Path, resolution: usize) -> Result<Dataset> {
    if resolution == 0 {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!(
            "{}: no class directories",
            root.display()
        )));
    }
    let mut samples = Vec::new();
    let mut class_names = Vec::new();
    let mut skipped = 0;
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let files: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
            .collect();
        if files.is_empty() {
            return Err(Error::Data(format!(
                "{}: class directory has no .ppm images",
                dir.display()
            )));
        }
        let before = samples.len();
        for path in files {
            let decoded = fs::read(&path)
                .map_err(|e| Error::io(&path, e))
                .and_then(|b| ppm::decode_ppm(&b));
            match decoded {
                Ok(img) => samples.push(Sample {
                    image: rgb_to_tensor(&img, resolution),
                    label,
                    split: Split::Train,
                    name: path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default(),
                }),
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    skipped += 1;
                }
            }
        }
        if samples.len() == before {
            return Err(Error::Data(format!(
                "{}: no readable images",
                dir.display()
            )));
        }
        class_names.push(name);
    }
    Ok(Dataset {
        samples,
        class_names,
        input: InputShape::square(3, resolution),
        skipped,
    })
}

/// Largest-remainder apportionment of `n` items by `fractions`, then
/// moving single items from the largest part into any empty part.
fn apportion(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    for i in 0..3 {
        if counts[i] == 0 && fractions[i] > 0.0 {
            let donor = (0..3)
                .max_by_key(|&j| (counts[j], std::cmp::Reverse(j)))
                .expect("three parts");
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    counts
}

/// Stratified split: within each class a seeded shuffle, then contiguous
/// train/val/test runs sized by largest-remainder rounding.
pub fn split_dataset(ds: &mut Dataset, fractions: [f64; 3], seed: u64) -> Result<()> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fractions:?} must be in [0,1] and sum to 1"
        )));
    }
    for c in 0..ds.num_classes() {
        let mut idx: Vec<usize> = (0..ds.samples.len())
            .filter(|&i| ds.samples[i].label == c)
            .collect();
        if idx.len() < 3 {
            return Err(Error::Data(format!(
                "class {:?} has {} samples; at least 3 are needed to populate every split",
                ds.class_names[c],
                idx.len()
            )));
        }
        idx.shuffle(&mut rng::stream(seed, &[rng::purpose::SPLIT, c as u64]));
        let counts = apportion(idx.len(), &fractions);
        let mut it = idx.into_iter();
        for (split, n) in Split::ALL.into_iter().zip(counts) {
            for i in it.by_ref().take(n) {
                ds.samples[i].split = split;
            }
        }
    }
    Ok(())
}
