//! Labelled image stores, the FSB v1 file format, and the synthetic
//! few-shot dataset generator.
//!
//! FSB v1 layout (all little-endian):
//!
//! ```text
//! "FSB1"                      4 bytes
//! N, C, H, W, num_classes     u32 each
//! pixels                      N*C*H*W f32, row-major [N,C,H,W], in [0,1]
//! labels                      N u32, each < num_classes
//! split codes                 num_classes u32 (0 train, 1 val, 2 test)
//! ```

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const FSB_MAGIC: &[u8; 4] = b"FSB1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn code(self) -> u32 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Images in `[N, C, H, W]` with per-image class labels and a class-level
/// split assignment. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStore {
    images: Tensor<f32>,
    labels: Vec<u32>,
    splits: Vec<Split>,
    by_class: Vec<Vec<usize>>,
}

impl DatasetStore {
    pub fn new(images: Tensor<f32>, labels: Vec<u32>, splits: Vec<Split>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape(
                "dataset",
                format!("images must be [N,C,H,W], got {:?}", images.shape()),
            ));
        }
        let n = images.shape()[0];
        if labels.len() != n {
            return Err(Error::shape(
                "dataset",
                format!("{n} images but {} labels", labels.len()),
            ));
        }
        if let Some((index, &value)) = images
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::PixelOutOfRange { index, value });
        }
        let classes = splits.len();
        let mut by_class = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
            by_class[l].push(i);
        }
        Ok(DatasetStore {
            images,
            labels,
            splits,
            by_class,
        })
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.splits.len()
    }

    /// `[C, H, W]` of a single image.
    pub fn image_dims(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn classes_in(&self, split: Split) -> Vec<usize> {
        (0..self.splits.len()).filter(|&c| self.splits[c] == split).collect()
    }

    pub fn class_images(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.images.shape();
        let mut out = Vec::with_capacity(24 + 4 * (self.images.len() + self.labels.len() + self.splits.len()));
        out.extend_from_slice(FSB_MAGIC);
        for d in [s[0], s[1], s[2], s[3], self.splits.len()] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.images.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for sp in &self.splits {
            out.extend_from_slice(&sp.code().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != FSB_MAGIC {
            return Err(Error::BadMagic {
                expected: "FSB1".into(),
                found: magic.to_vec(),
            });
        }
        let n = r.u32()? as usize;
        let c = r.u32()? as usize;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let count = n
            .checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::shape("fsb", "image dimensions overflow"))?;
        let needed = count
            .checked_add(n)
            .and_then(|v| v.checked_add(classes))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::shape("fsb", "payload size overflows"))?;
        if r.remaining() < needed {
            return Err(Error::Truncated {
                needed: 24 + needed,
                available: bytes.len(),
            });
        }
        let pixels: Vec<f32> = (0..count).map(|_| r.f32()).collect::<Result<_>>()?;
        let labels: Vec<u32> = (0..n).map(|_| r.u32()).collect::<Result<_>>()?;
        let mut splits = Vec::with_capacity(classes);
        for class in 0..classes {
            let code = r.u32()?;
            splits.push(Split::from_code(code).ok_or(Error::BadSplitCode { class, code })?);
        }
        if r.remaining() != 0 {
            return Err(Error::TrailingBytes(r.remaining()));
        }
        let images = Tensor::new(vec![n, c, h, w], pixels)?;
        DatasetStore::new(images, labels, splits)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                needed: self.pos + n,
                available: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_fsb(store: &DatasetStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, store.to_bytes())?;
    Ok(())
}

pub fn load_fsb(path: impl AsRef<Path>) -> Result<DatasetStore> {
    DatasetStore::from_bytes(&fs::read(path)?)
}

/// Optional human-readable sidecar; the loader never reads it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<ManifestClass>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestClass {
    pub index: usize,
    pub name: String,
    pub split: Split,
    pub images: usize,
}

impl Manifest {
    pub fn describe(store: &DatasetStore) -> Self {
        let classes = (0..store.num_classes())
            .map(|index| ManifestClass {
                index,
                name: format!("synthetic-{index:03}"),
                split: store.splits()[index],
                images: store.class_images(index).len(),
            })
            .collect();
        Manifest { classes }
    }
}

/// Parameters for [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Trailing fraction of classes (by index) assigned to the test split.
    pub test_fraction: f64,
    /// Fraction of classes just before the test block assigned to validation.
    pub val_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 20,
            images_per_class: 40,
            height: 16,
            width: 16,
            channels: 1,
            noise_std: 0.35,
            seed: 0,
            test_fraction: 0.25,
            val_fraction: 0.0,
        }
    }
}

/// Number of (train, val, test) classes the split rule produces.
pub fn split_counts(num_classes: usize, val_fraction: f64, test_fraction: f64) -> (usize, usize, usize) {
    let test = (num_classes as f64 * test_fraction).floor() as usize;
    let val = (num_classes as f64 * val_fraction).floor() as usize;
    let val = val.min(num_classes - test.min(num_classes));
    let test = test.min(num_classes);
    (num_classes - val - test, val, test)
}

/// Number of cosine components summed into each class template channel.
const TEMPLATE_WAVES: usize = 4;
/// Highest spatial frequency (cycles per image side) of a template wave.
const TEMPLATE_MAX_FREQ: u32 = 3;

/// Build a synthetic dataset. Each class has a smooth template made of a few
/// random low-frequency 2-D cosines; each image is the template plus i.i.d.
/// Gaussian pixel noise, clipped to `[0, 1]`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetStore> {
    if spec.num_classes < 10 {
        return Err(Error::config(format!(
            "synthetic dataset needs at least 10 classes, got {}",
            spec.num_classes
        )));
    }
    if spec.images_per_class == 0 || spec.height == 0 || spec.width == 0 || spec.channels == 0 {
        return Err(Error::config("synthetic dataset dimensions must be positive"));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::config(format!(
            "noise_std must be finite and >= 0, got {}",
            spec.noise_std
        )));
    }
    let fractions_ok = (0.0..=1.0).contains(&spec.test_fraction)
        && (0.0..=1.0).contains(&spec.val_fraction)
        && spec.test_fraction + spec.val_fraction <= 1.0;
    if !fractions_ok {
        return Err(Error::config("split fractions must lie in [0,1] and sum to at most 1"));
    }

    let mut rng = rng::seeded(spec.seed);
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let plane = h * w;

    let mut templates = Vec::with_capacity(spec.num_classes);
    for _ in 0..spec.num_classes {
        let mut t = vec![0.5f64; c * plane];
        for ch in 0..c {
            for _ in 0..TEMPLATE_WAVES {
                let (fx, fy) = loop {
                    let fx = rng.random_range(0..=TEMPLATE_MAX_FREQ);
                    let fy = rng.random_range(0..=TEMPLATE_MAX_FREQ);
                    if fx + fy > 0 {
                        break (fx as f64, fy as f64);
                    }
                };
                let amp = rng.random_range(0.08..0.2);
                let phase = rng.random_range(0.0..TAU);
                for y in 0..h {
                    for x in 0..w {
                        let arg = TAU * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64) + phase;
                        t[ch * plane + y * w + x] += amp * arg.cos();
                    }
                }
            }
        }
        templates.push(t);
    }

    let n = spec.num_classes * spec.images_per_class;
    let mut pixels = Vec::with_capacity(n * c * plane);
    let mut labels = Vec::with_capacity(n);
    for (class, t) in templates.iter().enumerate() {
        for _ in 0..spec.images_per_class {
            for &base in t {
                let noise = if spec.noise_std > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    spec.noise_std * z
                } else {
                    0.0
                };
                pixels.push((base + noise).clamp(0.0, 1.0) as f32);
            }
            labels.push(class as u32);
        }
    }

    let (train, val, _) = split_counts(spec.num_classes, spec.val_fraction, spec.test_fraction);
    let splits = (0..spec.num_classes)
        .map(|k| {
            if k < train {
                Split::Train
            } else if k < train + val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect();

    DatasetStore::new(Tensor::new(vec![n, c, h, w], pixels)?, labels, splits)
}
