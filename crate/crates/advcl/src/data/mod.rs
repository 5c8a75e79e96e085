//! Dataset ingestion, batching, seeding and the stochastic augmentation set.

mod augment;
mod cifar;
mod synthetic;

pub use augment::{augment, resize_bilinear, AugmentConfig};
pub use synthetic::SyntheticSpec;

use crate::error::{Error, Result};
use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::path::Path;

/// Derives an independent RNG from a master seed and a stream tag path.
///
/// All stochastic choices in the pipeline (shuffling, augmentation draws,
/// attack inits) key their RNGs on `(seed, tags…)` so runs are reproducible
/// and resumable from any (epoch, step) without serializing RNG state.
pub fn rng_for(seed: u64, tags: &[u64]) -> ChaCha12Rng {
    let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        state = state.wrapping_add(t).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        state ^= state >> 31;
    }
    ChaCha12Rng::seed_from_u64(state)
}

/// A batch of images: `[B, C, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    pub data: Array4<f64>,
}

impl ImageBatch {
    /// Validates shape and value invariants.
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (b, c, h, w) = data.dim();
        if b < 1 {
            return Err(Error::Validation("empty batch".into()));
        }
        if c != 1 && c != 3 {
            return Err(Error::Validation(format!("channels must be 1 or 3, got {c}")));
        }
        if h != w {
            return Err(Error::Validation(format!("images must be square, got {h}x{w}")));
        }
        for &v in data.iter() {
            if !v.is_finite() {
                return Err(Error::Validation("non-finite pixel value".into()));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("pixel {v} outside [0,1]")));
            }
        }
        Ok(ImageBatch { data })
    }

    /// Wraps without value checks; shapes are still asserted in debug builds.
    pub fn from_raw(data: Array4<f64>) -> Self {
        debug_assert_eq!(data.dim().2, data.dim().3);
        ImageBatch { data }
    }

    pub fn len(&self) -> usize {
        self.data.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().1
    }

    pub fn size(&self) -> usize {
        self.data.dim().2
    }
}

/// Images plus integer class labels.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(images: ImageBatch, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != images.len() {
            return Err(Error::Validation(format!(
                "label count {} does not match batch size {}",
                labels.len(),
                images.len()
            )));
        }
        Ok(LabeledBatch { images, labels })
    }
}

#[derive(Debug)]
enum Storage {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

/// In-memory dataset with deterministic iteration order.
#[derive(Debug)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub channels: usize,
    pub image_size: usize,
    storage: Storage,
    labels: Vec<u16>,
}

/// Train/test split selector.
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn pixels_per_image(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    /// Materializes the images at `indices` as an f64 batch in `[0,1]`.
    pub fn gather(&self, indices: &[usize]) -> LabeledBatch {
        let ppi = self.pixels_per_image();
        let (c, s) = (self.channels, self.image_size);
        let mut data = Array4::<f64>::zeros((indices.len(), c, s, s));
        let flat = data.as_slice_mut().unwrap();
        for (bi, &i) in indices.iter().enumerate() {
            let dst = &mut flat[bi * ppi..(bi + 1) * ppi];
            match &self.storage {
                Storage::U8(raw) => {
                    for (d, &v) in dst.iter_mut().zip(&raw[i * ppi..(i + 1) * ppi]) {
                        *d = v as f64 / 255.0;
                    }
                }
                Storage::F64(raw) => dst.copy_from_slice(&raw[i * ppi..(i + 1) * ppi]),
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        LabeledBatch {
            images: ImageBatch::from_raw(data),
            labels,
        }
    }

    /// Batches in dataset order; the trailing short batch is kept.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = LabeledBatch> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batches_in_order(idx, batch_size)
    }

    /// Batches following an explicit index order.
    pub fn batches_in_order(
        &self,
        order: Vec<usize>,
        batch_size: usize,
    ) -> impl Iterator<Item = LabeledBatch> + '_ {
        assert!(batch_size > 0);
        let mut pos = 0;
        std::iter::from_fn(move || {
            if pos >= order.len() {
                return None;
            }
            let end = (pos + batch_size).min(order.len());
            let batch = self.gather(&order[pos..end]);
            pos = end;
            Some(batch)
        })
    }

    /// Restriction to the given sample indices.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let ppi = self.pixels_per_image();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let storage = match &self.storage {
            Storage::U8(raw) => Storage::U8(
                indices
                    .iter()
                    .flat_map(|&i| raw[i * ppi..(i + 1) * ppi].iter().copied())
                    .collect(),
            ),
            Storage::F64(raw) => Storage::F64(
                indices
                    .iter()
                    .flat_map(|&i| raw[i * ppi..(i + 1) * ppi].iter().copied())
                    .collect(),
            ),
        };
        Dataset {
            name: self.name.clone(),
            num_classes: self.num_classes,
            channels: self.channels,
            image_size: self.image_size,
            storage,
            labels,
        }
    }

    /// Keeps only the listed classes and relabels them `0..keep.len()`.
    pub fn filter_classes(&self, keep: &[usize]) -> Dataset {
        let indices: Vec<usize> = (0..self.len())
            .filter(|&i| keep.contains(&(self.labels[i] as usize)))
            .collect();
        let mut out = self.subset(&indices);
        out.num_classes = keep.len();
        for l in out.labels.iter_mut() {
            *l = keep.iter().position(|&k| k == *l as usize).unwrap() as u16;
        }
        out
    }

    /// First `n` samples (dataset order).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..self.len().min(n)).collect();
        self.subset(&idx)
    }

    pub(crate) fn from_f64(
        name: &str,
        num_classes: usize,
        channels: usize,
        image_size: usize,
        pixels: Vec<f64>,
        labels: Vec<u16>,
    ) -> Dataset {
        Dataset {
            name: name.into(),
            num_classes,
            channels,
            image_size,
            storage: Storage::F64(pixels),
            labels,
        }
    }

    pub(crate) fn from_u8(
        name: &str,
        num_classes: usize,
        channels: usize,
        image_size: usize,
        pixels: Vec<u8>,
        labels: Vec<u16>,
    ) -> Dataset {
        Dataset {
            name: name.into(),
            num_classes,
            channels,
            image_size,
            storage: Storage::U8(pixels),
            labels,
        }
    }
}

/// Loads a dataset by id. `"synthetic"` ignores `root` and uses `spec`;
/// `"cifar10"` / `"cifar100"` read the standard binary files under `root`.
pub fn load_dataset(
    name: &str,
    split: Split,
    root: &Path,
    spec: Option<&SyntheticSpec>,
) -> Result<Dataset> {
    match name {
        "synthetic" => {
            let default = SyntheticSpec::default();
            Ok(synthetic::generate(spec.unwrap_or(&default), split))
        }
        "cifar10" => cifar::load_cifar10(root, split),
        "cifar100" => cifar::load_cifar100(root, split),
        other => Err(Error::Config(format!("unknown dataset {other:?}"))),
    }
}

/// Stream tags for [`rng_for`].
pub mod stream {
    pub const SHUFFLE: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const ATTACK: u64 = 3;
    pub const INIT: u64 = 4;
    pub const CLUSTER: u64 = 5;
    pub const ANALYSIS: u64 = 6;
}

/// Deterministic per-epoch shuffle order.
pub fn shuffle_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(seed, &[stream::SHUFFLE, epoch as u64]);
    order.shuffle(&mut rng);
    order
}
