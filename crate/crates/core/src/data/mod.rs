//! Synthetic planted-patch dataset and dataset/feature file IO.
//!
//! Every class owns `signatures` fixed tiles. A sample places its class's
//! tiles on randomly chosen grid cells, a few shared distractor tiles on
//! other cells, and flat gray background elsewhere; pixel noise is added on
//! top and clamped to `[0, 1]`. The signature cells are recorded so that
//! patch selections can be scored against ground truth.

pub(crate) mod format;

pub use format::{load_dataset, load_feature_set, save_dataset, save_feature_set, DATASET_VERSION, FEATURE_VERSION};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

/// Gray level of background cells before noise.
pub const BACKGROUND_LEVEL: f64 = 0.5;
/// Range the signature and distractor tile pixels are drawn from.
pub const TILE_RANGE: (f64, f64) = (0.2, 0.8);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub cols: usize,
    pub tile: usize,
    pub channels: usize,
    pub classes: usize,
    pub signatures: usize,
    pub noise: f64,
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            rows: 8,
            cols: 8,
            tile: 4,
            channels: 1,
            classes: 10,
            signatures: 3,
            noise: 0.1,
            distractors: 2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn patch_dim(&self) -> usize {
        self.tile * self.tile * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.tile == 0 {
            return Err(Error::Config("grid and tile sizes must be at least 1".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("classes must be at least 2, got {}", self.classes)));
        }
        if self.signatures == 0 {
            return Err(Error::Config("signatures must be at least 1".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        let k = self.patch_count();
        if self.signatures + self.distractors > k {
            return Err(Error::Config(format!(
                "signatures ({}) + distractors ({}) exceed the {k} grid cells",
                self.signatures, self.distractors
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: usize,
    pub signature_positions: Vec<usize>,
    /// `K * patch_dim` values; each patch is a tile in row-major pixel order
    /// with channels interleaved.
    pub patches: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub patch_count: usize,
    pub patch_dim: usize,
    pub classes: usize,
    pub signatures: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Grid layout and channel count implied by the header; see [`infer_layout`].
    pub fn layout(&self) -> Result<Layout> {
        infer_layout(self.patch_count, self.patch_dim)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub tile: usize,
    pub channels: usize,
}

/// Square grids and square grayscale (or RGB) tiles are the only layouts
/// the dataset format can describe without extra header fields. A grid
/// that is not a perfect square is laid out as the most nearly square
/// factorization with `rows <= cols`.
pub fn infer_layout(patch_count: usize, patch_dim: usize) -> Result<Layout> {
    if patch_count == 0 || patch_dim == 0 {
        return Err(Error::dim("empty grid or patch"));
    }
    let rows = (1..=patch_count)
        .take_while(|r| r * r <= patch_count)
        .filter(|r| patch_count % r == 0)
        .last()
        .unwrap_or(1);
    let square = |n: usize| {
        let t = (n as f64).sqrt().round() as usize;
        (t * t == n).then_some(t)
    };
    let (tile, channels) = match square(patch_dim) {
        Some(t) => (t, 1),
        None => match (patch_dim % 3 == 0).then(|| square(patch_dim / 3)).flatten() {
            Some(t) => (t, 3),
            None => return Err(Error::dim(format!("patch_dim {patch_dim} is not a square tile"))),
        },
    };
    Ok(Layout {
        rows,
        cols: patch_count / rows,
        tile,
        channels,
    })
}

fn uniform_tile<R: Rng>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(TILE_RANGE.0..TILE_RANGE.1)).collect()
}

/// The fixed signature tiles of one class.
pub fn signature_tiles(spec: &SyntheticSpec, class: usize) -> Vec<Vec<f64>> {
    let mut r = rng::keyed(&[stream::SIGNATURE, spec.seed, class as u64]);
    (0..spec.signatures).map(|_| uniform_tile(spec.patch_dim(), &mut r)).collect()
}

pub fn distractor_tiles(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut r = rng::keyed(&[stream::DISTRACTOR, spec.seed]);
    (0..spec.distractors).map(|_| uniform_tile(spec.patch_dim(), &mut r)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train = 0,
    Test = 1,
}

struct Generator<'a> {
    spec: &'a SyntheticSpec,
    signatures: Vec<Vec<Vec<f64>>>,
    distractors: Vec<Vec<f64>>,
    noise: Option<Normal<f64>>,
}

impl<'a> Generator<'a> {
    fn new(spec: &'a SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let noise = if spec.noise > 0.0 {
            Some(Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?)
        } else {
            None
        };
        Ok(Generator {
            spec,
            signatures: (0..spec.classes).map(|c| signature_tiles(spec, c)).collect(),
            distractors: distractor_tiles(spec),
            noise,
        })
    }

    fn sample(&self, split: Split, index: usize) -> Sample {
        let spec = self.spec;
        let (k, p) = (spec.patch_count(), spec.patch_dim());
        let label = index % spec.classes;
        let mut r = rng::keyed(&[stream::SAMPLE, spec.seed, split as u64, index as u64]);
        let mut cells: Vec<usize> = (0..k).collect();
        cells.shuffle(&mut r);
        let mut patches = vec![BACKGROUND_LEVEL; k * p];
        let placed = self.signatures[label].iter().chain(&self.distractors);
        for (&cell, tile) in cells.iter().zip(placed) {
            patches[cell * p..(cell + 1) * p].copy_from_slice(tile);
        }
        if let Some(noise) = &self.noise {
            for v in &mut patches {
                *v = (*v + noise.sample(&mut r)).clamp(0.0, 1.0);
            }
        }
        Sample {
            label,
            signature_positions: cells[..spec.signatures].to_vec(),
            patches,
        }
    }

    fn split(&self, split: Split, size: usize) -> Dataset {
        Dataset {
            patch_count: self.spec.patch_count(),
            patch_dim: self.spec.patch_dim(),
            classes: self.spec.classes,
            signatures: self.spec.signatures,
            samples: (0..size).map(|i| self.sample(split, i)).collect(),
        }
    }
}

/// Generates the train and test splits. Each sample depends only on
/// `(spec, split, index)`.
pub fn generate(spec: &SyntheticSpec, train_size: usize, test_size: usize) -> Result<(Dataset, Dataset)> {
    if train_size == 0 || test_size == 0 {
        return Err(Error::Config("split sizes must be at least 1".into()));
    }
    let gen = Generator::new(spec)?;
    Ok((gen.split(Split::Train, train_size), gen.split(Split::Test, test_size)))
}

/// A single sample, generated without materializing its split.
pub fn generate_sample(spec: &SyntheticSpec, split: Split, index: usize) -> Result<Sample> {
    Ok(Generator::new(spec)?.sample(split, index))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSample {
    pub label: usize,
    /// `K * D` values.
    pub features: Vec<f64>,
}

/// Precomputed patch features that stand in for the encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub patch_count: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub samples: Vec<FeatureSample>,
}

impl FeatureSet {
    /// Rejects feature sets whose shape disagrees with a model's grid size
    /// or model dimension.
    pub fn check_model(&self, patch_count: usize, model_dim: usize) -> Result<()> {
        if self.patch_count != patch_count {
            return Err(Error::dim(format!(
                "feature set has K={} but the model grid holds {patch_count} patches",
                self.patch_count
            )));
        }
        if self.feature_dim != model_dim {
            return Err(Error::dim(format!(
                "feature set has D={} but the model dimension is {model_dim}",
                self.feature_dim
            )));
        }
        Ok(())
    }
}
