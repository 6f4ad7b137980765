//! Synthesizing class-conditional images from a frozen classifier by
//! optimizing input pixels against the batch-norm statistics it stores.

mod export;
mod pca;
mod regularizers;
mod synth;

use serde::{Deserialize, Serialize};

pub use export::{export_ppm, write_ppm};
pub use pca::diversity_projection;
pub use regularizers::{r_compete, r_feature, r_l2, r_prior, r_tv};
pub use synth::{clip_images, regularizer, stats_from_images, synthesize, synthesize_multires, synthesize_with_stats};

use crate::data::Preprocess;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Which regularizers accompany the cross-entropy term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    /// Cross-entropy only.
    NoiseOnly,
    /// Adds the image prior.
    Deepdream,
    /// Adds the prior and batch-norm feature matching.
    Deepinversion,
    /// Adds the prior, feature matching and teacher/student disagreement.
    Adaptive,
}

impl std::str::FromStr for SynthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise_only" => Ok(Self::NoiseOnly),
            "deepdream" => Ok(Self::Deepdream),
            "deepinversion" => Ok(Self::Deepinversion),
            "adaptive" => Ok(Self::Adaptive),
            _ => Err(Error::invalid(format!(
                "unknown synthesis mode `{s}` (noise_only, deepdream, deepinversion, adaptive)"
            ))),
        }
    }
}

/// Target labels of the synthesized images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TargetsRepr", into = "TargetsRepr")]
pub enum Targets {
    /// Each image draws its class uniformly at random.
    UniformRandom,
    /// One label per image; its length must equal the batch size.
    Fixed(Vec<usize>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TargetsRepr {
    Name(String),
    List(Vec<usize>),
}

impl TryFrom<TargetsRepr> for Targets {
    type Error = String;

    fn try_from(r: TargetsRepr) -> std::result::Result<Self, String> {
        match r {
            TargetsRepr::List(v) => Ok(Targets::Fixed(v)),
            TargetsRepr::Name(s) if s == "uniform-random" => Ok(Targets::UniformRandom),
            TargetsRepr::Name(s) => Err(format!("targets must be `uniform-random` or a label list, got `{s}`")),
        }
    }
}

impl From<Targets> for TargetsRepr {
    fn from(t: Targets) -> Self {
        match t {
            Targets::UniformRandom => TargetsRepr::Name("uniform-random".into()),
            Targets::Fixed(v) => TargetsRepr::List(v),
        }
    }
}

/// Coarse-to-fine schedule: optimize at `low_res`, upsample, continue at full size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Multires {
    pub low_res: usize,
    pub low_iters: usize,
    pub high_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub mode: SynthMode,
    pub alpha_tv: f64,
    pub alpha_l2: f64,
    pub alpha_f: f64,
    pub alpha_c: f64,
    pub lr: f64,
    pub iterations: usize,
    pub batch: usize,
    pub targets: Targets,
    pub jitter_px: usize,
    pub random_flip: bool,
    pub clip: Option<Preprocess>,
    pub multires: Option<Multires>,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            mode: SynthMode::Deepinversion,
            alpha_tv: 2.5e-5,
            alpha_l2: 3e-8,
            alpha_f: 1.0,
            alpha_c: 10.0,
            lr: 0.05,
            iterations: 200,
            batch: 64,
            targets: Targets::UniformRandom,
            jitter_px: 2,
            random_flip: true,
            clip: None,
            multires: None,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [
            ("alpha_tv", self.alpha_tv),
            ("alpha_l2", self.alpha_l2),
            ("alpha_f", self.alpha_f),
            ("alpha_c", self.alpha_c),
        ] {
            if !(a >= 0.0) || !a.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {a}")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch must be > 0"));
        }
        if let Targets::Fixed(t) = &self.targets {
            if t.len() != self.batch {
                return Err(Error::invalid(format!("{} targets for batch {}", t.len(), self.batch)));
            }
        }
        Ok(())
    }

    /// Stable 64-bit FNV-1a digest of the configuration.
    pub fn hash(&self) -> u64 {
        let text = format!("{self:?}");
        text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    }
}

/// Loss components at one synthesis iteration (unscaled regularizer values).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub ce: f64,
    pub tv: f64,
    pub l2: f64,
    /// Zero unless the mode includes feature matching.
    pub feature: f64,
    /// Zero unless the mode is adaptive.
    pub compete: f64,
    pub total: f64,
}

/// A synthesized batch in preprocessed space.
#[derive(Debug, Clone)]
pub struct ImageBatch<T: Real = f32> {
    pub pixels: Tensor<T>,
    pub targets: Vec<usize>,
    pub round: usize,
    pub config_hash: u64,
    /// Teacher argmax on the final pixels.
    pub teacher_top1: Vec<usize>,
    /// Teacher softmax probability of its argmax.
    pub confidence: Vec<f64>,
    pub trace: Vec<LossTerms>,
}

impl<T: Real> ImageBatch<T> {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Fraction of images the teacher assigns to their target class.
    pub fn teacher_accuracy(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let hits = self.teacher_top1.iter().zip(&self.targets).filter(|(a, b)| a == b).count();
        hits as f64 / self.len() as f64
    }
}

/// Append-only collection of synthesized batches.
#[derive(Debug, Clone, Default)]
pub struct ImageStore<T: Real = f32> {
    batches: Vec<ImageBatch<T>>,
}

impl<T: Real> ImageStore<T> {
    pub fn new() -> Self {
        Self { batches: Vec::new() }
    }

    pub fn push(&mut self, batch: ImageBatch<T>) -> Result<()> {
        if let Some(first) = self.batches.first() {
            if first.pixels.shape()[1..] != batch.pixels.shape()[1..] {
                return Err(Error::shape(
                    "image_store",
                    format!("{:?} vs stored {:?}", batch.pixels.shape(), first.pixels.shape()),
                ));
            }
        }
        self.batches.push(batch);
        Ok(())
    }

    pub fn batches(&self) -> &[ImageBatch<T>] {
        &self.batches
    }

    pub fn images(&self) -> usize {
        self.batches.iter().map(ImageBatch::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.images() == 0
    }

    /// Image `i` in insertion order as `(batch, row)`.
    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (b, batch) in self.batches.iter().enumerate() {
            if i < batch.len() {
                return (b, i);
            }
            i -= batch.len();
        }
        panic!("image index out of range")
    }

    /// Images at global indices, stacked in order.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let total = self.images();
        if let Some(&bad) = indices.iter().find(|&&i| i >= total) {
            return Err(Error::invalid(format!("image {bad} out of {total}")));
        }
        let first = self.batches.first().ok_or_else(|| Error::invalid("empty image store"))?;
        let per: usize = first.pixels.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            let (b, r) = self.locate(i);
            data.extend_from_slice(&self.batches[b].pixels.data()[r * per..(r + 1) * per]);
        }
        let mut shape = first.pixels.shape().to_vec();
        shape[0] = indices.len();
        Tensor::from_vec(&shape, data)
    }

    /// Every stored image.
    pub fn all(&self) -> Result<Tensor<T>> {
        let parts: Vec<&Tensor<T>> = self.batches.iter().map(|b| &b.pixels).collect();
        if parts.is_empty() {
            return Err(Error::invalid("empty image store"));
        }
        Tensor::cat_outer(&parts)
    }

    /// Target labels of every stored image, in insertion order.
    pub fn targets(&self) -> Vec<usize> {
        self.batches.iter().flat_map(|b| b.targets.iter().copied()).collect()
    }
}
