//! Labeled image sources: procedural shapes, MNIST (IDX) and CIFAR-10 (binary).

mod cifar;
mod idx;
mod shapes;

use std::collections::BTreeMap;

pub use cifar::{load_cifar10_bin, parse_cifar10, CIFAR_RECORD};
pub use idx::{load_idx_mnist, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use shapes::{gen_shapes, render_shapes_raw, SHAPE_NAMES};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Images in preprocessed (normalized) space with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch<T: Real = f32> {
    /// `[N, C, H, W]`
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Real> LabeledBatch<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "labeled_batch",
                format!("{} labels for images {:?}", labels.len(), images.shape()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select_outer(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
        })
    }

    /// Examples whose label is in `[lo, hi)`.
    pub fn filter_classes(&self, lo: usize, hi: usize) -> Result<Self> {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| (lo..hi).contains(&self.labels[i])).collect();
        self.select(&rows)
    }

    /// Same images with labels shifted down by `offset`, over `classes` classes.
    pub fn relabel(&self, offset: usize, classes: usize) -> Result<Self> {
        let labels = self
            .labels
            .iter()
            .map(|&l| l.checked_sub(offset).filter(|&v| v < classes))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::invalid(format!("labels do not fit [{offset}, {})", offset + classes)))?;
        Self::new(self.images.clone(), labels, classes)
    }

    /// Drops the labels. Distillation APIs only accept unlabeled images.
    pub fn images_only(&self) -> Tensor<T> {
        self.images.clone()
    }
}

/// Per-channel normalization `(x - mean) / std` applied to `[0, 1]` pixels.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Preprocess {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Preprocess {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::invalid("preprocess mean/std lengths differ or are empty"));
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("preprocess std must be > 0"));
        }
        Ok(Self { mean, std })
    }

    /// The usual ImageNet constants.
    pub fn imagenet() -> Self {
        Self {
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }

    /// Stored constants for a named dataset (`shapes`, `cifar10`, `mnist`, `imagenet`).
    pub fn for_dataset(name: &str) -> Result<Self> {
        let manifest = dataset_manifest();
        let get = |key: &str| -> Result<Vec<f64>> {
            let raw = manifest
                .get(&format!("{name}.{key}"))
                .ok_or_else(|| Error::invalid(format!("no preprocessing constants for dataset `{name}`")))?;
            raw.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad manifest value {raw}"))))
                .collect()
        };
        Self::new(get("mean")?, get("std")?)
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Per-channel `[-m/s, (1-m)/s]`, the image of `[0, 1]` pixels.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(&m, &s)| (-m / s, (1.0 - m) / s))
            .collect()
    }

    fn check<T: Real>(&self, images: &Tensor<T>) -> Result<usize> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.channels() {
            return Err(Error::shape(
                "preprocess",
                format!("{} channels vs images {s:?}", self.channels()),
            ));
        }
        Ok(s[2] * s[3])
    }

    pub fn apply<T: Real>(&self, images: &mut Tensor<T>) -> Result<()> {
        let plane = self.check(images)?;
        let c = self.channels();
        for (i, chunk) in images.data_mut().chunks_mut(plane).enumerate() {
            let ch = i % c;
            let (m, s) = (T::lit(self.mean[ch]), T::lit(self.std[ch]));
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(())
    }

    pub fn invert<T: Real>(&self, images: &mut Tensor<T>) -> Result<()> {
        let plane = self.check(images)?;
        let c = self.channels();
        for (i, chunk) in images.data_mut().chunks_mut(plane).enumerate() {
            let ch = i % c;
            let (m, s) = (T::lit(self.mean[ch]), T::lit(self.std[ch]));
            chunk.iter_mut().for_each(|v| *v = *v * s + m);
        }
        Ok(())
    }

    /// Per-channel mean and std of `[0, 1]` images.
    pub fn estimate<T: Real>(images: &Tensor<T>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] == 0 {
            return Err(Error::shape("preprocess", format!("cannot estimate from {s:?}")));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, chunk) in images.data().chunks(plane).enumerate() {
            let ch = i % c;
            for v in chunk {
                let v = v.to_f64().unwrap();
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
        let count = (n * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / count - m * m).max(0.0).sqrt())
            .collect();
        Self::new(mean, std)
    }
}

const DATASET_MANIFEST: &str = include_str!("../../assets/datasets.manifest");

/// `key=value` pairs of the bundled dataset manifest.
pub fn dataset_manifest() -> BTreeMap<String, String> {
    parse_key_values(DATASET_MANIFEST)
}

/// Parses `key=value` lines, skipping blanks and `#` comments.
pub fn parse_key_values(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// `u8` pixels (`[N, C, H, W]` order) to normalized tensor.
pub(crate) fn pixels_to_batch<T: Real>(
    pixels: &[u8],
    labels: Vec<usize>,
    shape: [usize; 3],
    classes: usize,
    pre: &Preprocess,
) -> Result<LabeledBatch<T>> {
    let n = labels.len();
    let data = pixels.iter().map(|&p| T::lit(p as f64 / 255.0)).collect();
    let mut images = Tensor::from_vec(&[n, shape[0], shape[1], shape[2]], data)?;
    pre.apply(&mut images)?;
    LabeledBatch::new(images, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalized_extremes() {
        let p = Preprocess::imagenet();
        let mut t = Tensor::<f64>::from_vec(&[1, 3, 1, 2], vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        p.apply(&mut t).unwrap();
        assert!((t.data()[0] - (-2.117_903_930_131_004)).abs() < 1e-12);
        assert!((t.data()[1] - 2.248_908_296_943_231_3).abs() < 1e-12);
    }

    #[test]
    fn manifest_has_all_datasets() {
        for name in ["shapes", "cifar10", "mnist", "imagenet"] {
            let p = Preprocess::for_dataset(name).unwrap();
            assert!(p.std.iter().all(|&s| s > 0.0));
        }
        assert_eq!(Preprocess::for_dataset("imagenet").unwrap(), Preprocess::imagenet());
        assert!(Preprocess::for_dataset("coco").is_err());
    }

    #[test]
    fn invalid_std_rejected() {
        assert!(Preprocess::new(vec![0.5], vec![0.0]).is_err());
    }

    proptest! {
        #[test]
        fn apply_then_invert_is_identity(vals in prop::collection::vec(0.0f64..1.0, 12), m in 0.0f64..1.0, s in 0.05f64..2.0) {
            let p = Preprocess::new(vec![m, 1.0 - m, 0.5], vec![s, 1.0, s * 0.5]).unwrap();
            let orig = Tensor::<f64>::from_vec(&[1, 3, 2, 2], vals).unwrap();
            let mut t = orig.clone();
            p.apply(&mut t).unwrap();
            p.invert(&mut t).unwrap();
            for (a, b) in t.data().iter().zip(orig.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
