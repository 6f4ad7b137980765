use std::path::PathBuf;

use dinv_core::data::{gen_shapes, load_cifar10_bin, load_idx_mnist, LabeledBatch, Preprocess};
use dinv_core::Model;

use crate::config::DataConfig;
use crate::error::{usage, CliError};

/// XORed into the run seed for the shapes test split.
const TEST_SEED_MASK: u64 = 0x7e57_0000_0000_0000;

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Shapes,
    Mnist(PathBuf),
    Cifar10(PathBuf),
}

impl Source {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s.split_once(':') {
            None if s == "shapes" => Ok(Source::Shapes),
            Some(("mnist", dir)) if !dir.is_empty() => Ok(Source::Mnist(dir.into())),
            Some(("cifar10", dir)) if !dir.is_empty() => Ok(Source::Cifar10(dir.into())),
            _ => Err(usage(format!("--data must be shapes, mnist:DIR or cifar10:DIR, got `{s}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Source::Shapes => "shapes",
            Source::Mnist(_) => "mnist",
            Source::Cifar10(_) => "cifar10",
        }
    }
}

pub struct Dataset {
    pub train: LabeledBatch,
    pub test: LabeledBatch,
}

impl Dataset {
    pub fn load(cfg: &DataConfig, seed: u64) -> Result<Self, CliError> {
        let source = Source::parse(&cfg.source)?;
        let (train, test) = match &source {
            Source::Shapes => (
                gen_shapes(seed, cfg.per_class, cfg.classes, cfg.image_size)?,
                gen_shapes(seed ^ TEST_SEED_MASK, cfg.test_per_class, cfg.classes, cfg.image_size)?,
            ),
            Source::Mnist(dir) => (load_idx_mnist(dir, false)?, load_idx_mnist(dir, true)?),
            Source::Cifar10(dir) => (load_cifar10_bin(dir, false)?, load_cifar10_bin(dir, true)?),
        };
        Ok(Self { train, test })
    }

    pub fn image_shape(&self) -> Vec<usize> {
        self.train.image_shape().to_vec()
    }

    /// Errors unless `model` takes these images and predicts these classes.
    pub fn check_model(&self, model: &Model, role: &str) -> Result<(), CliError> {
        if model.input_shape != self.image_shape() {
            return Err(usage(format!(
                "{role} expects images {:?}, data has {:?}",
                model.input_shape,
                self.image_shape()
            )));
        }
        if model.classes != self.train.classes {
            return Err(usage(format!(
                "{role} has {} classes, data has {}",
                model.classes, self.train.classes
            )));
        }
        Ok(())
    }
}

/// Preprocessing constants without loading any images.
pub fn preprocess_for(cfg: &DataConfig) -> Result<Preprocess, CliError> {
    Ok(Preprocess::for_dataset(Source::parse(&cfg.source)?.name())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sources() {
        assert_eq!(Source::parse("shapes").unwrap(), Source::Shapes);
        assert_eq!(Source::parse("mnist:/d").unwrap(), Source::Mnist("/d".into()));
        assert_eq!(Source::parse("cifar10:x").unwrap(), Source::Cifar10("x".into()));
        for bad in ["", "mnist", "mnist:", "imagenet:/x", "shapes:1"] {
            assert!(Source::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn test_split_differs_from_train() {
        let cfg = DataConfig { image_size: 16, per_class: 2, test_per_class: 2, ..Default::default() };
        let d = Dataset::load(&cfg, 1).unwrap();
        assert_eq!(d.train.len(), 20);
        assert_ne!(d.train.images, d.test.images);
    }

    #[test]
    fn missing_directory_is_a_data_error() {
        let cfg = DataConfig { source: "mnist:/nonexistent/dir".into(), ..Default::default() };
        let e = Dataset::load(&cfg, 0).err().unwrap();
        assert_eq!(e.exit_code(), 3);
    }
}
