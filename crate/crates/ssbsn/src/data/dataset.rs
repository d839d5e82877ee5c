//! Dataset access for self-supervised training. The [`NoisyImages`] trait is
//! the only path from data into the training loop, and it exposes noisy
//! images exclusively — clean images, when present on disk, are reachable
//! only through the separate evaluation accessor, so the training loss cannot
//! touch them by construction.

use crate::data::ppm::read_ppm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};
use std::path::{Path, PathBuf};

/// Source of noisy images for self-supervised training.
pub trait NoisyImages<T: Scalar> {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Noisy image `i` as `(1, 3, h, w)`.
    fn noisy(&self, i: usize) -> Tensor<T>;
}

/// In-memory dataset. Clean references are optional and only used for
/// held-out evaluation metrics, never training.
pub struct MemDataset<T> {
    noisy: Vec<Tensor<T>>,
    clean: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> MemDataset<T> {
    pub fn new(noisy: Vec<Tensor<T>>, clean: Option<Vec<Tensor<T>>>) -> Self {
        if let Some(c) = &clean {
            assert_eq!(c.len(), noisy.len(), "clean/noisy image counts differ");
        }
        MemDataset { noisy, clean }
    }

    /// Clean counterpart of image `i`, for evaluation only.
    pub fn clean_for_eval(&self, i: usize) -> Option<&Tensor<T>> {
        self.clean.as_ref().map(|c| &c[i])
    }

    /// Load from a directory: `noisy/*.ppm` (required), `clean/*.ppm`
    /// (optional, matched by file name). A `manifest.txt` listing one file
    /// name per line fixes the ordering; without it, names are sorted.
    pub fn load_dir(root: &Path) -> Result<Self> {
        let noisy_dir = root.join("noisy");
        if !noisy_dir.is_dir() {
            return Err(Error::Config(format!(
                "dataset {} has no noisy/ directory",
                root.display()
            )));
        }
        let names = Self::image_names(root, &noisy_dir)?;
        if names.is_empty() {
            return Err(Error::Config(format!(
                "dataset {} contains no .ppm images",
                root.display()
            )));
        }
        let mut noisy = Vec::with_capacity(names.len());
        for name in &names {
            noisy.push(read_ppm(&noisy_dir.join(name))?);
        }
        let clean_dir = root.join("clean");
        let clean = if clean_dir.is_dir() {
            let mut imgs = Vec::with_capacity(names.len());
            for name in &names {
                let p = clean_dir.join(name);
                if !p.is_file() {
                    return Err(Error::Config(format!(
                        "clean/ is present but misses {}",
                        p.display()
                    )));
                }
                imgs.push(read_ppm(&p)?);
            }
            Some(imgs)
        } else {
            None
        };
        Ok(MemDataset::new(noisy, clean))
    }

    fn image_names(root: &Path, noisy_dir: &Path) -> Result<Vec<String>> {
        let manifest = root.join("manifest.txt");
        if manifest.is_file() {
            return Ok(std::fs::read_to_string(&manifest)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect());
        }
        let mut names: Vec<String> = std::fs::read_dir(noisy_dir)?
            .filter_map(|e| e.ok().map(|e| PathBuf::from(e.file_name())))
            .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
            .map(|p| p.to_string_lossy().into_owned())
            .collect();
        names.sort();
        Ok(names)
    }
}

impl<T: Scalar> NoisyImages<T> for MemDataset<T> {
    fn len(&self) -> usize {
        self.noisy.len()
    }

    fn noisy(&self, i: usize) -> Tensor<T> {
        self.noisy[i].clone()
    }
}
