//! Random HR patches and their area-downscaled LR counterparts.

use std::path::{Path, PathBuf};

use log::warn;

use crate::error::{Error, Result};
use crate::pnm::read_image;
use crate::resample::area_downscale;
use crate::sampling::Factors;
use crate::tensor::{SeededRng, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub hr: Tensor,
    pub lr: Tensor,
}

#[derive(Clone, Debug)]
pub struct PatchDataset {
    images: Vec<Tensor>,
    patch: usize,
    factors: Factors,
}

/// Greyscale images are replicated to three channels.
pub fn to_rgb(img: Tensor) -> Result<Tensor> {
    match img.features() {
        3 => Ok(img),
        1 => Tensor::concat(&[&img, &img, &img]),
        n => Err(Error::Data(format!("expected 1 or 3 channels, got {n}"))),
    }
}

/// Sorted `.ppm` / `.pgm` files of a directory.
pub fn image_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("ppm") || e.eq_ignore_ascii_case("pgm"))
        })
        .collect();
    files.sort();
    Ok(files)
}

impl PatchDataset {
    /// Images smaller than `patch` in either dimension are skipped with a
    /// warning.
    pub fn new(images: Vec<Tensor>, patch: usize, factors: Factors) -> Result<Self> {
        if patch == 0 || !patch.is_multiple_of(factors.m_x) || !patch.is_multiple_of(factors.m_y) {
            return Err(Error::Data(format!("patch size {patch} not divisible by factor {factors}")));
        }
        let mut kept = Vec::with_capacity(images.len());
        for (i, img) in images.into_iter().enumerate() {
            if img.height() < patch || img.width() < patch {
                warn!(
                    "skipping image {i}: {}x{} is smaller than the {patch}x{patch} patch",
                    img.height(),
                    img.width()
                );
                continue;
            }
            kept.push(to_rgb(img)?);
        }
        if kept.is_empty() {
            return Err(Error::Data("no usable images in dataset".into()));
        }
        Ok(PatchDataset {
            images: kept,
            patch,
            factors,
        })
    }

    pub fn from_dir(dir: impl AsRef<Path>, patch: usize, factors: Factors) -> Result<Self> {
        let files = image_files(&dir)?;
        if files.is_empty() {
            return Err(Error::Data(format!("no PPM/PGM images in {}", dir.as_ref().display())));
        }
        let images = files.iter().map(read_image).collect::<Result<Vec<_>>>()?;
        Self::new(images, patch, factors)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn factors(&self) -> Factors {
        self.factors
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    /// Crop of image `index` with top-left corner `(top, left)`.
    pub fn patch_at(&self, index: usize, top: usize, left: usize) -> Result<Patch> {
        let img = &self.images[index];
        let p = self.patch;
        if top + p > img.height() || left + p > img.width() {
            return Err(Error::dim(format!("patch at ({top}, {left}) leaves image {}", img.shape())));
        }
        let hr = Tensor::from_fn(Shape::new(img.features(), p, p), |c, i, j| img.get(c, top + i, left + j));
        let lr = area_downscale(&hr, self.factors)?;
        Ok(Patch { hr, lr })
    }

    /// `n` uniform random crops: image, then position.
    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> Vec<Patch> {
        (0..n)
            .map(|_| {
                let k = rng.below(self.images.len());
                let img = &self.images[k];
                let top = rng.below(img.height() - self.patch + 1);
                let left = rng.below(img.width() - self.patch + 1);
                self.patch_at(k, top, left).expect("crop inside image")
            })
            .collect()
    }
}

pub fn sample_patches(dataset: &PatchDataset, n: usize, seed: u64) -> Vec<Patch> {
    dataset.sample(n, &mut crate::tensor::seeded_rng(seed))
}
