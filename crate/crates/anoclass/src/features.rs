//! Labeled feature tensors behind one interface, so training loops work the
//! same whether the data sits in memory (toys, fine-tuning support sets) or
//! streams from feature-cache files with residuals computed on demand
//! (pseudo-class pretraining at real scale).

use std::path::PathBuf;

use ndarray::Array3;

use crate::backbone::{read_feature_map, write_feature_map, FeatureSidecar};
use crate::bank::MemoryBank;
use crate::error::{Error, Result};

/// A indexed collection of labeled (C, H, W) feature tensors.
pub trait FeatureSource: Sync {
    fn len(&self) -> usize;
    fn class_of(&self, index: usize) -> usize;
    fn tensor(&self, index: usize) -> Result<Array3<f32>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn class_count(&self) -> usize {
        (0..self.len())
            .map(|i| self.class_of(i) + 1)
            .max()
            .unwrap_or(0)
    }
}

impl FeatureSource for [(Array3<f32>, usize)] {
    fn len(&self) -> usize {
        <[_]>::len(self)
    }

    fn class_of(&self, index: usize) -> usize {
        self[index].1
    }

    fn tensor(&self, index: usize) -> Result<Array3<f32>> {
        Ok(self[index].0.clone())
    }
}

impl FeatureSource for Vec<(Array3<f32>, usize)> {
    fn len(&self) -> usize {
        <[_]>::len(self)
    }

    fn class_of(&self, index: usize) -> usize {
        self[index].1
    }

    fn tensor(&self, index: usize) -> Result<Array3<f32>> {
        Ok(self[index].0.clone())
    }
}

/// Feature-cache files with labels; tensors are raw feature maps or
/// residuals against a bank, optionally cached to disk per entry so repeated
/// episode sampling does not recompute nearest neighbors.
pub struct FileFeatures<'a> {
    entries: Vec<(PathBuf, usize)>,
    bank: Option<&'a MemoryBank>,
    cache_dir: Option<PathBuf>,
}

impl<'a> FileFeatures<'a> {
    pub fn new(
        entries: Vec<(PathBuf, usize)>,
        bank: Option<&'a MemoryBank>,
        cache_dir: Option<PathBuf>,
    ) -> Result<Self> {
        if let Some(dir) = &cache_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(FileFeatures {
            entries,
            bank,
            cache_dir,
        })
    }

    fn cache_path(&self, index: usize) -> Option<PathBuf> {
        let dir = self.cache_dir.as_ref()?;
        let (path, label) = &self.entries[index];
        let stem = path.file_stem()?.to_string_lossy();
        Some(dir.join(format!("{label}_{stem}.anof")))
    }
}

impl FeatureSource for FileFeatures<'_> {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn class_of(&self, index: usize) -> usize {
        self.entries[index].1
    }

    fn tensor(&self, index: usize) -> Result<Array3<f32>> {
        let (path, _) = &self.entries[index];
        let bank = match self.bank {
            None => return Ok(read_feature_map(path)?.to_feature_tensor()),
            Some(b) => b,
        };
        if let Some(cache) = self.cache_path(index) {
            if cache.exists() {
                return Ok(read_feature_map(&cache)?.to_feature_tensor());
            }
            let map = read_feature_map(path)?;
            let residual = bank.residual_map(&map)?;
            let cached_map = crate::backbone::PatchFeatureMap::new(
                residual.residuals.clone(),
                residual.grid,
                map.source_image_id.clone(),
            )?;
            let sidecar = FeatureSidecar::new(
                &path.to_string_lossy(),
                &format!("residual-seed{}", bank.seed()),
                0,
            );
            write_feature_map(&cache, &cached_map, &sidecar)?;
            return Ok(residual.to_feature_tensor());
        }
        let map = read_feature_map(path)?;
        Ok(bank.residual_map(&map)?.to_feature_tensor())
    }
}
