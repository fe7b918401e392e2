//! A fully loaded evaluation set: prototypes plus every sample's views.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::objective::ViewBatch;
use crate::prototypes::PrototypeSet;
use crate::storage::{load_manifest, DatasetManifest};

#[derive(Debug, Clone)]
pub struct Sample {
    pub views: ViewBatch,
    pub label: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub prototypes: PrototypeSet,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let prototypes = manifest.load_prototypes()?;
        let samples = manifest
            .samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    views: manifest.load_views(s)?,
                    label: s.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { prototypes, samples })
    }

    pub fn open(manifest_path: &Path) -> Result<Self> {
        Self::from_manifest(&load_manifest(manifest_path)?)
    }

    pub fn unlabeled_ids(&self) -> Vec<String> {
        self.samples
            .iter()
            .filter(|s| s.label.is_none())
            .map(|s| s.views.sample_id.clone())
            .collect()
    }

    /// SHA-256 over prototypes, sample ids, labels and views, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let feed = |h: &mut Sha256, m: &nalgebra::DMatrix<f64>| {
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    h.update(m[(r, c)].to_le_bytes());
                }
            }
        };
        for name in self.prototypes.class_names() {
            h.update(name.as_bytes());
            h.update([0]);
        }
        feed(&mut h, self.prototypes.z());
        for s in &self.samples {
            h.update(s.views.sample_id.as_bytes());
            h.update([0]);
            h.update(s.label.map_or(u64::MAX, |l| l as u64).to_le_bytes());
            feed(&mut h, s.views.views());
        }
        hex::encode(h.finalize())
    }
}
