//! Synthetic shifted datasets with a known, planted domain shift.
//!
//! Class prototypes are drawn uniformly on the unit sphere. A single shift
//! vector `v` of norm `shift_magnitude` is placed either inside the span of
//! the prototypes' steering basis or in its orthogonal complement, and every
//! view of a class-`y` sample is `normalize(z_y + v + noise_scale·ε)` with
//! `ε ~ N(0, I)`.
//!
//! Everything is rounded through `f32` exactly as the bundle format stores
//! it, so the in-memory dataset and one written to disk and read back are
//! identical.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample};
use crate::error::{Result, StsError};
use crate::objective::ViewBatch;
use crate::prototypes::{build_prototypes, DEFAULT_LOGIT_SCALE};
use crate::spectral::{steering_basis, RankSpec, SteeringBasis};
use crate::storage::{write_bundle, DatasetManifest, Provenance, SampleEntry, MANIFEST_SCHEMA_VERSION};

/// Attempts at drawing a shift direction with a usable projection.
const SHIFT_DRAWS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub views_per_sample: usize,
    pub samples_per_class: usize,
    pub shift_magnitude: f64,
    /// Plant the shift inside the steering subspace (true) or orthogonal to it.
    pub shift_in_basis: bool,
    pub noise_scale: f64,
    pub seed: u64,
    /// Rank rule for the subspace the shift is planted relative to.
    pub rank: RankSpec,
    pub logit_scale: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 10,
            dim: 64,
            views_per_sample: 64,
            samples_per_class: 10,
            shift_magnitude: 0.4,
            shift_in_basis: true,
            noise_scale: 0.05,
            seed: 0,
            rank: RankSpec::GavishDonoho,
            logit_scale: DEFAULT_LOGIT_SCALE,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(StsError::Spec(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.dim < 2 {
            return Err(StsError::Spec(format!("need dimension at least 2, got {}", self.dim)));
        }
        if self.views_per_sample == 0 || self.samples_per_class == 0 {
            return Err(StsError::Spec("views_per_sample and samples_per_class must be positive".into()));
        }
        for (name, x) in [("shift_magnitude", self.shift_magnitude), ("noise_scale", self.noise_scale)] {
            if !(x.is_finite() && x >= 0.0) {
                return Err(StsError::Spec(format!("{name} = {x} must be finite and non-negative")));
            }
        }
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return Err(StsError::Spec(format!("logit_scale {} must be positive", self.logit_scale)));
        }
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.dim < self.num_classes {
            w.push(format!(
                "dim {} < num_classes {}: prototypes cannot be near-orthogonal",
                self.dim, self.num_classes
            ));
        }
        w
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub dataset: Dataset,
    pub basis: SteeringBasis,
    /// The planted shift `v`.
    pub shift: DVector<f64>,
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let (c, d) = (spec.num_classes, spec.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut raw = DMatrix::zeros(c, d);
    for mut row in raw.row_iter_mut() {
        let mut g = gaussian_vec(&mut rng, d);
        g /= g.norm();
        row.copy_from(&g.transpose().map(round_f32));
    }
    let class_names: Vec<String> = (0..c).map(|i| format!("class_{i:03}")).collect();
    let prototypes = build_prototypes(&[raw], class_names, spec.logit_scale)?;
    let (_, basis) = steering_basis(prototypes.z(), &spec.rank, false)?;

    if !spec.shift_in_basis && basis.k_t() >= d {
        return Err(StsError::Spec(format!(
            "the steering basis spans all {d} dimensions, so there is no orthogonal complement to plant the shift in"
        )));
    }
    let mut shift = DVector::zeros(d);
    if spec.shift_magnitude > 0.0 {
        let mut found = false;
        for _ in 0..SHIFT_DRAWS {
            let r = gaussian_vec(&mut rng, d);
            let inside = &basis.b * (basis.b.transpose() * &r);
            let dir = if spec.shift_in_basis { inside } else { r - inside };
            let n = dir.norm();
            if n > 1e-6 {
                shift = dir * (spec.shift_magnitude / n);
                found = true;
                break;
            }
        }
        if !found {
            return Err(StsError::Spec("could not draw a shift direction in the requested subspace".into()));
        }
    }

    let n_samples = c * spec.samples_per_class;
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let label = i % c;
        let centre = prototypes.z().row(label).transpose() + &shift;
        let mut views = DMatrix::zeros(spec.views_per_sample, d);
        for mut row in views.row_iter_mut() {
            let mut x = &centre + gaussian_vec(&mut rng, d) * spec.noise_scale;
            let n = x.norm();
            if n == 0.0 {
                return Err(StsError::Spec(format!("sample {i} produced a zero view")));
            }
            x /= n;
            row.copy_from(&x.transpose().map(round_f32));
        }
        samples.push(Sample {
            views: ViewBatch::new(format!("s{i:05}"), views, 0)?,
            label: Some(label),
        });
    }

    Ok(SynthDataset {
        spec: *spec,
        dataset: Dataset { prototypes, samples },
        basis,
        shift,
    })
}

impl SynthDataset {
    /// Writes bundles plus `manifest.json` under `dir`; returns the manifest.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        let proto_rel = Path::new("prototypes").join("t0.stse");
        write_bundle(self.dataset.prototypes.z(), &dir.join(&proto_rel))?;
        let mut entries = Vec::with_capacity(self.dataset.samples.len());
        for s in &self.dataset.samples {
            let rel = Path::new("views").join(format!("{}.stse", s.views.sample_id));
            write_bundle(s.views.views(), &dir.join(&rel))?;
            entries.push(SampleEntry {
                sample_id: s.views.sample_id.clone(),
                views: rel,
                label: s.label,
                original_index: s.views.original_index,
            });
        }
        let manifest = DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            class_names: self.dataset.prototypes.class_names().to_vec(),
            templates: vec!["synthetic".into()],
            logit_scale: self.dataset.prototypes.logit_scale(),
            prototype_bundles: vec![proto_rel],
            samples: entries,
            augmentation: format!(
                "synthetic: normalize(z_label + shift + {} * N(0, I)), shift norm {}, in basis: {}",
                self.spec.noise_scale, self.spec.shift_magnitude, self.spec.shift_in_basis
            ),
            provenance: Provenance {
                model: format!("synthetic(seed={})", self.spec.seed),
                checkpoint_hash: self.dataset.fingerprint(),
            },
            base_dir: dir.to_path_buf(),
        };
        manifest.write(&dir.join("manifest.json"))?;
        Ok(manifest)
    }
}

/// Generate and write in one go.
pub fn synthesize(spec: &SynthSpec, dir: &Path) -> Result<(SynthDataset, DatasetManifest)> {
    let data = generate(spec)?;
    let manifest = data.write(dir)?;
    Ok((data, manifest))
}
