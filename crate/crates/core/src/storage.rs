//! On-disk formats: embedding bundles, the dataset manifest and results.
//!
//! # Bundle layout
//!
//! Every integer is little-endian.
//!
//! ```text
//! offset  size  field
//!      0     4  magic   "STSE"
//!      4     4  version u32 = 1
//!      8     4  rows    u32 >= 1
//!     12     4  cols    u32 >= 1
//!     16     1  dtype   u8, 0 = f32
//!     17  4·r·c payload, row-major f32
//! ```
//!
//! Readers reject anything else: wrong magic, version or dtype, zero
//! dimensions, short or over-long files and non-finite values.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::episode::{AdaptConfig, EpisodeResult};
use crate::error::{Result, StsError};
use crate::objective::ViewBatch;
use crate::prototypes::{build_prototypes, PrototypeSet};
use crate::spectral::RankSelection;

pub const MAGIC: [u8; 4] = *b"STSE";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 17;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BundleHeader {
    pub rows: u32,
    pub cols: u32,
    pub dtype: u8,
}

impl BundleHeader {
    /// Saturates at `u64::MAX` for shapes no file could hold.
    pub fn payload_len(&self) -> u64 {
        (self.rows as u64 * self.cols as u64).saturating_mul(4)
    }
}

/// A row-major `f32` matrix exactly as stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Bundle {
    /// Narrows to `f32`; values that do not survive the cast are rejected.
    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        let (rows, cols) = m.shape();
        if rows == 0 || cols == 0 {
            return Err(StsError::InvalidInput("cannot store an empty matrix".into()));
        }
        if rows > u32::MAX as usize || cols > u32::MAX as usize {
            return Err(StsError::InvalidInput(format!("{rows}x{cols} exceeds the u32 header fields")));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let x = m[(r, c)] as f32;
                if !x.is_finite() {
                    return Err(StsError::InvalidData(format!(
                        "value {} at ({r}, {c}) is not a finite f32",
                        m[(r, c)]
                    )));
                }
                data.push(x);
            }
        }
        Ok(Bundle { rows, cols, data })
    }

    /// Widens to `f64`.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |r, c| self.data[r * self.cols + c] as f64)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.push(DTYPE_F32);
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header = decode_header(bytes)?;
        let expected = header.payload_len().saturating_add(HEADER_LEN as u64);
        let actual = bytes.len() as u64;
        if actual < expected {
            return Err(StsError::Corruption(format!(
                "payload truncated: {} of {} bytes present",
                actual - HEADER_LEN as u64,
                header.payload_len()
            )));
        }
        if actual > expected {
            return Err(StsError::Format {
                offset: expected,
                reason: format!("{} trailing bytes after the payload", actual - expected),
            });
        }
        let data: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(StsError::InvalidData(format!(
                "non-finite value {} at row {}, column {}",
                data[i],
                i / header.cols as usize,
                i % header.cols as usize
            )));
        }
        Ok(Bundle {
            rows: header.rows as usize,
            cols: header.cols as usize,
            data,
        })
    }
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]])
}

/// Parses and validates the fixed 17-byte header.
pub fn decode_header(bytes: &[u8]) -> Result<BundleHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(StsError::Corruption(format!(
            "header truncated: {} of {HEADER_LEN} bytes present",
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(StsError::Format {
            offset: 0,
            reason: format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4])),
        });
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(StsError::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let rows = u32_at(bytes, 8);
    if rows == 0 {
        return Err(StsError::Format {
            offset: 8,
            reason: "zero rows".into(),
        });
    }
    let cols = u32_at(bytes, 12);
    if cols == 0 {
        return Err(StsError::Format {
            offset: 12,
            reason: "zero columns".into(),
        });
    }
    let dtype = bytes[16];
    if dtype != DTYPE_F32 {
        return Err(StsError::Format {
            offset: 16,
            reason: format!("unsupported dtype {dtype}"),
        });
    }
    Ok(BundleHeader { rows, cols, dtype })
}

pub fn read_bundle_header(path: &Path) -> Result<BundleHeader> {
    let f = File::open(path).map_err(|e| StsError::io(path, e))?;
    let mut buf = Vec::with_capacity(HEADER_LEN);
    f.take(HEADER_LEN as u64)
        .read_to_end(&mut buf)
        .map_err(|e| StsError::io(path, e))?;
    decode_header(&buf)
}

/// Writes via a temporary sibling and a rename, so readers never see a
/// half-written bundle.
pub fn write_bundle(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    let bytes = Bundle::from_matrix(m)?.encode();
    write_atomic(path, &bytes)
}

pub fn read_bundle(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path).map_err(|e| StsError::io(path, e))?;
    Bundle::decode(&bytes).map(|b| b.to_matrix())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| StsError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| StsError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| StsError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub model: String,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub sample_id: String,
    /// Path to the `N x D` view bundle, relative to the manifest.
    pub views: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    /// Row holding the unaugmented view.
    #[serde(default)]
    pub original_index: usize,
}

/// The JSON document describing one extracted (or synthesised) dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub class_names: Vec<String>,
    pub templates: Vec<String>,
    pub logit_scale: f64,
    /// One `C x D` bundle per template, relative to the manifest.
    pub prototype_bundles: Vec<PathBuf>,
    pub samples: Vec<SampleEntry>,
    pub augmentation: String,
    pub provenance: Provenance,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Checks everything that can be checked without reading payloads.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(StsError::Validation(msg));
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return fail(format!("unsupported schema_version {}", self.schema_version));
        }
        if self.class_names.is_empty() {
            return fail("class_names is empty".into());
        }
        let mut names = HashSet::new();
        for n in &self.class_names {
            if n.is_empty() {
                return fail("empty class name".into());
            }
            if !names.insert(n) {
                return fail(format!("duplicate class name `{n}`"));
            }
        }
        if self.templates.is_empty() {
            return fail("templates is empty".into());
        }
        if self.templates.len() != self.prototype_bundles.len() {
            return fail(format!(
                "{} templates but {} prototype bundles",
                self.templates.len(),
                self.prototype_bundles.len()
            ));
        }
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return fail(format!("logit_scale {} is not a positive finite number", self.logit_scale));
        }

        let c = self.num_classes();
        let mut dim = None;
        for (t, p) in self.prototype_bundles.iter().enumerate() {
            let path = self.resolve(p);
            if !path.is_file() {
                return fail(format!("prototype bundle {t} not found at {}", path.display()));
            }
            let h = read_bundle_header(&path)?;
            if h.rows as usize != c {
                return fail(format!(
                    "prototype bundle {t} has {} rows but {c} classes are named",
                    h.rows
                ));
            }
            match dim {
                None => dim = Some(h.cols),
                Some(d) if d != h.cols => {
                    return fail(format!("prototype bundle {t} has {} columns, expected {d}", h.cols));
                }
                _ => {}
            }
        }
        let dim = dim.expect("at least one template");

        let mut ids = HashSet::new();
        for s in &self.samples {
            if s.sample_id.is_empty() {
                return fail("empty sample_id".into());
            }
            if !ids.insert(s.sample_id.as_str()) {
                return fail(format!("duplicate sample_id `{}`", s.sample_id));
            }
            if let Some(l) = s.label {
                if l >= c {
                    return fail(format!("sample `{}` has label {l}, only {c} classes", s.sample_id));
                }
            }
            let path = self.resolve(&s.views);
            if !path.is_file() {
                return fail(format!("views for sample `{}` not found at {}", s.sample_id, path.display()));
            }
            let h = read_bundle_header(&path)?;
            if h.cols != dim {
                return fail(format!(
                    "sample `{}` views have dimension {}, prototypes {dim}",
                    s.sample_id, h.cols
                ));
            }
            if s.original_index >= h.rows as usize {
                return fail(format!(
                    "sample `{}` original_index {} out of range for {} views",
                    s.sample_id, s.original_index, h.rows
                ));
            }
        }
        Ok(())
    }

    /// Reads every template bundle and ensembles them into prototypes.
    pub fn load_prototypes(&self) -> Result<PrototypeSet> {
        let mats = self
            .prototype_bundles
            .iter()
            .map(|p| read_bundle(&self.resolve(p)))
            .collect::<Result<Vec<_>>>()?;
        build_prototypes(&mats, self.class_names.clone(), self.logit_scale)
    }

    pub fn load_views(&self, sample: &SampleEntry) -> Result<ViewBatch> {
        let m = read_bundle(&self.resolve(&sample.views)).map_err(|e| e.in_sample(&sample.sample_id))?;
        ViewBatch::new(sample.sample_id.clone(), m, sample.original_index)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(path, text.as_bytes())
    }
}

/// Parses and validates a manifest; relative paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| StsError::io(path, e))?;
    let mut m: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| StsError::Validation(format!("{}: {e}", path.display())))?;
    m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    m.validate()?;
    Ok(m)
}

/// Aggregate written next to a results stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsSummary {
    pub n_samples: usize,
    pub n_labeled: usize,
    /// Top-1 accuracy over labelled samples.
    pub accuracy: Option<f64>,
    /// Mean of `entropy_before − entropy_after`.
    pub mean_entropy_delta: f64,
    pub mean_adapt_time: f64,
    pub config: AdaptConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<RankSelection>,
    pub metadata: BTreeMap<String, String>,
}

/// Conventions baked into every run, echoed in summaries.
pub fn run_metadata() -> BTreeMap<String, String> {
    [
        ("entropy_base", "e"),
        ("prototype_ensemble", "normalize_then_average_then_renormalize"),
        ("gavish_donoho_omega", "cubic_polynomial"),
        ("filtered_count", "max(1, floor(rho * n_views))"),
        ("argmax_ties", "lowest_class_index"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

pub fn summarize(results: &[EpisodeResult], config: &AdaptConfig, rank: Option<RankSelection>) -> ResultsSummary {
    let n = results.len();
    let labeled: Vec<bool> = results.iter().filter_map(|r| r.correct()).collect();
    let accuracy = if labeled.is_empty() {
        None
    } else {
        Some(labeled.iter().filter(|&&c| c).count() as f64 / labeled.len() as f64)
    };
    let mean = |f: &dyn Fn(&EpisodeResult) -> f64| {
        if n == 0 {
            0.0
        } else {
            results.iter().map(f).sum::<f64>() / n as f64
        }
    };
    ResultsSummary {
        n_samples: n,
        n_labeled: labeled.len(),
        accuracy,
        mean_entropy_delta: mean(&|r| r.entropy_before - r.entropy_after),
        mean_adapt_time: mean(&|r| r.wall_time_adapt),
        config: *config,
        rank,
        metadata: run_metadata(),
    }
}

/// One JSON object per line.
pub fn write_results<'a, I>(results: I, path: &Path) -> Result<()>
where
    I: IntoIterator<Item = &'a EpisodeResult>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| StsError::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| StsError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in results {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| StsError::io(path, e))?;
    }
    w.flush().map_err(|e| StsError::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<EpisodeResult>> {
    let text = fs::read_to_string(path).map_err(|e| StsError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(StsError::from))
        .collect()
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, text.as_bytes())
}
