//! Multi-method evaluation over a dataset.
//!
//! Every method runs the same episode loop; they differ only in basis,
//! coefficient mode and step count:
//!
//! | method         | basis         | mode      | steps      |
//! |----------------|---------------|-----------|------------|
//! | `zeroshot`     | spectral      | shared    | 0          |
//! | `tps`          | identity (D)  | per-class | from cfg   |
//! | `sts-shared`   | spectral      | shared    | from cfg   |
//! | `sts-perclass` | spectral      | per-class | from cfg   |

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::episode::{parameter_count, run_episode, AdaptConfig, EpisodeResult};
use crate::error::{Result, StsError};
use crate::optimizer::OptimizerConfig;
use crate::spectral::{RankSelection, SteeringBasis};
use crate::steering::CoefficientMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "zeroshot")]
    ZeroShot,
    #[serde(rename = "tps")]
    Tps,
    #[serde(rename = "sts-shared")]
    StsShared,
    #[serde(rename = "sts-perclass")]
    StsPerClass,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::ZeroShot, Method::Tps, Method::StsShared, Method::StsPerClass];

    pub fn name(self) -> &'static str {
        match self {
            Method::ZeroShot => "zeroshot",
            Method::Tps => "tps",
            Method::StsShared => "sts-shared",
            Method::StsPerClass => "sts-perclass",
        }
    }

    /// The episode configuration this method runs with, derived from `base`.
    pub fn config(self, base: &AdaptConfig) -> AdaptConfig {
        match self {
            Method::ZeroShot => AdaptConfig {
                mode: CoefficientMode::Shared,
                optimizer: OptimizerConfig { steps: 0, ..base.optimizer },
                ..*base
            },
            Method::Tps | Method::StsPerClass => AdaptConfig { mode: CoefficientMode::PerClass, ..*base },
            Method::StsShared => AdaptConfig { mode: CoefficientMode::Shared, ..*base },
        }
    }

    pub fn parameter_count(self, num_classes: usize, dim: usize, k_t: usize) -> usize {
        match self {
            Method::ZeroShot => 0,
            Method::Tps => parameter_count(CoefficientMode::PerClass, num_classes, dim),
            Method::StsShared => parameter_count(CoefficientMode::Shared, num_classes, k_t),
            Method::StsPerClass => parameter_count(CoefficientMode::PerClass, num_classes, k_t),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = StsError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| StsError::param("method", format!("unknown method `{s}`")))
    }
}

/// Bytes of f64 scratch one episode holds at its peak, excluding the
/// dataset itself and any encoder.
pub fn working_set_bytes(num_classes: usize, dim: usize, n_views: usize, n_filtered: usize, n_params: usize) -> usize {
    let floats = n_views * (num_classes + 1) // per-view logits and entropies for filtering
        + n_filtered * dim                  // gathered views
        + 2 * num_classes * dim             // shift and adapted prototypes
        + n_filtered * num_classes * 2      // probabilities and logit gradient
        + num_classes * dim                 // back-propagated prototype gradient
        + 4 * n_params; // γ, gradient, first and second moments
    floats * std::mem::size_of::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    pub accuracy: f64,
    pub mean_entropy_delta: f64,
    pub mean_adapt_time: f64,
    pub parameter_count: usize,
    /// Engine-only peak scratch per episode; excludes encoder memory.
    pub working_set_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<MethodRow>,
    pub config: AdaptConfig,
    pub rank: RankSelection,
    pub num_classes: usize,
    pub dim: usize,
    pub n_samples: usize,
    pub dataset_fingerprint: String,
}

impl BenchReport {
    pub fn row(&self, method: Method) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Equality ignoring wall-clock timings.
    pub fn same_outcome(&self, other: &BenchReport) -> bool {
        let strip = |r: &BenchReport| {
            let mut r = r.clone();
            for row in &mut r.rows {
                row.mean_adapt_time = 0.0;
            }
            r
        };
        strip(self) == strip(other)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let header = ["method", "top1", "d_entropy", "adapt_ms", "params", "work_kib"];
        let cells: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.to_string(),
                    format!("{:.4}", r.accuracy),
                    format!("{:.6}", r.mean_entropy_delta),
                    format!("{:.3}", r.mean_adapt_time * 1e3),
                    r.parameter_count.to_string(),
                    format!("{:.1}", r.working_set_bytes as f64 / 1024.0),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let mut line = |row: &[&str]| {
            let mut parts = Vec::with_capacity(row.len());
            for (i, c) in row.iter().enumerate() {
                if i == 0 {
                    parts.push(format!("{c:<w$}", w = widths[i]));
                } else {
                    parts.push(format!("{c:>w$}", w = widths[i]));
                }
            }
            out.push_str(parts.join("  ").trim_end());
            out.push('\n');
        };
        line(&header);
        for row in &cells {
            line(&row.each_ref().map(String::as_str));
        }
        out.push_str(&format!(
            "C={} D={} k_t={} samples={} fingerprint={}\n",
            self.num_classes,
            self.dim,
            self.rank.k_t,
            self.n_samples,
            &self.dataset_fingerprint[..16.min(self.dataset_fingerprint.len())]
        ));
        out
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| StsError::InvalidInput(format!("cannot start {workers} workers: {e}")))
}

/// Runs one episode per sample on `workers` threads (0 = rayon default).
///
/// Results come back ordered by `sample_id`, labels filled in.
pub fn run_all(dataset: &Dataset, basis: &SteeringBasis, cfg: &AdaptConfig, workers: usize) -> Result<Vec<EpisodeResult>> {
    cfg.validate()?;
    let proto = &dataset.prototypes;
    let run = || {
        dataset
            .samples
            .par_iter()
            .map(|s| {
                let mut r = run_episode(proto, basis, &s.views, cfg)?;
                r.label = s.label;
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()
    };
    let mut results = pool(workers)?.install(run)?;
    results.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(results)
}

fn aggregate(method: Method, results: &[EpisodeResult], params: usize, working_set: usize) -> MethodRow {
    let n = results.len().max(1) as f64;
    let correct = results.iter().filter(|r| r.correct() == Some(true)).count();
    MethodRow {
        method,
        accuracy: correct as f64 / n,
        mean_entropy_delta: results.iter().map(|r| r.entropy_before - r.entropy_after).sum::<f64>() / n,
        mean_adapt_time: results.iter().map(|r| r.wall_time_adapt).sum::<f64>() / n,
        parameter_count: params,
        working_set_bytes: working_set,
    }
}

/// Report plus the per-sample results behind every row.
#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub report: BenchReport,
    pub results: Vec<(Method, Vec<EpisodeResult>)>,
}

pub fn evaluate(dataset: &Dataset, methods: &[Method], cfg: &AdaptConfig, workers: usize) -> Result<BenchOutcome> {
    cfg.validate()?;
    let unlabeled = dataset.unlabeled_ids();
    if !unlabeled.is_empty() {
        return Err(StsError::Evaluation(format!(
            "{} unlabeled samples: {}",
            unlabeled.len(),
            unlabeled.join(", ")
        )));
    }
    if dataset.samples.is_empty() {
        return Err(StsError::Evaluation("dataset has no samples".into()));
    }
    if methods.is_empty() {
        return Err(StsError::Evaluation("no methods requested".into()));
    }
    let proto = &dataset.prototypes;
    let (c, d) = (proto.num_classes(), proto.dim());
    let spectral = cfg.build_basis(proto)?;
    let identity = SteeringBasis::identity(d);
    let n_views = dataset.samples.iter().map(|s| s.views.len()).max().unwrap_or(0);

    let mut rows = Vec::with_capacity(methods.len());
    let mut all = Vec::with_capacity(methods.len());
    for &m in methods {
        let basis = if m == Method::Tps { &identity } else { &spectral };
        let results = run_all(dataset, basis, &m.config(cfg), workers)?;
        let params = m.parameter_count(c, d, spectral.k_t());
        let n_filtered = results.iter().map(|r| r.n_filtered).max().unwrap_or(0);
        let ws = working_set_bytes(c, d, n_views, n_filtered, params);
        rows.push(aggregate(m, &results, params, ws));
        all.push((m, results));
    }

    Ok(BenchOutcome {
        report: BenchReport {
            rows,
            config: *cfg,
            rank: spectral.selection.clone(),
            num_classes: c,
            dim: d,
            n_samples: dataset.samples.len(),
            dataset_fingerprint: dataset.fingerprint(),
        },
        results: all,
    })
}
