//! Test-time steering of zero-shot class prototypes inside their own
//! spectral subspace.
//!
//! Given unit-norm class prototypes `Z` (C×D) and a batch of augmented views
//! of one test input, the engine
//!
//! 1. takes the thin SVD of `Z` and keeps the top `k_t` right singular
//!    vectors as a steering basis `B` (D×k_t), with `k_t` picked by the
//!    Gavish-Donoho threshold, an energy fraction or a fixed count;
//! 2. keeps the lowest-entropy `ρ` fraction of views;
//! 3. minimises the entropy of their averaged class distribution, plus
//!    `λ‖Bγ‖₂`, over coefficients `γ` with AdamW;
//! 4. predicts with the steered prototypes `normalize(z_c + Bγ)`.
//!
//! `γ` is reset for every test input.

pub mod bench;
pub mod dataset;
pub mod episode;
pub mod error;
pub mod objective;
pub mod optimizer;
pub mod prob;
pub mod prototypes;
pub mod spectral;
pub mod steering;
pub mod storage;
pub mod synth;

pub use bench::{evaluate, run_all, BenchReport, Method};
pub use dataset::{Dataset, Sample};
pub use episode::{run_episode, AdaptConfig, EpisodeResult};
pub use error::{ErrorClass, Result, StsError};
pub use objective::{filter_views, sts_loss_and_grad, ViewBatch};
pub use optimizer::OptimizerConfig;
pub use prototypes::{build_prototypes, zero_shot_probs, PrototypeSet};
pub use spectral::{steering_basis, thin_svd, RankSelection, RankSpec, SteeringBasis};
pub use steering::{apply_shift, CoefficientMode, SteeringCoefficients};
pub use storage::{load_manifest, read_bundle, write_bundle, Bundle, DatasetManifest};
pub use synth::{generate, synthesize, SynthSpec};
