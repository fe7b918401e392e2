//! One test sample, start to finish: filter, optimise γ, predict.
//!
//! γ and the optimizer state are created inside [`run_episode`] and dropped
//! when it returns, so nothing carries over from one sample to the next.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StsError};
use crate::objective::{filter_with, loss_and_grad_on, marginal_distribution, ViewBatch};
use crate::optimizer::{self, OptimizerConfig, OptimizerState};
use crate::prob::{argmax, entropy};
use crate::prototypes::PrototypeSet;
use crate::spectral::{steering_basis, RankSpec, SteeringBasis};
use crate::steering::{shifted_prototypes, CoefficientMode, SteeringCoefficients, SteeringState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub rho: f64,
    pub lambda_reg: f64,
    pub mode: CoefficientMode,
    pub rank: RankSpec,
    /// Run the SVD on mean-centred prototypes.
    pub center: bool,
    pub optimizer: OptimizerConfig,
    pub logit_scale_override: Option<f64>,
    pub seed: u64,
    /// Score the unaugmented view too when filtering dropped it.
    pub include_original: bool,
    /// Re-run confidence filtering with the current prototypes before each step.
    pub refilter_each_step: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            rho: 0.1,
            lambda_reg: 0.01,
            mode: CoefficientMode::Shared,
            rank: RankSpec::GavishDonoho,
            center: false,
            optimizer: OptimizerConfig::default(),
            logit_scale_override: None,
            seed: 0,
            include_original: false,
            refilter_each_step: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(StsError::param("rho", format!("{} is outside (0, 1]", self.rho)));
        }
        if !(self.lambda_reg.is_finite() && self.lambda_reg >= 0.0) {
            return Err(StsError::param("lambda_reg", "must be finite and non-negative"));
        }
        if let Some(s) = self.logit_scale_override {
            if !(s.is_finite() && s > 0.0) {
                return Err(StsError::param("logit_scale", format!("{s} is not a positive finite number")));
            }
        }
        if let RankSpec::Energy { fraction } = self.rank {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(StsError::param("energy", format!("{fraction} is outside (0, 1]")));
            }
        }
        self.optimizer.validate()
    }

    pub fn logit_scale(&self, proto: &PrototypeSet) -> f64 {
        self.logit_scale_override.unwrap_or(proto.logit_scale())
    }

    /// Spectral basis for `proto` according to `rank` and `center`.
    pub fn build_basis(&self, proto: &PrototypeSet) -> Result<SteeringBasis> {
        steering_basis(proto.z(), &self.rank, self.center).map(|(_, b)| b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub sample_id: String,
    pub predicted_class: usize,
    pub predicted_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub marginal_probs_before: Vec<f64>,
    pub marginal_probs_after: Vec<f64>,
    pub entropy_before: f64,
    pub entropy_after: f64,
    pub shift_norm: f64,
    pub n_filtered: usize,
    /// Seconds spent on filtering, optimisation and final scoring.
    pub wall_time_adapt: f64,
    pub steps_taken: usize,
    #[serde(skip)]
    pub coefficients: Option<SteeringCoefficients>,
}

impl EpisodeResult {
    pub fn correct(&self) -> Option<bool> {
        self.label.map(|l| l == self.predicted_class)
    }

    /// Equality on everything except the wall-clock timing.
    pub fn same_outcome(&self, other: &EpisodeResult) -> bool {
        let mut a = self.clone();
        a.wall_time_adapt = other.wall_time_adapt;
        &a == other
    }
}

fn scoring_rows(retained: &[usize], views: &ViewBatch, include_original: bool) -> Vec<usize> {
    let mut rows = retained.to_vec();
    if include_original && !rows.contains(&views.original_index) {
        rows.push(views.original_index);
        rows.sort_unstable();
    }
    rows
}

/// Adapts γ to one sample and predicts with the adapted prototypes.
pub fn run_episode(
    proto: &PrototypeSet,
    basis: &SteeringBasis,
    views: &ViewBatch,
    cfg: &AdaptConfig,
) -> Result<EpisodeResult> {
    run_episode_inner(proto, basis, views, cfg).map_err(|e| e.in_sample(&views.sample_id))
}

fn run_episode_inner(
    proto: &PrototypeSet,
    basis: &SteeringBasis,
    views: &ViewBatch,
    cfg: &AdaptConfig,
) -> Result<EpisodeResult> {
    cfg.validate()?;
    if basis.dim() != proto.dim() || views.dim() != proto.dim() {
        return Err(StsError::InvalidInput(format!(
            "dimension mismatch: prototypes {}, basis {}, views {}",
            proto.dim(),
            basis.dim(),
            views.dim()
        )));
    }
    let scale = cfg.logit_scale(proto);
    let z = proto.z();
    let started = Instant::now();

    let mut filter = filter_with(views, z, scale, cfg.rho)?;
    let mut filtered = views.gather(&filter.retained);
    let before_rows = scoring_rows(&filter.retained, views, cfg.include_original);
    let before = marginal_distribution(&views.gather(&before_rows), z, scale)?;
    let entropy_before = entropy(&before);

    let coeffs = SteeringCoefficients::zeros(cfg.mode, proto.num_classes(), basis.k_t());
    let mut state = SteeringState::new(coeffs, basis);
    let mut opt = OptimizerState::new(state.coefficients().values().nrows(), basis.k_t());

    for step in 0..cfg.optimizer.steps {
        if cfg.refilter_each_step && step > 0 {
            let (current, _) = shifted_prototypes(z, state.shift())?;
            filter = filter_with(views, &current, scale, cfg.rho)?;
            filtered = views.gather(&filter.retained);
        }
        let loss = loss_and_grad_on(
            z,
            basis,
            state.coefficients(),
            state.shift(),
            &filtered,
            cfg.lambda_reg,
            scale,
        )?;
        let lr = cfg.optimizer.scheduled_lr(opt.t);
        state.update(basis, |gamma| optimizer::step(&mut opt, gamma, &loss.grad, &cfg.optimizer, lr))?;
    }

    let after = if cfg.optimizer.steps == 0 {
        before.clone()
    } else {
        let (adapted, _) = shifted_prototypes(z, state.shift())?;
        let rows = scoring_rows(&filter.retained, views, cfg.include_original);
        marginal_distribution(&views.gather(&rows), &adapted, scale)?
    };
    let entropy_after = entropy(&after);
    let predicted_class = argmax(&after);
    let wall_time_adapt = started.elapsed().as_secs_f64();

    Ok(EpisodeResult {
        sample_id: views.sample_id.clone(),
        predicted_class,
        predicted_name: proto.class_names()[predicted_class].clone(),
        label: None,
        marginal_probs_before: before,
        marginal_probs_after: after,
        entropy_before,
        entropy_after,
        shift_norm: state.shift_norm(),
        n_filtered: filter.n_filtered(),
        wall_time_adapt,
        steps_taken: cfg.optimizer.steps,
        coefficients: Some(state.into_coefficients()),
    })
}

/// Parameters adapted per sample for a mode and basis.
pub fn parameter_count(mode: CoefficientMode, num_classes: usize, k_t: usize) -> usize {
    match mode {
        CoefficientMode::Shared => k_t,
        CoefficientMode::PerClass => num_classes * k_t,
    }
}
