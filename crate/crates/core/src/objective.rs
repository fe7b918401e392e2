//! Confidence filtering and the marginal-entropy objective.
//!
//! The loss for coefficients γ over the retained views `V` is
//!
//! ```text
//! ẑ_c   = (z_c + Δ_c) / ‖z_c + Δ_c‖,   Δ = Bγ
//! P_jc  = softmax_c(s · ⟨v_j, ẑ_c⟩)
//! p̄_c   = mean_j P_jc
//! L     = −Σ_c p̄_c ln p̄_c  +  λ ‖Δ‖₂
//! ```
//!
//! and the gradient is propagated by hand through softmax, the cosine and
//! the normalisation Jacobian `(I − ẑẑᵀ)/‖z + Δ‖` back onto the basis.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, StsError};
use crate::prob::{entropy, softmax_in_place};
use crate::prototypes::PrototypeSet;
use crate::spectral::SteeringBasis;
use crate::steering::{shifted_prototypes, CoefficientMode, SteeringCoefficients};

const VIEW_NORM_TOL: f64 = 1e-4;
/// Floor on `‖Δ‖` in the regulariser's gradient; makes it zero at Δ = 0.
pub const NORM_GRAD_FLOOR: f64 = 1e-12;

/// The augmented-view embeddings of one test sample, one row per view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch {
    pub sample_id: String,
    v: DMatrix<f64>,
    pub original_index: usize,
}

impl ViewBatch {
    /// Validates that every row is unit-norm within 1e-4 and renormalises
    /// the rows exactly in double precision.
    pub fn new(sample_id: impl Into<String>, mut v: DMatrix<f64>, original_index: usize) -> Result<Self> {
        let sample_id = sample_id.into();
        if v.nrows() == 0 || v.ncols() == 0 {
            return Err(StsError::InvalidInput(format!("sample `{sample_id}` has no views")));
        }
        if original_index >= v.nrows() {
            return Err(StsError::InvalidInput(format!(
                "original view index {original_index} out of range for {} views",
                v.nrows()
            )));
        }
        for (j, mut row) in v.row_iter_mut().enumerate() {
            let n = row.norm();
            if !n.is_finite() || (n - 1.0).abs() > VIEW_NORM_TOL {
                return Err(StsError::InvalidInput(format!(
                    "sample `{sample_id}` view {j} has norm {n}, expected unit"
                )));
            }
            row /= n;
        }
        Ok(ViewBatch {
            sample_id,
            v,
            original_index,
        })
    }

    pub fn views(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn len(&self) -> usize {
        self.v.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.v.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.v.ncols()
    }

    /// Rows `indices`, in order, as a new matrix.
    pub fn gather(&self, indices: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(indices.len(), self.v.ncols(), |r, c| self.v[(indices[r], c)])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    /// Ascending view indices of the retained views.
    pub retained: Vec<usize>,
    pub per_view_entropy: Vec<f64>,
}

impl FilterResult {
    pub fn n_filtered(&self) -> usize {
        self.retained.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub entropy_term: f64,
    pub reg_term: f64,
    pub total: f64,
    pub marginal: Vec<f64>,
    /// Same shape as the coefficient matrix.
    pub grad: DMatrix<f64>,
}

/// `max(1, floor(ρ·N))`.
pub fn filtered_count(n: usize, rho: f64) -> usize {
    ((rho * n as f64).floor() as usize).clamp(1, n)
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(StsError::param("rho", format!("{rho} is outside (0, 1]")));
    }
    Ok(())
}

/// Per-view softmax of `scale · V Zᵀ` as an `N x C` matrix.
fn view_probs(views: &DMatrix<f64>, z: &DMatrix<f64>, scale: f64) -> Result<DMatrix<f64>> {
    let mut p = views * z.transpose() * scale;
    if p.iter().any(|x| !x.is_finite()) {
        return Err(StsError::Numerical("non-finite logits".into()));
    }
    for j in 0..p.nrows() {
        let mut row: Vec<f64> = p.row(j).iter().cloned().collect();
        softmax_in_place(&mut row);
        for (c, x) in row.into_iter().enumerate() {
            p[(j, c)] = x;
        }
    }
    Ok(p)
}

/// Keeps the `max(1, floor(ρN))` lowest-entropy views under the prototype
/// matrix `z`; ties go to the lower view index.
pub fn filter_with(views: &ViewBatch, z: &DMatrix<f64>, logit_scale: f64, rho: f64) -> Result<FilterResult> {
    check_rho(rho)?;
    if views.dim() != z.ncols() {
        return Err(StsError::InvalidInput(format!(
            "views have dimension {}, prototypes {}",
            views.dim(),
            z.ncols()
        )));
    }
    let probs = view_probs(views.views(), z, logit_scale)?;
    let per_view_entropy: Vec<f64> = probs
        .row_iter()
        .map(|r| entropy(r.clone_owned().as_slice()))
        .collect();
    let mut order: Vec<usize> = (0..views.len()).collect();
    order.sort_by(|&a, &b| per_view_entropy[a].total_cmp(&per_view_entropy[b]).then(a.cmp(&b)));
    let mut retained: Vec<usize> = order[..filtered_count(views.len(), rho)].to_vec();
    retained.sort_unstable();
    Ok(FilterResult {
        retained,
        per_view_entropy,
    })
}

/// Confidence filtering with the unadapted prototypes.
pub fn filter_views(views: &ViewBatch, proto: &PrototypeSet, rho: f64) -> Result<FilterResult> {
    filter_with(views, proto.z(), proto.logit_scale(), rho)
}

/// Mean over views of the per-view class softmax.
pub fn marginal_distribution(views: &DMatrix<f64>, adapted: &DMatrix<f64>, logit_scale: f64) -> Result<Vec<f64>> {
    if views.nrows() == 0 {
        return Err(StsError::InvalidInput("marginal needs at least one view".into()));
    }
    if views.ncols() != adapted.ncols() {
        return Err(StsError::InvalidInput(format!(
            "views have dimension {}, prototypes {}",
            views.ncols(),
            adapted.ncols()
        )));
    }
    let probs = view_probs(views, adapted, logit_scale)?;
    let marginal: Vec<f64> = probs.row_mean().iter().cloned().collect();
    if marginal.iter().any(|x| !x.is_finite()) {
        return Err(StsError::Numerical("non-finite marginal distribution".into()));
    }
    Ok(marginal)
}

/// Loss and gradient over an already-gathered `N_filt x D` view matrix.
pub(crate) fn loss_and_grad_on(
    z: &DMatrix<f64>,
    basis: &SteeringBasis,
    coeffs: &SteeringCoefficients,
    shift: &DMatrix<f64>,
    filtered: &DMatrix<f64>,
    lambda_reg: f64,
    logit_scale: f64,
) -> Result<LossBreakdown> {
    let (adapted, norms) = shifted_prototypes(z, shift)?;
    let probs = view_probs(filtered, &adapted, logit_scale)?;
    let n_views = filtered.nrows() as f64;
    let marginal: Vec<f64> = probs.row_mean().iter().cloned().collect();
    let entropy_term = entropy(&marginal);

    // dH/dp̄_c up to an additive constant, which softmax's Jacobian annihilates
    let g: Vec<f64> = marginal.iter().map(|&p| if p > 0.0 { -p.ln() } else { 0.0 }).collect();

    // dH/dlogit_jk = P_jk (g_k − Σ_c P_jc g_c) / N
    let mut dlogits = probs.clone();
    for (j, mut row) in dlogits.row_iter_mut().enumerate() {
        let mean_g: f64 = (0..g.len()).map(|c| probs[(j, c)] * g[c]).sum();
        for (k, x) in row.iter_mut().enumerate() {
            *x *= (g[k] - mean_g) / n_views;
        }
    }

    // dH/dẑ_c = s Σ_j dlogit_jc v_j, then through the normaliser
    let w = dlogits.transpose() * filtered * logit_scale;
    let mut d_adapted = DMatrix::zeros(z.nrows(), z.ncols());
    for c in 0..z.nrows() {
        let zc = adapted.row(c);
        let wc = w.row(c);
        let radial = zc.dot(&wc);
        let row = (wc - zc * radial) / norms[c];
        if row.iter().any(|x| !x.is_finite()) {
            return Err(StsError::Numerical(format!("non-finite gradient for class {c}")));
        }
        d_adapted.set_row(c, &row);
    }

    let mut grad = match coeffs.mode() {
        CoefficientMode::Shared => {
            let summed = DMatrix::from_row_slice(1, z.ncols(), d_adapted.row_sum().as_slice());
            summed * &basis.b
        }
        CoefficientMode::PerClass => &d_adapted * &basis.b,
    };

    let mut reg_term = 0.0;
    for (r, delta) in shift.row_iter().enumerate() {
        let n = delta.norm();
        reg_term += lambda_reg * n;
        if lambda_reg > 0.0 {
            let scale = lambda_reg / n.max(NORM_GRAD_FLOOR);
            let contrib = delta * &basis.b * scale;
            let mut dst = grad.row_mut(r);
            dst += contrib;
        }
    }

    if grad.iter().any(|x| !x.is_finite()) {
        return Err(StsError::Numerical("non-finite gradient".into()));
    }
    Ok(LossBreakdown {
        entropy_term,
        reg_term,
        total: entropy_term + reg_term,
        marginal,
        grad,
    })
}

/// Total objective and its exact gradient with respect to γ.
pub fn sts_loss_and_grad(
    proto: &PrototypeSet,
    basis: &SteeringBasis,
    coeffs: &SteeringCoefficients,
    filter: &FilterResult,
    views: &ViewBatch,
    lambda_reg: f64,
    logit_scale: f64,
) -> Result<LossBreakdown> {
    if !(lambda_reg >= 0.0 && lambda_reg.is_finite()) {
        return Err(StsError::param("lambda_reg", format!("{lambda_reg} must be finite and non-negative")));
    }
    if basis.dim() != proto.dim() || views.dim() != proto.dim() {
        return Err(StsError::InvalidInput(format!(
            "dimension mismatch: prototypes {}, basis {}, views {}",
            proto.dim(),
            basis.dim(),
            views.dim()
        )));
    }
    if filter.retained.is_empty() || filter.retained.iter().any(|&j| j >= views.len()) {
        return Err(StsError::InvalidInput("filter result does not index into the view batch".into()));
    }
    coeffs.check_against(basis, proto.num_classes())?;
    let filtered = views.gather(&filter.retained);
    let shift = coeffs.shift(basis);
    loss_and_grad_on(proto.z(), basis, coeffs, &shift, &filtered, lambda_reg, logit_scale)
}

/// Per-view probabilities for a single embedding; mirrors
/// [`crate::prototypes::zero_shot_probs`] for an arbitrary prototype matrix.
pub fn view_distribution(v: &DVector<f64>, z: &DMatrix<f64>, logit_scale: f64) -> Result<Vec<f64>> {
    let m = DMatrix::from_row_slice(1, v.len(), v.as_slice());
    marginal_distribution(&m, z, logit_scale)
}
