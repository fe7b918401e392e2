//! Steering coefficients, the shift `Δ = Bγ` and adapted prototypes.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StsError};
use crate::prototypes::PrototypeSet;
use crate::spectral::SteeringBasis;

/// Below this pre-normalisation norm a prototype counts as cancelled.
pub const ANNIHILATION_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientMode {
    /// One `k_t` vector moves every prototype by the same shift.
    #[default]
    Shared,
    /// One `k_t` vector per class.
    PerClass,
}

/// The learnable γ. Stored as a `1 x k_t` (shared) or `C x k_t` (per-class)
/// matrix so that both modes share the same arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringCoefficients {
    mode: CoefficientMode,
    values: DMatrix<f64>,
}

impl SteeringCoefficients {
    pub fn zeros(mode: CoefficientMode, num_classes: usize, k_t: usize) -> Self {
        let rows = match mode {
            CoefficientMode::Shared => 1,
            CoefficientMode::PerClass => num_classes,
        };
        SteeringCoefficients {
            mode,
            values: DMatrix::zeros(rows, k_t),
        }
    }

    pub fn shared(values: &[f64]) -> Result<Self> {
        Self::from_matrix(CoefficientMode::Shared, DMatrix::from_row_slice(1, values.len(), values))
    }

    pub fn from_matrix(mode: CoefficientMode, values: DMatrix<f64>) -> Result<Self> {
        if mode == CoefficientMode::Shared && values.nrows() != 1 {
            return Err(StsError::InvalidInput(format!(
                "shared coefficients must have one row, got {}",
                values.nrows()
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(StsError::Numerical("non-finite steering coefficient".into()));
        }
        Ok(SteeringCoefficients { mode, values })
    }

    pub fn mode(&self) -> CoefficientMode {
        self.mode
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn k_t(&self) -> usize {
        self.values.ncols()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn values_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.values
    }

    /// Checks the shape against a basis and class count.
    pub fn check_against(&self, basis: &SteeringBasis, num_classes: usize) -> Result<()> {
        if self.k_t() != basis.k_t() {
            return Err(StsError::InvalidInput(format!(
                "{} coefficients per row but the basis has rank {}",
                self.k_t(),
                basis.k_t()
            )));
        }
        if self.mode == CoefficientMode::PerClass && self.values.nrows() != num_classes {
            return Err(StsError::InvalidInput(format!(
                "per-class coefficients have {} rows for {num_classes} classes",
                self.values.nrows()
            )));
        }
        Ok(())
    }

    /// `γ Bᵀ`: the shift as a `1 x D` or `C x D` matrix.
    pub fn shift(&self, basis: &SteeringBasis) -> DMatrix<f64> {
        &self.values * basis.b.transpose()
    }
}

/// Coefficients plus their cached shift.
///
/// The cache is refreshed by every mutation that goes through
/// [`SteeringState::update`], so the inner loop computes `Bγ` once per step.
#[derive(Debug, Clone)]
pub struct SteeringState {
    coefficients: SteeringCoefficients,
    shift: DMatrix<f64>,
    shift_norm: f64,
}

impl SteeringState {
    pub fn new(coefficients: SteeringCoefficients, basis: &SteeringBasis) -> Self {
        let shift = coefficients.shift(basis);
        let shift_norm = shift.norm();
        SteeringState {
            coefficients,
            shift,
            shift_norm,
        }
    }

    pub fn coefficients(&self) -> &SteeringCoefficients {
        &self.coefficients
    }

    pub fn shift(&self) -> &DMatrix<f64> {
        &self.shift
    }

    /// `‖Bγ‖₂` in shared mode, the Frobenius norm of the per-class shifts otherwise.
    pub fn shift_norm(&self) -> f64 {
        self.shift_norm
    }

    pub fn update<F>(&mut self, basis: &SteeringBasis, f: F) -> Result<()>
    where
        F: FnOnce(&mut DMatrix<f64>) -> Result<()>,
    {
        f(self.coefficients.values_mut())?;
        if self.coefficients.values.iter().any(|x| !x.is_finite()) {
            return Err(StsError::Numerical("update produced a non-finite coefficient".into()));
        }
        self.shift = self.coefficients.shift(basis);
        self.shift_norm = self.shift.norm();
        Ok(())
    }

    pub fn into_coefficients(self) -> SteeringCoefficients {
        self.coefficients
    }
}

/// Adds a `1 x D` or `C x D` shift to `z` and normalises each row.
///
/// Returns the adapted rows and their pre-normalisation norms.
pub(crate) fn shifted_prototypes(z: &DMatrix<f64>, shift: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (c, d) = z.shape();
    if shift.ncols() != d || (shift.nrows() != 1 && shift.nrows() != c) {
        return Err(StsError::InvalidInput(format!(
            "shift of shape {:?} does not fit prototypes of shape {:?}",
            shift.shape(),
            (c, d)
        )));
    }
    let mut out = z.clone();
    let mut norms = Vec::with_capacity(c);
    for (class, mut row) in out.row_iter_mut().enumerate() {
        let delta = if shift.nrows() == 1 { shift.row(0) } else { shift.row(class) };
        // z rows are unit by construction; leave them bit-identical when unshifted
        if delta.iter().all(|&x| x == 0.0) {
            norms.push(1.0);
            continue;
        }
        row += delta;
        let n = row.norm();
        if !(n >= ANNIHILATION_NORM) {
            return Err(StsError::AnnihilatedPrototype { class, norm: n });
        }
        row /= n;
        norms.push(n);
    }
    Ok((out, norms))
}

/// `normalize(z_c + Δ_c)` for every class.
pub fn apply_shift(
    proto: &PrototypeSet,
    basis: &SteeringBasis,
    coeffs: &SteeringCoefficients,
) -> Result<DMatrix<f64>> {
    if basis.dim() != proto.dim() {
        return Err(StsError::InvalidInput(format!(
            "basis dimension {} differs from prototype dimension {}",
            basis.dim(),
            proto.dim()
        )));
    }
    coeffs.check_against(basis, proto.num_classes())?;
    let shift = coeffs.shift(basis);
    shifted_prototypes(proto.z(), &shift).map(|(m, _)| m)
}
