//! Spectral subspace of the prototype matrix.
//!
//! The steering basis is the span of the top right-singular vectors of the
//! `C x D` prototype matrix. The number of kept directions is chosen either
//! by the Gavish-Donoho optimal hard threshold (default), by a cumulative
//! energy fraction, or fixed by the caller.
//!
//! All computation is `f64`. Factor signs are canonicalised so that the
//! largest-magnitude entry of every right singular vector is positive, which
//! makes bases byte-reproducible across runs.

use nalgebra::{DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StsError};

/// Iteration budget handed to the bidiagonal QR sweep, per unit of `max(C, D)`.
const SVD_ITERATIONS_PER_DIM: usize = 200;

/// Reduced SVD `M = U diag(s) Vᵀ` with `k' = min(C, D)` components.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// `C x k'`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// Length `k'`, non-increasing and non-negative.
    pub s: Vec<f64>,
    /// `k' x D`, orthonormal rows (the right singular vectors).
    pub vt: DMatrix<f64>,
}

impl SvdFactors {
    pub fn rank_capacity(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let s = DMatrix::from_diagonal(&DVector::from_column_slice(&self.s));
        &self.u * s * &self.vt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMethod {
    GavishDonoho,
    Energy,
    Fixed,
}

/// How `k_t` should be picked; the input side of [`RankSelection`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum RankSpec {
    GavishDonoho,
    Energy { fraction: f64 },
    Fixed { k: usize },
}

impl Default for RankSpec {
    fn default() -> Self {
        RankSpec::GavishDonoho
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSelection {
    pub method: RankMethod,
    pub k_t: usize,
    /// `τ = ω(β)·median(s)` for Gavish-Donoho, the energy fraction for the
    /// energy criterion, absent for a fixed rank.
    pub threshold: Option<f64>,
    /// `Σ_{i≤k_t} s_i² / Σ s_i²`.
    pub energy_captured: f64,
    /// Which ω(β) evaluation was used; only set for Gavish-Donoho.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega: Option<OmegaEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaEstimate {
    pub beta: f64,
    pub omega: f64,
    /// Always `"cubic_polynomial"`: ω(β) ≈ 0.56β³ − 0.95β² + 1.82β + 1.43.
    pub approximation: String,
}

/// `D x k_t` orthonormal steering basis.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringBasis {
    pub b: DMatrix<f64>,
    pub selection: RankSelection,
}

impl SteeringBasis {
    pub fn dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn k_t(&self) -> usize {
        self.b.ncols()
    }

    /// The full standard basis of `R^dim`. Steering in it is unconstrained,
    /// which is how the per-class full-shift baseline is expressed.
    pub fn identity(dim: usize) -> Self {
        SteeringBasis {
            b: DMatrix::identity(dim, dim),
            selection: RankSelection {
                method: RankMethod::Fixed,
                k_t: dim,
                threshold: None,
                energy_captured: 1.0,
                omega: None,
            },
        }
    }
}

/// Reduced SVD in double precision.
///
/// Singular values come back sorted non-increasing; equal values keep the
/// order the solver produced them in (stable sort). Each right singular
/// vector is sign-flipped, together with its left partner, so that its
/// largest-magnitude entry (first one on ties) is positive.
pub fn thin_svd(m: &DMatrix<f64>) -> Result<SvdFactors> {
    let (rows, cols) = m.shape();
    if rows < 2 || cols < 2 {
        return Err(StsError::InvalidInput(format!(
            "thin_svd needs at least a 2x2 matrix, got {rows}x{cols}"
        )));
    }
    if let Some(pos) = m.iter().position(|x| !x.is_finite()) {
        return Err(StsError::InvalidInput(format!(
            "non-finite entry at row {}, column {}",
            pos % rows,
            pos / rows
        )));
    }

    let iterations = SVD_ITERATIONS_PER_DIM * rows.max(cols);
    let svd = SVD::try_new(m.clone(), true, true, f64::EPSILON, iterations).ok_or(
        StsError::SvdConvergence {
            rows,
            cols,
            iterations,
        },
    )?;
    let u_raw = svd.u.expect("left vectors requested");
    let vt_raw = svd.v_t.expect("right vectors requested");
    let s_raw = svd.singular_values;
    let k = s_raw.len();

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s_raw[b].total_cmp(&s_raw[a]));

    let mut u = DMatrix::zeros(rows, k);
    let mut vt = DMatrix::zeros(k, cols);
    let mut s = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let mut v_row = vt_raw.row(src).clone_owned();
        let mut u_col = u_raw.column(src).clone_owned();
        let pivot = v_row
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (j, &x)| {
                if x.abs() > best.1.abs() {
                    (j, x)
                } else {
                    best
                }
            });
        if pivot.1 < 0.0 {
            v_row.neg_mut();
            u_col.neg_mut();
        }
        vt.set_row(dst, &v_row);
        u.set_column(dst, &u_col);
        // the solver can return -0.0 for an exactly singular direction
        s.push(s_raw[src].max(0.0));
    }

    Ok(SvdFactors { u, s, vt })
}

/// Subtracts the column mean (the mean prototype) from every row.
pub fn center_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = m.row_mean();
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        row -= &mean;
    }
    out
}

fn validate_spectrum(s: &[f64]) -> Result<()> {
    if s.is_empty() {
        return Err(StsError::InvalidInput("empty singular value list".into()));
    }
    if s.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(StsError::InvalidInput(
            "singular values must be finite and non-negative".into(),
        ));
    }
    if s.windows(2).any(|w| w[1] > w[0]) {
        return Err(StsError::InvalidInput(
            "singular values must be sorted non-increasing".into(),
        ));
    }
    Ok(())
}

/// Cumulative energy fractions; the last entry is exactly 1.
fn cumulative_energy(s: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let cum: Vec<f64> = s
        .iter()
        .map(|x| {
            acc += x * x;
            acc
        })
        .collect();
    let total = acc;
    cum.into_iter().map(|c| c / total).collect()
}

fn energy_captured(s: &[f64], k: usize) -> f64 {
    let total: f64 = s.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return 0.0;
    }
    if k >= s.len() {
        return 1.0;
    }
    s[..k].iter().map(|x| x * x).sum::<f64>() / total
}

/// Polynomial approximation of the optimal hard-threshold coefficient for an
/// unknown noise level, `β ∈ (0, 1]`.
pub fn omega_approx(beta: f64) -> f64 {
    0.56 * beta.powi(3) - 0.95 * beta.powi(2) + 1.82 * beta + 1.43
}

fn median(sorted_desc: &[f64]) -> f64 {
    let n = sorted_desc.len();
    if n % 2 == 1 {
        sorted_desc[n / 2]
    } else {
        0.5 * (sorted_desc[n / 2 - 1] + sorted_desc[n / 2])
    }
}

/// Gavish-Donoho rank: number of singular values strictly above
/// `ω(β)·median(s)` with `β = min(c, d) / max(c, d)`, clamped to at least 1.
pub fn gavish_donoho_rank(s: &[f64], c: usize, d: usize) -> Result<RankSelection> {
    validate_spectrum(s)?;
    if c == 0 || d == 0 {
        return Err(StsError::InvalidInput(format!(
            "matrix shape {c}x{d} has an empty side"
        )));
    }
    if s.len() != c.min(d) {
        return Err(StsError::InvalidInput(format!(
            "expected {} singular values for a {c}x{d} matrix, got {}",
            c.min(d),
            s.len()
        )));
    }
    if s.iter().all(|&x| x == 0.0) {
        return Err(StsError::DegenerateSpectrum(
            "all singular values are zero".into(),
        ));
    }

    let beta = c.min(d) as f64 / c.max(d) as f64;
    let omega = omega_approx(beta);
    let tau = omega * median(s);
    let raw = s.iter().filter(|&&x| x > tau).count();
    let k_t = raw.max(1);

    Ok(RankSelection {
        method: RankMethod::GavishDonoho,
        k_t,
        threshold: Some(tau),
        energy_captured: energy_captured(s, k_t),
        omega: Some(OmegaEstimate {
            beta,
            omega,
            approximation: "cubic_polynomial".into(),
        }),
    })
}

/// Smallest `k` whose leading singular values hold at least `fraction` of
/// the total squared energy.
pub fn energy_rank(s: &[f64], fraction: f64) -> Result<RankSelection> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(StsError::param(
            "fraction",
            format!("{fraction} is outside (0, 1]"),
        ));
    }
    validate_spectrum(s)?;
    if s.iter().all(|&x| x == 0.0) {
        return Err(StsError::DegenerateSpectrum(
            "total energy is zero".into(),
        ));
    }
    let cum = cumulative_energy(s);
    // A full-energy request keeps every component, zero tail included.
    let k_t = if fraction == 1.0 {
        s.len()
    } else {
        cum.iter()
            .position(|&c| c >= fraction)
            .map_or(s.len(), |i| i + 1)
    };
    Ok(RankSelection {
        method: RankMethod::Energy,
        k_t,
        threshold: Some(fraction),
        energy_captured: cum[k_t - 1],
        omega: None,
    })
}

pub fn fixed_rank(s: &[f64], k: usize) -> Result<RankSelection> {
    validate_spectrum(s)?;
    if k == 0 || k > s.len() {
        return Err(StsError::param(
            "k",
            format!("fixed rank {k} must lie in 1..={}", s.len()),
        ));
    }
    Ok(RankSelection {
        method: RankMethod::Fixed,
        k_t: k,
        threshold: None,
        energy_captured: energy_captured(s, k),
        omega: None,
    })
}

/// Dispatches a [`RankSpec`] against the factors of a `c x d` matrix.
pub fn select_rank(spec: &RankSpec, s: &[f64], c: usize, d: usize) -> Result<RankSelection> {
    match *spec {
        RankSpec::GavishDonoho => gavish_donoho_rank(s, c, d),
        RankSpec::Energy { fraction } => energy_rank(s, fraction),
        RankSpec::Fixed { k } => fixed_rank(s, k),
    }
}

pub fn extract_basis(f: &SvdFactors, sel: &RankSelection) -> Result<SteeringBasis> {
    if sel.k_t == 0 || sel.k_t > f.s.len() {
        return Err(StsError::param(
            "k_t",
            format!("{} exceeds the {} available directions", sel.k_t, f.s.len()),
        ));
    }
    let b = f.vt.rows(0, sel.k_t).transpose();
    Ok(SteeringBasis {
        b,
        selection: sel.clone(),
    })
}

/// `(k, Σ_{i≤k} s_i² / Σ s_i²)` for every `k`, 1-based.
pub fn energy_curve(s: &[f64]) -> Result<Vec<(usize, f64)>> {
    if s.is_empty() || s.iter().all(|&x| x == 0.0) {
        return Err(StsError::DegenerateSpectrum(
            "energy curve needs a non-zero spectrum".into(),
        ));
    }
    Ok(cumulative_energy(s)
        .into_iter()
        .enumerate()
        .map(|(i, c)| (i + 1, c))
        .collect())
}

/// Two-column CSV with header `k,cumulative_energy`.
pub fn energy_curve_csv(curve: &[(usize, f64)]) -> String {
    let mut out = String::from("k,cumulative_energy\n");
    for (k, e) in curve {
        out.push_str(&format!("{k},{e}\n"));
    }
    out
}

/// SVD + rank selection + basis extraction for a prototype matrix.
/// With `center`, the SVD runs on the row-centred matrix instead.
pub fn steering_basis(
    z: &DMatrix<f64>,
    spec: &RankSpec,
    center: bool,
) -> Result<(SvdFactors, SteeringBasis)> {
    let factors = if center {
        thin_svd(&center_rows(z))?
    } else {
        thin_svd(z)?
    };
    let sel = select_rank(spec, &factors.s, z.nrows(), z.ncols())?;
    let basis = extract_basis(&factors, &sel)?;
    Ok((factors, basis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().fold(0.0f64, |a, x| a.max(x.abs()))
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let f = thin_svd(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(f.s, vec![1.0, 1.0]);
        assert!(max_abs(&(f.reconstruct() - DMatrix::identity(2, 2))) < 1e-15);
    }

    #[test]
    fn diagonal_rectangular() {
        let m = DMatrix::from_row_slice(2, 3, &[3.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        let f = thin_svd(&m).unwrap();
        assert_abs_diff_eq!(f.s[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.s[1], 2.0, epsilon = 1e-12);
        assert_eq!(f.vt.shape(), (2, 3));
        assert_eq!(f.u.shape(), (2, 2));
    }

    #[test]
    fn tall_three_by_two() {
        // frozen from the eigenvalues of MᵀM = [[35, 44], [44, 56]]
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let f = thin_svd(&m).unwrap();
        assert_abs_diff_eq!(f.s[0], 9.525518091565107, epsilon = 1e-9);
        assert_abs_diff_eq!(f.s[1], 0.514300580658644, epsilon = 1e-9);
        assert!(max_abs(&(f.reconstruct() - &m)) < 1e-12);
    }

    #[test]
    fn sign_convention_pins_largest_entry_positive() {
        let m = DMatrix::from_row_slice(2, 3, &[-3.0, 0.0, 0.0, 0.0, -2.0, 0.5]);
        let f = thin_svd(&m).unwrap();
        for row in f.vt.row_iter() {
            let big = row.iter().cloned().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            assert!(big > 0.0);
        }
        assert!(max_abs(&(f.reconstruct() - &m)) < 1e-12);
    }

    #[test]
    fn rejects_non_finite_and_tiny() {
        let mut m = DMatrix::identity(3, 3);
        m[(1, 2)] = f64::NAN;
        assert!(matches!(thin_svd(&m), Err(StsError::InvalidInput(_))));
        assert!(matches!(
            thin_svd(&DMatrix::identity(1, 3)),
            Err(StsError::InvalidInput(_))
        ));
    }

    #[test]
    fn gd_examples() {
        let sel = gavish_donoho_rank(&[10.0, 3.0, 1.0, 1.0, 1.0, 1.0], 6, 6).unwrap();
        assert_eq!(sel.k_t, 2);
        assert_abs_diff_eq!(sel.threshold.unwrap(), 2.86, epsilon = 1e-12);
        assert_eq!(sel.method, RankMethod::GavishDonoho);

        for (c, d) in [(4, 4), (4, 10), (1000, 4)] {
            let sel = gavish_donoho_rank(&[1.0; 4], c, d).unwrap();
            assert_eq!(sel.k_t, 1, "clamped for {c}x{d}");
            assert!(sel.threshold.unwrap() > 1.0);
        }

        let sel = gavish_donoho_rank(&[100.0, 0.1, 0.1, 0.1], 4, 4).unwrap();
        assert_eq!(sel.k_t, 1);
        assert_abs_diff_eq!(sel.threshold.unwrap(), 0.286, epsilon = 1e-12);
    }

    #[test]
    fn gd_rejects_zero_spectrum() {
        assert!(matches!(
            gavish_donoho_rank(&[0.0, 0.0], 2, 5),
            Err(StsError::DegenerateSpectrum(_))
        ));
        assert!(gavish_donoho_rank(&[1.0, 2.0], 2, 2).is_err());
    }

    #[test]
    fn omega_bounds_on_unit_interval() {
        for i in 1..=1000 {
            let beta = i as f64 / 1000.0;
            assert!(omega_approx(beta) >= 1.43);
        }
        assert_abs_diff_eq!(omega_approx(1.0), 2.86, epsilon = 1e-12);
    }

    #[test]
    fn energy_examples() {
        let sel = energy_rank(&[2.0, 1.0, 1.0], 0.98).unwrap();
        assert_eq!(sel.k_t, 3);
        assert_eq!(energy_rank(&[5.0, 4.0, 3.0, 0.0], 1.0).unwrap().k_t, 4);
        assert_eq!(energy_rank(&[10.0, 1e-6], 0.98).unwrap().k_t, 1);
        assert!(matches!(
            energy_rank(&[1.0], 0.0),
            Err(StsError::InvalidParameter { .. })
        ));
        assert!(energy_rank(&[1.0], 1.5).is_err());
    }

    #[test]
    fn energy_curve_examples() {
        assert_eq!(energy_curve(&[1.0]).unwrap(), vec![(1, 1.0)]);
        let c = energy_curve(&[2.0, 1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(c[0].1, 4.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[1].1, 5.0 / 6.0, epsilon = 1e-12);
        assert_eq!(c[2], (3, 1.0));
        assert_eq!(energy_curve(&[3.0, 0.0]).unwrap(), vec![(1, 1.0), (2, 1.0)]);
        let csv = energy_curve_csv(&[(1, 1.0), (2, 1.0)]);
        assert_eq!(csv, "k,cumulative_energy\n1,1\n2,1\n");
    }

    #[test]
    fn basis_from_identity_factors() {
        let f = SvdFactors {
            u: DMatrix::identity(3, 3),
            s: vec![3.0, 2.0, 1.0],
            vt: DMatrix::identity(3, 3),
        };
        let sel = fixed_rank(&f.s, 2).unwrap();
        let b = extract_basis(&f, &sel).unwrap();
        assert_eq!(b.b, DMatrix::identity(3, 2));

        let full = extract_basis(&f, &fixed_rank(&f.s, 3).unwrap()).unwrap();
        assert_eq!(full.b.transpose() * &full.b, DMatrix::identity(3, 3));
        assert!(fixed_rank(&f.s, 4).is_err());
    }

    #[test]
    fn centering_removes_mean() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 6.0]);
        let c = center_rows(&m);
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[-1.0, -2.0, 1.0, 2.0]));
    }
}
