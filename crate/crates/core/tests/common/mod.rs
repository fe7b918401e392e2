//! Independent reference implementations shared by the integration tests.
//!
//! None of these call into the engine's numerics: the loss is recomputed
//! from scratch with plain `Vec`s, and singular values come from a cyclic
//! Jacobi eigen-solver on `MᵀM` (or `MMᵀ`).

#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = gaussian(rng, rows, cols);
    for mut r in m.row_iter_mut() {
        let n = r.norm();
        r /= n;
    }
    m
}

/// Matrix with orthonormal columns from a Gram-Schmidt pass.
pub fn orthonormal_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut q: DMatrix<f64> = gaussian(rng, rows, cols);
    for j in 0..cols {
        for i in 0..j {
            let proj = q.column(i).dot(&q.column(j));
            let qi = q.column(i).clone_owned();
            let mut cj = q.column_mut(j);
            cj -= qi * proj;
        }
        let n = q.column(j).norm();
        let mut cj = q.column_mut(j);
        cj /= n;
    }
    q
}

/// Rank-`r` signal with singular values drawn from [10, 20], plus
/// i.i.d. Gaussian noise of standard deviation `noise`.
pub fn planted_rank(rng: &mut ChaCha8Rng, r: usize, rows: usize, cols: usize, noise: f64) -> DMatrix<f64> {
    let u = orthonormal_columns(rng, rows, r);
    let v = orthonormal_columns(rng, cols, r);
    let s = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(r, |_, _| rng.random_range(10.0..20.0)));
    u * s * v.transpose() + gaussian(rng, rows, cols) * noise
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and eigenvectors as columns.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[(i, j)].powi(2)).sum();
        let scale: f64 = a.iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let vals = order.iter().map(|&i| a[(i, i)]).collect();
    let vecs = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (vals, vecs)
}

/// Singular values via the smaller Gram matrix, descending, length min(m, n).
pub fn oracle_singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let gram = if m.nrows() <= m.ncols() { m * m.transpose() } else { m.transpose() * m };
    jacobi_eigen(&gram).0.into_iter().map(|x| x.max(0.0).sqrt()).collect()
}

/// Top-`k` right singular subspace from the Gram matrix `MᵀM` (D×k columns).
pub fn oracle_right_subspace(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let (_, vecs) = jacobi_eigen(&(m.transpose() * m));
    vecs.columns(0, k).clone_owned()
}

/// Cosines of the principal angles between two orthonormal column sets.
pub fn principal_cosines(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    oracle_singular_values(&(a.transpose() * b))
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// The objective recomputed from its definition. `gamma` is 1×k (shared)
/// or C×k (per-class); `views` are the already-filtered rows.
pub fn reference_loss(
    z: &DMatrix<f64>,
    b: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    views: &DMatrix<f64>,
    lambda: f64,
    scale: f64,
) -> f64 {
    let (c, d) = z.shape();
    let k = b.ncols();
    let shift_row = |row: usize| -> Vec<f64> {
        (0..d).map(|j| (0..k).map(|t| b[(j, t)] * gamma[(row, t)]).sum()).collect()
    };
    let shifts: Vec<Vec<f64>> = (0..gamma.nrows()).map(shift_row).collect();
    let adapted: Vec<Vec<f64>> = (0..c)
        .map(|i| {
            let delta = &shifts[if gamma.nrows() == 1 { 0 } else { i }];
            let raw: Vec<f64> = (0..d).map(|j| z[(i, j)] + delta[j]).collect();
            let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            raw.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let mut mean = vec![0.0; c];
    for v in views.row_iter() {
        let logits: Vec<f64> = adapted.iter().map(|a| scale * a.iter().zip(v.iter()).map(|(x, y)| x * y).sum::<f64>()).collect();
        for (m, p) in mean.iter_mut().zip(softmax(&logits)) {
            *m += p / views.nrows() as f64;
        }
    }
    let h: f64 = mean.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum();
    let reg: f64 = shifts.iter().map(|s| s.iter().map(|x| x * x).sum::<f64>().sqrt()).sum();
    h + lambda * reg
}

/// Central differences of [`reference_loss`] with step `h`.
pub fn finite_difference_grad(
    z: &DMatrix<f64>,
    b: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    views: &DMatrix<f64>,
    lambda: f64,
    scale: f64,
    h: f64,
) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(gamma.nrows(), gamma.ncols());
    for i in 0..gamma.len() {
        let mut plus = gamma.clone();
        plus[i] += h;
        let mut minus = gamma.clone();
        minus[i] -= h;
        g[i] = (reference_loss(z, b, &plus, views, lambda, scale) - reference_loss(z, b, &minus, views, lambda, scale)) / (2.0 * h);
    }
    g
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, floor)`.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    let inf = |m: &DMatrix<f64>| m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    inf(&(a - b)) / inf(a).max(inf(b)).max(floor)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

/// One seeded gradient-check instance: returns the relative error between
/// the engine's analytic gradient and central differences of
/// [`reference_loss`], along with the absolute loss discrepancy.
pub struct GradientCase {
    pub label: String,
    pub rel_error: f64,
    pub loss_gap: f64,
}

pub fn gradient_case(index: usize) -> GradientCase {
    use sts_core::objective::{filter_views, sts_loss_and_grad};
    use sts_core::spectral::{steering_basis, RankSpec};
    use sts_core::{CoefficientMode, PrototypeSet, SteeringCoefficients, ViewBatch};

    let classes = [2usize, 4, 16];
    let dims = [8usize, 64];
    let c = classes[index % 3];
    let d = dims[(index / 3) % 2];
    let mode = if (index / 6) % 2 == 0 { CoefficientMode::Shared } else { CoefficientMode::PerClass };
    let mut r = rng(10_000 + index as u64);
    let k = r.random_range(1..=c.min(d));
    let scale = 100.0;
    let lambda = 0.01;

    let z = unit_rows(&mut r, c, d);
    let names = (0..c).map(|i| format!("c{i}")).collect();
    let proto = PrototypeSet::new(names, z.clone(), 1, scale).unwrap();
    let (_, basis) = steering_basis(&z, &RankSpec::Fixed { k }, false).unwrap();

    // views near a random prototype keep the softmax away from saturation
    let n = 16;
    let mut raw = gaussian(&mut r, n, d) * (0.5 / (d as f64).sqrt());
    for (j, mut row) in raw.row_iter_mut().enumerate() {
        row += z.row(j % c) * 0.05;
        let norm = row.norm();
        row /= norm;
    }
    let views = ViewBatch::new("g", raw, 0).unwrap();
    let filter = filter_views(&views, &proto, 0.5).unwrap();

    let rows = if mode == CoefficientMode::Shared { 1 } else { c };
    let gamma = gaussian(&mut r, rows, k) * 0.05;
    let coeffs = SteeringCoefficients::from_matrix(mode, gamma.clone()).unwrap();
    let loss = sts_loss_and_grad(&proto, &basis, &coeffs, &filter, &views, lambda, scale).unwrap();

    let filtered = views.gather(&filter.retained);
    let fd = finite_difference_grad(&z, &basis.b, &gamma, &filtered, lambda, scale, 1e-5);
    let reference = reference_loss(&z, &basis.b, &gamma, &filtered, lambda, scale);
    GradientCase {
        label: format!("C={c} D={d} k={k} {mode:?}"),
        rel_error: relative_error(&loss.grad, &fd, 1e-8),
        loss_gap: (loss.total - reference).abs(),
    }
}

/// Which error a malformed bundle must produce.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Expected {
    Format(u64),
    Corruption,
    InvalidData,
}

pub fn classify(e: &sts_core::StsError) -> Option<Expected> {
    use sts_core::StsError;
    match e {
        StsError::Format { offset, .. } => Some(Expected::Format(*offset)),
        StsError::Corruption(_) => Some(Expected::Corruption),
        StsError::InvalidData(_) => Some(Expected::InvalidData),
        _ => None,
    }
}

fn header(magic: &[u8; 4], version: u32, rows: u32, cols: u32, dtype: u8) -> Vec<u8> {
    let mut b = magic.to_vec();
    b.extend_from_slice(&version.to_le_bytes());
    b.extend_from_slice(&rows.to_le_bytes());
    b.extend_from_slice(&cols.to_le_bytes());
    b.push(dtype);
    b
}

fn with_payload(mut h: Vec<u8>, values: &[f32]) -> Vec<u8> {
    for v in values {
        h.extend_from_slice(&v.to_le_bytes());
    }
    h
}

/// Hand-built malformed files and the error each must raise.
pub fn malformed_bundles() -> Vec<(&'static str, Vec<u8>, Expected)> {
    let ok = [0.5f32, -0.5, 1.0, 2.0];
    vec![
        ("empty file", vec![], Expected::Corruption),
        ("half a header", b"STSE\x01\x00".to_vec(), Expected::Corruption),
        ("magic XTSE", with_payload(header(b"XTSE", 1, 2, 2, 0), &ok), Expected::Format(0)),
        ("lowercase magic", with_payload(header(b"stse", 1, 2, 2, 0), &ok), Expected::Format(0)),
        ("version 0", with_payload(header(b"STSE", 0, 2, 2, 0), &ok), Expected::Format(4)),
        ("version 2", with_payload(header(b"STSE", 2, 2, 2, 0), &ok), Expected::Format(4)),
        ("big-endian version", with_payload(header(b"STSE", 1u32.swap_bytes(), 2, 2, 0), &ok), Expected::Format(4)),
        ("zero rows", header(b"STSE", 1, 0, 2, 0), Expected::Format(8)),
        ("zero cols", header(b"STSE", 1, 2, 0, 0), Expected::Format(12)),
        ("dtype f64", with_payload(header(b"STSE", 1, 2, 2, 1), &ok), Expected::Format(16)),
        ("dtype 255", with_payload(header(b"STSE", 1, 2, 2, 255), &ok), Expected::Format(16)),
        ("truncated payload", with_payload(header(b"STSE", 1, 2, 2, 0), &ok[..3]), Expected::Corruption),
        ("payload one byte short", {
            let mut b = with_payload(header(b"STSE", 1, 2, 2, 0), &ok);
            b.pop();
            b
        }, Expected::Corruption),
        ("trailing byte", {
            let mut b = with_payload(header(b"STSE", 1, 2, 2, 0), &ok);
            b.push(0);
            b
        }, Expected::Format(17 + 16)),
        ("NaN payload", with_payload(header(b"STSE", 1, 2, 2, 0), &[0.5, f32::NAN, 1.0, 2.0]), Expected::InvalidData),
        ("infinite payload", with_payload(header(b"STSE", 1, 2, 2, 0), &[0.5, 1.0, f32::NEG_INFINITY, 2.0]), Expected::InvalidData),
        ("huge declared shape", header(b"STSE", 1, u32::MAX, u32::MAX, 0), Expected::Corruption),
    ]
}
