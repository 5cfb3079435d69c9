//! Fréchet feature distance and diversity score over frozen-trunk features.
//!
//! FFD(A, B) = |mu_A - mu_B|^2 + Tr(S_A + S_B - 2 (S_A S_B)^{1/2}) with the
//! matrix square root computed as sqrt(S_A)^{1/2}-conjugation so every
//! eigendecomposition happens on a symmetric PSD matrix. Covariances get a
//! ridge of 1e-6 before the root and eigenvalues clamp at zero.

use super::faa::FaaClassifier;
use crate::synthworld::Image;
use crate::{Error, Result};
use ndarray::{Array1, Array2};

const RIDGE: f64 = 1e-6;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors-as-columns), descending by eigenvalue.
pub fn jacobi_eigh(m: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    let mut a = m.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[[i, j]] * a[[i, j]];
            }
        }
        if off.sqrt() < 1e-12 * (1.0 + a.diag().iter().map(|d| d.abs()).sum::<f64>()) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]));
    let vals: Vec<f64> = order.iter().map(|&i| a[[i, i]]).collect();
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (col, &i) in order.iter().enumerate() {
        for r in 0..n {
            vecs[[r, col]] = v[[r, i]];
        }
    }
    (vals, vecs)
}

/// Symmetric PSD square root via eigendecomposition with clamping at zero.
fn sqrt_psd(m: &Array2<f64>) -> Array2<f64> {
    let (vals, vecs) = jacobi_eigh(m);
    let n = m.nrows();
    let mut out = Array2::<f64>::zeros((n, n));
    for k in 0..n {
        let s = vals[k].max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += s * vecs[[i, k]] * vecs[[j, k]];
            }
        }
    }
    out
}

/// Gaussian moment fit of feature rows.
pub fn moments(features: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let (n, d) = features.dim();
    let mut mu = Array1::<f64>::zeros(d);
    for row in features.rows() {
        mu = mu + &row;
    }
    mu.mapv_inplace(|v| v / n as f64);
    let mut cov = Array2::<f64>::zeros((d, d));
    for row in features.rows() {
        let dev = &row - &mu;
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] += dev[i] * dev[j];
            }
        }
    }
    cov.mapv_inplace(|v| v / (n as f64 - 1.0));
    (mu, cov)
}

/// Closed-form Fréchet distance between two Gaussian moment fits.
pub fn ffd_from_moments(
    mu_a: &Array1<f64>,
    cov_a: &Array2<f64>,
    mu_b: &Array1<f64>,
    cov_b: &Array2<f64>,
) -> f64 {
    let d = mu_a.len();
    let mut ca = cov_a.clone();
    let mut cb = cov_b.clone();
    for i in 0..d {
        ca[[i, i]] += RIDGE;
        cb[[i, i]] += RIDGE;
    }
    let diff = mu_a - mu_b;
    let mean_term: f64 = diff.iter().map(|v| v * v).sum();
    let a_half = sqrt_psd(&ca);
    let inner = a_half.dot(&cb).dot(&a_half);
    let inner_sqrt = sqrt_psd(&inner);
    let tr_a: f64 = ca.diag().sum();
    let tr_b: f64 = cb.diag().sum();
    let tr_mix: f64 = inner_sqrt.diag().sum();
    (mean_term + tr_a + tr_b - 2.0 * tr_mix).max(0.0)
}

fn features_f64(trunk: &FaaClassifier, images: &[Image]) -> Array2<f64> {
    let f = trunk.features(images);
    f.mapv(|v| v as f64)
}

/// Fréchet feature distance between two image sets on the frozen trunk.
/// Requires at least feature-dim + 1 samples per side.
pub fn frechet_feature_distance(a: &[Image], b: &[Image], trunk: &FaaClassifier) -> Result<f64> {
    let need = super::faa::FEATURE_DIM + 1;
    if a.len() < need || b.len() < need {
        return Err(Error::Precondition(format!(
            "FFD needs at least {need} samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let fa = features_f64(trunk, a);
    let fb = features_f64(trunk, b);
    let (mu_a, cov_a) = moments(&fa);
    let (mu_b, cov_b) = moments(&fb);
    Ok(ffd_from_moments(&mu_a, &cov_a, &mu_b, &cov_b))
}

/// Mean pairwise distance between unit-normalized trunk features over all
/// unordered pairs.
pub fn diversity_score(images: &[Image], trunk: &FaaClassifier) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::Precondition("diversity needs at least 2 images".into()));
    }
    let f = features_f64(trunk, images);
    let (n, d) = f.dim();
    let mut unit = f;
    for mut row in unit.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let mut acc = 0.0;
            for k in 0..d {
                let dv = unit[[i, k]] - unit[[j, k]];
                acc += dv * dv;
            }
            total += acc.sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}
