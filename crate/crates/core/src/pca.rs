//! Two-component PCA for embedding export.
//!
//! Small feature spaces (tens of dimensions) make a dependency-free cyclic
//! Jacobi eigensolver entirely adequate: the covariance matrix is symmetric
//! PSD and at most 64x64 here. The solver is deterministic, so exports are
//! byte-stable run to run.

use crate::energy::FeatureBatch;
use crate::{Error, Result};

/// A batch projected onto its top two principal components.
#[derive(Debug, Clone)]
pub struct Projection {
    /// Per-row `[pc1, pc2]` coordinates.
    pub coords: Vec<[f64; 2]>,
    /// Sample variances along the two components, non-increasing.
    pub variances: [f64; 2],
    /// The component directions (unit vectors in feature space).
    pub components: [Vec<f64>; 2],
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major).
/// Returns eigenvalues and the matrix of eigenvectors stored column-wise
/// (`v[i * m + j]` = coordinate `i` of eigenvector `j`).
fn jacobi_eigen(mut a: Vec<f64>, m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; m * m];
    for i in 0..m {
        v[i * m + i] = 1.0;
    }
    let scale: f64 = (0..m).map(|i| a[i * m + i].abs()).fold(0.0, f64::max).max(1e-300);
    let tol = 1e-14 * scale;

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..m {
            for q in (p + 1)..m {
                off = off.max(a[p * m + q].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..m - 1 {
            for q in (p + 1)..m {
                let apq = a[p * m + q];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let theta = (a[q * m + q] - a[p * m + p]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                let app = a[p * m + p];
                let aqq = a[q * m + q];
                a[p * m + p] = app - t * apq;
                a[q * m + q] = aqq + t * apq;
                a[p * m + q] = 0.0;
                a[q * m + p] = 0.0;
                for k in 0..m {
                    if k != p && k != q {
                        let akp = a[k * m + p];
                        let akq = a[k * m + q];
                        a[k * m + p] = c * akp - s * akq;
                        a[p * m + k] = a[k * m + p];
                        a[k * m + q] = s * akp + c * akq;
                        a[q * m + k] = a[k * m + q];
                    }
                }
                for k in 0..m {
                    let vkp = v[k * m + p];
                    let vkq = v[k * m + q];
                    v[k * m + p] = c * vkp - s * vkq;
                    v[k * m + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let eig: Vec<f64> = (0..m).map(|i| a[i * m + i]).collect();
    (eig, v)
}

/// Project a batch onto its top two principal components.
///
/// Requires at least 3 rows (fewer have no meaningful second component) and
/// at least 2 feature dimensions. Component signs follow a fixed convention —
/// the first coordinate of each component with magnitude above `1e-12` is
/// made positive — so equal inputs always produce equal outputs.
pub fn top2_projection(features: &FeatureBatch) -> Result<Projection> {
    let n = features.rows();
    let m = features.dim();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 3 rows, got {n}")));
    }
    if m < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 feature dimensions, got {m}")));
    }
    features.ensure_finite("PCA input")?;

    // Column means, then the sample covariance (n - 1 denominator).
    let mut mean = vec![0.0; m];
    for i in 0..n {
        for (mu, x) in mean.iter_mut().zip(features.row(i)) {
            *mu += x;
        }
    }
    for mu in mean.iter_mut() {
        *mu /= n as f64;
    }
    let mut cov = vec![0.0; m * m];
    for i in 0..n {
        let row = features.row(i);
        for a in 0..m {
            let da = row[a] - mean[a];
            for b in a..m {
                cov[a * m + b] += da * (row[b] - mean[b]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..m {
        for b in a..m {
            cov[a * m + b] /= denom;
            cov[b * m + a] = cov[a * m + b];
        }
    }

    let (eig, vecs) = jacobi_eigen(cov, m);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig[j].total_cmp(&eig[i]));
    let top = [order[0], order[1]];

    let mut components: [Vec<f64>; 2] = [vec![0.0; m], vec![0.0; m]];
    for (slot, &col) in top.iter().enumerate() {
        for i in 0..m {
            components[slot][i] = vecs[i * m + col];
        }
        // Sign convention for determinism across equivalent eigenvectors.
        if let Some(first) = components[slot].iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                for v in components[slot].iter_mut() {
                    *v = -*v;
                }
            }
        }
    }

    let coords: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let row = features.row(i);
            let mut c = [0.0; 2];
            for (slot, comp) in components.iter().enumerate() {
                c[slot] = row.iter().zip(comp.iter()).zip(&mean).map(|((x, w), mu)| (x - mu) * w).sum();
            }
            c
        })
        .collect();

    // Covariance is PSD; clip the rounding dust so reported variances are
    // never negative.
    let variances = [eig[top[0]].max(0.0), eig[top[1]].max(0.0)];
    Ok(Projection { coords, variances, components })
}
