//! Pairwise potential differences and the exponential energy kernel.
//!
//! The "potential difference" between two feature vectors is their Euclidean
//! distance; the energy of a pair is `exp(beta * d) - 1`. Energy is zero for
//! identical features and grows exponentially with separation, which is what
//! lets a simple hinge on mean energies order whole relation groups. The
//! exponent is clamped (default 30) so early-training outliers saturate
//! instead of overflowing; the clamp region contributes zero gradient.

use crate::{Error, Result};

/// Distances below this are treated as exactly zero for gradient purposes:
/// the Euclidean norm is not differentiable at zero, and the subgradient we
/// pick there is the zero vector.
pub(crate) const ZERO_DISTANCE_EPS: f64 = 1e-12;

/// Parameters of the energy kernel.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    /// Sharpness of the kernel; larger values punish separation harder.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Cap on `beta * d` inside the exponential.
    #[serde(default = "default_exponent_clamp")]
    pub exponent_clamp: f64,
}

fn default_beta() -> f64 {
    1.0
}

fn default_exponent_clamp() -> f64 {
    30.0
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig { beta: default_beta(), exponent_clamp: default_exponent_clamp() }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!("energy beta must be finite and positive, got {}", self.beta)));
        }
        if !(self.exponent_clamp.is_finite() && self.exponent_clamp > 0.0) {
            return Err(Error::Config(format!(
                "energy exponent clamp must be finite and positive, got {}",
                self.exponent_clamp
            )));
        }
        Ok(())
    }
}

/// A dense `rows x dim` matrix of feature vectors, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureBatch {
    /// Zero-filled batch.
    pub fn zeros(rows: usize, dim: usize) -> Self {
        FeatureBatch { rows, dim, data: vec![0.0; rows * dim] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("feature batch needs at least one row".into()));
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::InvalidArgument("feature rows must have at least one column".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(FeatureBatch { rows: rows.len(), dim, data })
    }

    pub fn from_flat(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::InvalidArgument("feature batch needs rows >= 1 and dim >= 1".into()));
        }
        if data.len() != rows * dim {
            return Err(Error::DimensionMismatch { expected: rows * dim, actual: data.len() });
        }
        Ok(FeatureBatch { rows, dim, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Errors if any entry is NaN or infinite; `context` names the culprit in
    /// the message.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(context.into()));
        }
        Ok(())
    }
}

#[inline]
fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

/// Kernel value for a given distance. Total, monotone non-decreasing, zero at
/// zero distance.
#[inline]
pub(crate) fn kernel(d: f64, cfg: &EnergyConfig) -> f64 {
    (cfg.beta * d).min(cfg.exponent_clamp).exp() - 1.0
}

/// dE/dd. Exactly zero once the exponent clamp is active — the cap is a
/// plateau, not a pass-through.
#[inline]
pub(crate) fn kernel_slope(d: f64, cfg: &EnergyConfig) -> f64 {
    let z = cfg.beta * d;
    if z >= cfg.exponent_clamp {
        0.0
    } else {
        cfg.beta * z.exp()
    }
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::InvalidArgument("feature vectors must be non-empty".into()));
    }
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), actual: b.len() });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pair potential input".into()));
    }
    Ok(())
}

/// Euclidean distance between two feature vectors.
pub fn potential_difference(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    Ok(l2_distance(a, b))
}

/// Energy of a pair: `exp(min(beta * d, clamp)) - 1`.
pub fn pair_potential(a: &[f64], b: &[f64], cfg: &EnergyConfig) -> Result<f64> {
    cfg.validate()?;
    check_pair(a, b)?;
    Ok(kernel(l2_distance(a, b), cfg))
}

/// Energy of a pair plus its gradient with respect to `a`. The gradient with
/// respect to `b` is the negation. At (numerically) zero distance and inside
/// the clamp plateau the gradient is the zero vector.
pub fn pair_potential_grad(a: &[f64], b: &[f64], cfg: &EnergyConfig) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    check_pair(a, b)?;
    let d = l2_distance(a, b);
    let value = kernel(d, cfg);
    let mut grad = vec![0.0; a.len()];
    if d >= ZERO_DISTANCE_EPS {
        let scale = kernel_slope(d, cfg) / d;
        for (g, (x, y)) in grad.iter_mut().zip(a.iter().zip(b)) {
            *g = scale * (x - y);
        }
    }
    Ok((value, grad))
}

/// Symmetric matrix of pairwise energies with a zero diagonal.
#[derive(Debug, Clone)]
pub struct EnergyMatrix {
    n: usize,
    data: Vec<f64>,
}

impl EnergyMatrix {
    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

/// Distances and energies for every pair in a batch, computed once and shared
/// by the losses. Symmetric with zero diagonals by construction.
#[derive(Debug, Clone)]
pub(crate) struct PairTables {
    pub n: usize,
    pub dist: Vec<f64>,
    pub energy: Vec<f64>,
}

impl PairTables {
    #[inline]
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n + j]
    }

    #[inline]
    pub fn energy(&self, i: usize, j: usize) -> f64 {
        self.energy[i * self.n + j]
    }
}

pub(crate) fn pair_tables(batch: &FeatureBatch, cfg: &EnergyConfig) -> PairTables {
    let n = batch.rows();
    let mut dist = vec![0.0; n * n];
    let mut energy = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = l2_distance(batch.row(i), batch.row(j));
            let e = kernel(d, cfg);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
            energy[i * n + j] = e;
            energy[j * n + i] = e;
        }
    }
    PairTables { n, dist, energy }
}

/// All pairwise energies of a batch.
pub fn pairwise_energy_matrix(batch: &FeatureBatch, cfg: &EnergyConfig) -> Result<EnergyMatrix> {
    cfg.validate()?;
    batch.ensure_finite("pairwise energy input")?;
    let tables = pair_tables(batch, cfg);
    Ok(EnergyMatrix { n: tables.n, data: tables.energy })
}
