//! Turning a target noise multiplier and per-group bounds into per-group
//! noise levels, and splitting a total clip norm across groups.
//!
//! These are pure functions of bounds and dimensions. They never see data,
//! and their output only reaches the accountant through the `(S_g, σ_g)`
//! values the mechanisms record in the ledger.

use crate::error::{invalid, Result};
use crate::mechanisms::round_compose;
use crate::vector::PrivacyTuple;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseStrategy {
    /// Noise proportional to each group's clip norm.
    Proportional,
    /// Noise scaled by `sqrt(D / d_g)`, so each coordinate's worst-case RMS
    /// gets the same relative noise.
    DimensionalityAdjusted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationRequest {
    pub target_z: f64,
    /// `(clip norm, dimensionality)` per group.
    pub group_bounds: Vec<(f64, usize)>,
    pub strategy: NoiseStrategy,
}

impl AllocationRequest {
    fn validate(&self) -> Result<()> {
        if !(self.target_z > 0.0 && self.target_z.is_finite()) {
            return Err(invalid(format!(
                "target z must be positive, got {}",
                self.target_z
            )));
        }
        if self.group_bounds.is_empty() {
            return Err(invalid("no groups to allocate noise to"));
        }
        for &(s, d) in &self.group_bounds {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid(format!("clip norm must be positive, got {s}")));
            }
            if d == 0 {
                return Err(invalid("group dimensionality must be at least 1"));
            }
        }
        Ok(())
    }
}

/// `z = 1/S*` for a round's tuples.
pub fn effective_z(tuples: &[PrivacyTuple]) -> Result<f64> {
    Ok(round_compose(tuples)?.z_effective)
}

/// `z` from per-average noise levels: `q n (Σ (S_g/σ_g)²)^(-1/2)`.
pub fn effective_z_from_average_noise(
    clip_and_sigma: &[(f64, f64)],
    q: f64,
    n: u64,
) -> Result<f64> {
    let qn = q * n as f64;
    let tuples = clip_and_sigma
        .iter()
        .map(|&(s, sigma)| PrivacyTuple::new(s, qn * sigma))
        .collect::<Result<Vec<_>>>()?;
    effective_z(&tuples)
}

/// `σ_g = z √G S_g`.
pub fn proportional_allocation(req: &AllocationRequest) -> Result<Vec<f64>> {
    req.validate()?;
    if req.strategy != NoiseStrategy::Proportional {
        return Err(invalid("request is not for proportional allocation"));
    }
    let root_g = (req.group_bounds.len() as f64).sqrt();
    Ok(req
        .group_bounds
        .iter()
        .map(|&(s, _)| req.target_z * root_g * s)
        .collect())
}

/// `σ_g = z √(D/d_g) S_g` with `D = Σ d_g`.
pub fn dim_adjusted_allocation(req: &AllocationRequest) -> Result<Vec<f64>> {
    req.validate()?;
    if req.strategy != NoiseStrategy::DimensionalityAdjusted {
        return Err(invalid(
            "request is not for dimensionality-adjusted allocation",
        ));
    }
    let total: usize = req.group_bounds.iter().map(|&(_, d)| d).sum();
    Ok(req
        .group_bounds
        .iter()
        .map(|&(s, d)| req.target_z * (total as f64 / d as f64).sqrt() * s)
        .collect())
}

/// Dispatches on `req.strategy`.
pub fn allocate(req: &AllocationRequest) -> Result<Vec<f64>> {
    match req.strategy {
        NoiseStrategy::Proportional => proportional_allocation(req),
        NoiseStrategy::DimensionalityAdjusted => dim_adjusted_allocation(req),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipSplit {
    /// One group holding every vector, clipped at the total.
    Flat,
    /// `S/√m` per vector.
    PerLayer,
    /// `S √(d_g/D)` per group, so the squared budgets sum to `S²`.
    DimFraction,
    /// `S / √(d_g/D)`. Gives small groups the larger budget and does not
    /// conserve `Σ S_g²`; available only on explicit request.
    DimFractionInverse,
}

/// Splits a total clip norm across groups of the given dimensionalities.
pub fn split_clip_budget(
    total: f64,
    group_dims: &[usize],
    strategy: ClipSplit,
) -> Result<Vec<f64>> {
    if !(total > 0.0 && total.is_finite()) {
        return Err(invalid(format!(
            "total clip norm must be positive, got {total}"
        )));
    }
    if group_dims.is_empty() {
        return Err(invalid("no groups to split the clip norm across"));
    }
    if group_dims.contains(&0) {
        return Err(invalid("group dimensionality must be at least 1"));
    }
    let m = group_dims.len() as f64;
    let d_total: usize = group_dims.iter().sum();
    let frac = |d: usize| (d as f64 / d_total as f64).sqrt();
    Ok(match strategy {
        ClipSplit::Flat => vec![total],
        ClipSplit::PerLayer => vec![total / m.sqrt(); group_dims.len()],
        ClipSplit::DimFraction => group_dims.iter().map(|&d| total * frac(d)).collect(),
        ClipSplit::DimFractionInverse => group_dims.iter().map(|&d| total / frac(d)).collect(),
    })
}
