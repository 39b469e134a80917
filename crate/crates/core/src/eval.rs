//! The stress-based performance measure `F`, its optimal scale, and
//! cross-collection performance profiles.
//!
//! For a rarity vector `R` and a weighted dissimilarity matrix,
//!
//! ```text
//! F(R) = sqrt( Σ w_ij (|R_i - R_j| - δ_ij)^2 / Σ w_ij |R_i - R_j|^2 )
//! ```
//!
//! summed over pairs with `w_ij > 0`. Lower is better.

use serde::{Deserialize, Serialize};

use crate::dissim::DissimMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureResult {
    pub f_value: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub alpha_used: f64,
}

/// Weighted sums `Σ w d²`, `Σ w d δ`, `Σ w δ²` over the weighted pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct PairMoments {
    pub dd: f64,
    pub dx: f64,
    pub xx: f64,
}

impl PairMoments {
    pub fn of(scores: &[f64], m: &DissimMatrix) -> Self {
        let mut acc = Self::default();
        for p in m.pairs() {
            acc.add(p.weight, (scores[p.i] - scores[p.j]).abs(), p.dissim);
        }
        acc
    }

    #[inline]
    pub fn add(&mut self, w: f64, d: f64, delta: f64) {
        self.dd += w * d * d;
        self.dx += w * d * delta;
        self.xx += w * delta * delta;
    }

    /// `min over α > 0 of F(α R)^2`, the cosine gap between `d` and `δ`.
    pub fn scale_free_f2(&self) -> f64 {
        if self.dd <= 0.0 || self.xx <= 0.0 {
            return f64::INFINITY;
        }
        if self.dx <= 0.0 {
            return 1.0;
        }
        (1.0 - self.dx * self.dx / (self.dd * self.xx)).max(0.0)
    }
}

fn check_dims(scores: &[f64], m: &DissimMatrix) -> Result<()> {
    if scores.len() != m.n() {
        return Err(Error::DimensionMismatch { expected: m.n(), got: scores.len() });
    }
    if m.is_unweighted() {
        return Err(Error::NoWeights);
    }
    Ok(())
}

/// `F` of the scores exactly as given.
pub fn measure_f(scores: &[f64], m: &DissimMatrix) -> Result<MeasureResult> {
    check_dims(scores, m)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for p in m.pairs() {
        let d = (scores[p.i] - scores[p.j]).abs();
        num += p.weight * (d - p.dissim).powi(2);
        den += p.weight * d * d;
    }
    if den <= 0.0 {
        return Err(Error::DegenerateMeter);
    }
    Ok(MeasureResult { f_value: (num / den).sqrt(), numerator: num, denominator: den, alpha_used: 1.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleFit {
    pub alpha: f64,
    /// Set when `Σ w d δ = 0`; `alpha` is then 1.
    pub degenerate: bool,
}

/// The `α > 0` minimizing `F(α R)`: `Σ w δ² / Σ w d δ`.
pub fn optimal_scale(scores: &[f64], m: &DissimMatrix) -> Result<ScaleFit> {
    check_dims(scores, m)?;
    let mom = PairMoments::of(scores, m);
    if mom.dx <= 0.0 || mom.xx <= 0.0 {
        return Ok(ScaleFit { alpha: 1.0, degenerate: true });
    }
    Ok(ScaleFit { alpha: mom.xx / mom.dx, degenerate: false })
}

/// `F` after rescaling the scores by their optimal `α` on `m`.
pub fn measure_f_scaled(scores: &[f64], m: &DissimMatrix) -> Result<MeasureResult> {
    let fit = optimal_scale(scores, m)?;
    measure_with_alpha(scores, m, fit.alpha)
}

/// `F(α R)` for a caller-chosen `α`, e.g. one fitted on another matrix.
pub fn measure_with_alpha(scores: &[f64], m: &DissimMatrix, alpha: f64) -> Result<MeasureResult> {
    let scaled: Vec<f64> = scores.iter().map(|v| v * alpha).collect();
    let mut res = measure_f(&scaled, m)?;
    res.alpha_used = alpha;
    Ok(res)
}

/// `F` values for `M` meters on `C` collections. `None` marks a missing
/// entry; degenerate meters should be entered as `f64::INFINITY`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTable {
    pub meters: Vec<String>,
    pub collections: Vec<String>,
    /// `f_matrix[m][c]`
    pub f_matrix: Vec<Vec<Option<f64>>>,
}

/// Right-continuous step function `ρ(τ)` for one meter.
///
/// `ρ(τ)` is the fraction of `gaps` that are `<= τ`; `gaps` is sorted and may
/// contain `+∞` for collections where the meter never comes within reach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub meter: String,
    pub gaps: Vec<f64>,
}

impl Profile {
    pub fn rho(&self, tau: f64) -> f64 {
        let within = self.gaps.partition_point(|&g| g <= tau);
        within as f64 / self.gaps.len() as f64
    }

    /// Breakpoints `(τ, ρ(τ))` at every finite jump.
    pub fn steps(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (k, &g) in self.gaps.iter().enumerate() {
            if !g.is_finite() {
                break;
            }
            let rho = (k + 1) as f64 / self.gaps.len() as f64;
            match out.last_mut() {
                Some(last) if last.0 == g => last.1 = rho,
                _ => out.push((g, rho)),
            }
        }
        out
    }
}

/// Minimization-form performance profiles:
/// `ρ(τ; m) = #{c : F[m][c] <= min_i F[i][c] + τ} / C`.
pub fn profile(table: &ProfileTable) -> Result<Vec<Profile>> {
    if table.meters.is_empty() || table.collections.is_empty() {
        return Err(Error::EmptyTable);
    }
    let c_count = table.collections.len();
    let mut best = vec![f64::INFINITY; c_count];
    for (mi, row) in table.f_matrix.iter().enumerate() {
        if row.len() != c_count {
            return Err(Error::DimensionMismatch { expected: c_count, got: row.len() });
        }
        for (c, v) in row.iter().enumerate() {
            let v = v.ok_or_else(|| Error::MissingEntry {
                meter: table.meters[mi].clone(),
                collection: table.collections[c].clone(),
            })?;
            best[c] = best[c].min(v);
        }
    }
    Ok(table
        .meters
        .iter()
        .zip(&table.f_matrix)
        .map(|(name, row)| {
            let mut gaps: Vec<f64> = row
                .iter()
                .zip(&best)
                .map(|(v, &b)| {
                    let v = v.expect("checked above");
                    if v.is_finite() { v - b } else { f64::INFINITY }
                })
                .collect();
            gaps.sort_by(f64::total_cmp);
            Profile { meter: name.clone(), gaps }
        })
        .collect())
}
