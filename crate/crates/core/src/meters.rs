//! Interpretable rarity meters computed from trait frequencies, and the
//! non-negative ensemble fitter used by KRAMER and ROAR.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collection::Collection;
use crate::dissim::{DissimMatrix, WeightedPair};
use crate::error::{Error, Result};
use crate::eval::{optimal_scale, PairMoments};

/// Meter identifiers as used on the command line and in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeterKind {
    #[serde(rename = "rt")]
    RarityTools,
    #[serde(rename = "kr")]
    Kramer,
    #[serde(rename = "or")]
    OpenRarity,
    #[serde(rename = "go")]
    NftGo,
    Roar,
    Dit,
}

impl MeterKind {
    pub const ALL: [MeterKind; 6] = [
        MeterKind::RarityTools,
        MeterKind::Kramer,
        MeterKind::OpenRarity,
        MeterKind::NftGo,
        MeterKind::Roar,
        MeterKind::Dit,
    ];

    /// Meters that are analytic functions of traits and may serve as the
    /// regression coordinate for out-of-sample extension.
    pub const INTERPRETABLE: [MeterKind; 4] =
        [MeterKind::RarityTools, MeterKind::Kramer, MeterKind::OpenRarity, MeterKind::NftGo];

    pub fn code(self) -> &'static str {
        match self {
            MeterKind::RarityTools => "rt",
            MeterKind::Kramer => "kr",
            MeterKind::OpenRarity => "or",
            MeterKind::NftGo => "go",
            MeterKind::Roar => "roar",
            MeterKind::Dit => "dit",
        }
    }

    pub fn needs_matrix(self) -> bool {
        matches!(self, MeterKind::Kramer | MeterKind::Roar | MeterKind::Dit)
    }
}

impl fmt::Display for MeterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for MeterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "rt" | "rarity_tools" | "raritytools" => MeterKind::RarityTools,
            "kr" | "kramer" => MeterKind::Kramer,
            "or" | "open_rarity" | "openrarity" => MeterKind::OpenRarity,
            "go" | "nftgo" => MeterKind::NftGo,
            "roar" | "rr" => MeterKind::Roar,
            "dit" => MeterKind::Dit,
            other => return Err(Error::UnknownMeter(other.to_string())),
        })
    }
}

/// Parses a comma-separated meter list such as `rt,kr,or`.
pub fn parse_meter_list(s: &str) -> Result<Vec<MeterKind>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RarityVector {
    pub meter_name: String,
    pub scores: Vec<f64>,
}

impl RarityVector {
    pub fn new(meter_name: impl Into<String>, scores: Vec<f64>) -> Self {
        Self { meter_name: meter_name.into(), scores }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self { meter_name: self.meter_name.clone(), scores: self.scores.iter().map(|v| v * alpha).collect() }
    }
}

/// Per-token building-block scores, stored column by column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitScoreTable {
    pub column_names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl TraitScoreTable {
    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows()];
        for col in &self.columns {
            for (o, v) in out.iter_mut().zip(col) {
                *o += v;
            }
        }
        out
    }

    /// Concatenates columns of several tables with equal row counts.
    pub fn hstack(tables: &[&TraitScoreTable]) -> Self {
        let mut out = Self { column_names: Vec::new(), columns: Vec::new() };
        for t in tables {
            out.column_names.extend(t.column_names.iter().cloned());
            out.columns.extend(t.columns.iter().cloned());
        }
        out
    }
}

/// Value-group size of every token in every trait column.
fn group_sizes(c: &Collection) -> Vec<Vec<usize>> {
    (0..c.trait_count())
        .map(|t| {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for v in c.column(t) {
                *counts.entry(v).or_default() += 1;
            }
            c.column(t).map(|v| counts[v]).collect()
        })
        .collect()
}

/// Inverse trait frequencies `N / #{same value}` for each trait plus the
/// traits-count meta column.
pub fn rarity_tools_table(c: &Collection) -> TraitScoreTable {
    let n = c.len() as f64;
    let mut column_names: Vec<String> = c.trait_names.iter().map(|t| format!("rt:{t}")).collect();
    let mut columns: Vec<Vec<f64>> =
        group_sizes(c).into_iter().map(|g| g.into_iter().map(|s| n / s as f64).collect()).collect();

    let mut count_freq: HashMap<usize, usize> = HashMap::new();
    for tok in &c.tokens {
        *count_freq.entry(tok.trait_count()).or_default() += 1;
    }
    column_names.push("rt:traits_count".into());
    columns.push(c.tokens.iter().map(|tok| n / count_freq[&tok.trait_count()] as f64).collect());
    TraitScoreTable { column_names, columns }
}

pub fn rarity_tools(c: &Collection) -> RarityVector {
    RarityVector::new(MeterKind::RarityTools.code(), rarity_tools_table(c).row_sums())
}

/// Tournament scores per trait: a token beats every token in a strictly
/// larger value group and draws (½) with the other members of equal-size
/// groups; normalized by `N - 1`.
pub fn kramer_scores(c: &Collection) -> TraitScoreTable {
    let n = c.len();
    let columns = group_sizes(c)
        .into_iter()
        .map(|sizes| {
            // histogram of group sizes over tokens
            let mut tokens_with_size: HashMap<usize, usize> = HashMap::new();
            for &s in &sizes {
                *tokens_with_size.entry(s).or_default() += 1;
            }
            let mut distinct: Vec<usize> = tokens_with_size.keys().copied().collect();
            distinct.sort_unstable();
            // tokens in strictly larger groups, per size
            let mut larger: HashMap<usize, usize> = HashMap::new();
            let mut acc = 0;
            for &s in distinct.iter().rev() {
                larger.insert(s, acc);
                acc += tokens_with_size[&s];
            }
            sizes
                .iter()
                .map(|s| {
                    let ties = tokens_with_size[s] - 1;
                    (larger[s] as f64 + 0.5 * ties as f64) / (n - 1) as f64
                })
                .collect()
        })
        .collect();
    TraitScoreTable { column_names: c.trait_names.iter().map(|t| format!("kr:{t}")).collect(), columns }
}

/// Per-trait information `-ln P_t(x)` for every token.
fn information_columns(c: &Collection) -> Vec<Vec<f64>> {
    let n = c.len() as f64;
    group_sizes(c)
        .into_iter()
        .map(|g| g.into_iter().map(|s| -(s as f64 / n).ln()).collect())
        .collect()
}

/// 1 for tokens whose whole trait vector occurs once in the collection.
fn uniqueness(c: &Collection) -> Vec<f64> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    for tok in &c.tokens {
        *counts.entry(tok.traits.as_slice()).or_default() += 1;
    }
    c.tokens.iter().map(|tok| if counts[tok.traits.as_slice()] == 1 { 1.0 } else { 0.0 }).collect()
}

/// OpenRarity split into blocks: per-trait information normalized by the
/// collection's mean total information, plus the uniqueness bonus column.
/// Row sums equal [`open_rarity`] whenever the mean information is positive.
pub fn open_rarity_table(c: &Collection) -> TraitScoreTable {
    let info = information_columns(c);
    let n = c.len();
    let mean_info = info.iter().map(|col| col.iter().sum::<f64>()).sum::<f64>() / n as f64;
    let mut column_names: Vec<String> = c.trait_names.iter().map(|t| format!("or:{t}")).collect();
    column_names.push("or:unique".into());
    if mean_info <= 0.0 {
        let mut columns = vec![vec![0.0; n]; c.trait_count() + 1];
        columns[0] = vec![1.0; n];
        return TraitScoreTable { column_names, columns };
    }
    let mut columns: Vec<Vec<f64>> =
        info.into_iter().map(|col| col.into_iter().map(|v| v / mean_info).collect()).collect();
    let bonus = (c.trait_count() + 1) as f64 * (n as f64).ln() / mean_info;
    columns.push(uniqueness(c).into_iter().map(|u| u * bonus).collect());
    TraitScoreTable { column_names, columns }
}

/// Shannon information over the collection mean, plus
/// `(T + 1) ln N / mean I` for tokens with a unique trait vector.
pub fn open_rarity(c: &Collection) -> RarityVector {
    RarityVector::new(MeterKind::OpenRarity.code(), open_rarity_table(c).row_sums())
}

/// Summed Jaccard similarity of each token's `(trait, value)` set to every
/// token, min-max mapped onto `[0, 100]`. With `invert`, returns
/// `100 - score` so that atypical tokens rank high.
pub fn nftgo(c: &Collection, invert: bool) -> RarityVector {
    let t = c.trait_count();
    let tokens = &c.tokens;
    let sums: Vec<f64> = tokens
        .par_iter()
        .map(|a| {
            tokens
                .iter()
                .map(|b| {
                    let shared = a.traits.iter().zip(&b.traits).filter(|(x, y)| x == y).count();
                    // both sets have exactly T elements
                    shared as f64 / (2 * t - shared) as f64
                })
                .sum()
        })
        .collect();
    let (lo, hi) = sums.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let scores = if hi > lo {
        sums.iter()
            .map(|&s| {
                let v = (100.0 * ((s - lo) / (hi - lo))).clamp(0.0, 100.0);
                if invert { 100.0 - v } else { v }
            })
            .collect()
    } else {
        vec![0.0; sums.len()]
    };
    RarityVector::new(MeterKind::NftGo.code(), scores)
}

/// Building blocks of the ROAR ensemble: every Rarity.tools, KRAMER and
/// OpenRarity column plus the NFTGo score.
pub fn roar_blocks(c: &Collection) -> TraitScoreTable {
    let go = nftgo(c, false);
    let go_table = TraitScoreTable { column_names: vec!["go".into()], columns: vec![go.scores] };
    TraitScoreTable::hstack(&[&rarity_tools_table(c), &kramer_scores(c), &open_rarity_table(c), &go_table])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub column_names: Vec<String>,
    pub coefficients: Vec<f64>,
    /// `F` of the combined, scale-adjusted vector on the fitting matrix.
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleParams {
    pub starts: usize,
    pub max_sweeps: usize,
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for EnsembleParams {
    fn default() -> Self {
        Self { starts: 8, max_sweeps: 100, rel_tol: 1e-6, seed: 0x5eed }
    }
}

pub fn fit_ensemble(blocks: &TraitScoreTable, m: &DissimMatrix) -> Result<(EnsembleWeights, RarityVector)> {
    fit_ensemble_with(blocks, m, &EnsembleParams::default())
}

/// Non-negative coefficients minimizing `F` of the combined blocks.
///
/// Each block is rescaled to unit range, then projected coordinate descent
/// runs from several seeded starts on the scale-free objective
/// `min_α F(α Σ c_t b_t)`. The returned coefficients include that optimal
/// `α`, so the returned vector is exactly `Σ coef_t · block_t`.
pub fn fit_ensemble_with(
    blocks: &TraitScoreTable,
    m: &DissimMatrix,
    params: &EnsembleParams,
) -> Result<(EnsembleWeights, RarityVector)> {
    if blocks.rows() != m.n() {
        return Err(Error::DimensionMismatch { expected: m.n(), got: blocks.rows() });
    }
    let pairs: Vec<WeightedPair> = m.pairs().collect();
    if pairs.is_empty() {
        return Err(Error::NoWeights);
    }
    let ranges: Vec<f64> = blocks
        .columns
        .iter()
        .map(|col| {
            let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            if hi > lo { hi - lo } else { 0.0 }
        })
        .collect();
    if blocks.columns.iter().all(|col| col.iter().all(|&v| v == 0.0)) {
        return Err(Error::ZeroBlocks);
    }
    let active: Vec<usize> = (0..blocks.width()).filter(|&t| ranges[t] > 0.0).collect();
    let n = m.n();
    let unit: Vec<Vec<f64>> = blocks
        .columns
        .iter()
        .zip(&ranges)
        .map(|(col, &r)| if r > 0.0 { col.iter().map(|v| v / r).collect() } else { vec![0.0; n] })
        .collect();

    // per-pair signed differences of every unit column
    let col_diffs: Vec<Vec<f64>> =
        unit.iter().map(|col| pairs.iter().map(|p| col[p.i] - col[p.j]).collect()).collect();
    let xx: f64 = pairs.iter().map(|p| p.weight * p.dissim * p.dissim).sum();
    let objective = |diff: &[f64]| -> f64 {
        let mut mom = PairMoments::default();
        for (p, &d) in pairs.iter().zip(diff) {
            mom.add(p.weight, d.abs(), p.dissim);
        }
        mom.scale_free_f2()
    };

    let descend = |start: Vec<f64>| -> (f64, Vec<f64>) {
        let mut coef = start;
        let mut diff = vec![0.0; pairs.len()];
        for &t in &active {
            for (d, q) in diff.iter_mut().zip(&col_diffs[t]) {
                *d += coef[t] * q;
            }
        }
        let mut current = objective(&diff);
        let mut trial = vec![0.0; pairs.len()];
        for _ in 0..params.max_sweeps {
            let before = current;
            for &t in &active {
                let Some(step) = exact_line_search(&pairs, &diff, &col_diffs[t], -coef[t], xx) else { continue };
                for ((out, d), q) in trial.iter_mut().zip(&diff).zip(&col_diffs[t]) {
                    *out = d + step * q;
                }
                let val = objective(&trial);
                if val < current {
                    std::mem::swap(&mut diff, &mut trial);
                    coef[t] = (coef[t] + step).max(0.0);
                    current = val;
                }
            }
            if !(before - current > params.rel_tol * before.abs().max(f64::MIN_POSITIVE)) {
                break;
            }
        }
        (current, coef)
    };

    let starts: Vec<Vec<f64>> = (0..params.starts.max(1))
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(k as u64));
            (0..blocks.width())
                .map(|t| {
                    if !active.contains(&t) {
                        0.0
                    } else if k == 0 {
                        1.0
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect()
        })
        .collect();

    let results: Vec<(f64, Vec<f64>)> = starts.into_par_iter().map(descend).collect();
    // first start wins ties
    let (_, best) = results
        .into_iter()
        .reduce(|a, b| if b.0 < a.0 { b } else { a })
        .expect("at least one start");

    let mut combined = vec![0.0; n];
    for &t in &active {
        for (c, v) in combined.iter_mut().zip(&unit[t]) {
            *c += best[t] * v;
        }
    }
    let fit = optimal_scale(&combined, m)?;
    let coefficients: Vec<f64> = best
        .iter()
        .zip(&ranges)
        .map(|(&c, &r)| if r > 0.0 { fit.alpha * c / r } else { 0.0 })
        .collect();
    let mut scores = vec![0.0; n];
    for (col, &c) in blocks.columns.iter().zip(&coefficients) {
        for (s, v) in scores.iter_mut().zip(col) {
            *s += c * v;
        }
    }
    let f = crate::eval::measure_f(&scores, m).map(|r| r.f_value).unwrap_or(f64::INFINITY);
    Ok((
        EnsembleWeights { column_names: blocks.column_names.clone(), coefficients, objective: f },
        RarityVector::new("ensemble", scores),
    ))
}

/// Exact minimizer over `t >= lo` of the scale-free objective along one
/// coordinate, where pair differences move as `p + t q`.
///
/// `Σ w d²` is a quadratic in `t` and `Σ w d δ` is piecewise linear with
/// kinks at `-p/q`, so on each piece the ratio `(Σ w d δ)² / Σ w d²` has a
/// single interior stationary point in closed form. Returns `None` when no
/// finite candidate improves on `t = 0`.
fn exact_line_search(pairs: &[WeightedPair], p: &[f64], q: &[f64], lo: f64, xx: f64) -> Option<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    let mut a_lo = 0.0;
    let mut slope = 0.0;
    let mut kinks: Vec<(f64, f64)> = Vec::new();
    for ((pair, &pk), &qk) in pairs.iter().zip(p).zip(q) {
        let w = pair.weight;
        b0 += w * pk * pk;
        b1 += w * pk * qk;
        b2 += w * qk * qk;
        let wd = w * pair.dissim;
        let at = pk + lo * qk;
        a_lo += wd * at.abs();
        if qk == 0.0 || wd == 0.0 {
            continue;
        }
        if at != 0.0 {
            slope += wd * qk * at.signum();
            if at * qk < 0.0 {
                kinks.push((-pk / qk, 2.0 * wd * qk.abs()));
            }
        } else {
            slope += wd * qk.abs();
        }
    }
    if b2 <= 0.0 {
        return None;
    }
    kinks.sort_by(|a, b| a.0.total_cmp(&b.0));
    let value = |t: f64, a: f64| -> f64 {
        let b = b0 + 2.0 * b1 * t + b2 * t * t;
        if b <= 0.0 || xx <= 0.0 {
            return f64::NEG_INFINITY;
        }
        a.max(0.0) * a.max(0.0) / (b * xx)
    };
    let mut best_t = 0.0;
    let mut best_v = {
        let a0: f64 = pairs.iter().zip(p).map(|(pair, pk)| pair.weight * pair.dissim * pk.abs()).sum();
        value(0.0, a0)
    };
    let mut consider = |t: f64, a: f64| {
        let v = value(t, a);
        if v > best_v {
            best_v = v;
            best_t = t;
        }
    };
    let (mut start, mut a_start) = (lo, a_lo);
    let mut idx = 0;
    loop {
        while idx < kinks.len() && kinks[idx].0 <= start {
            slope += kinks[idx].1;
            idx += 1;
        }
        let end = kinks.get(idx).map_or(f64::INFINITY, |k| k.0);
        consider(start, a_start);
        // A = a0 + a1 t on this piece
        let a1 = slope;
        let a0 = a_start - a1 * start;
        let den = a1 * b1 - a0 * b2;
        if den != 0.0 {
            let t = (a0 * b1 - a1 * b0) / den;
            if t > start && t < end {
                consider(t, a0 + a1 * t);
            }
        }
        if !end.is_finite() {
            break;
        }
        a_start = a0 + a1 * end;
        start = end;
    }
    (best_t != 0.0).then_some(best_t)
}

/// KRAMER: tournament columns combined with coefficients fitted on `m`.
pub fn kramer(c: &Collection, m: &DissimMatrix) -> Result<(EnsembleWeights, RarityVector)> {
    let (w, mut r) = fit_ensemble(&kramer_scores(c), m)?;
    r.meter_name = MeterKind::Kramer.code().into();
    Ok((w, r))
}

/// ROAR: the non-negative ensemble over [`roar_blocks`] fitted on `m`.
pub fn roar(c: &Collection, m: &DissimMatrix) -> Result<(EnsembleWeights, RarityVector)> {
    let (w, mut r) = fit_ensemble(&roar_blocks(c), m)?;
    r.meter_name = MeterKind::Roar.code().into();
    Ok((w, r))
}

/// Evaluates an interpretable meter. KRAMER needs a matrix to fit on.
pub fn interpretable_meter(kind: MeterKind, c: &Collection, m: Option<&DissimMatrix>) -> Result<RarityVector> {
    match kind {
        MeterKind::RarityTools => Ok(rarity_tools(c)),
        MeterKind::OpenRarity => Ok(open_rarity(c)),
        MeterKind::NftGo => Ok(nftgo(c, false)),
        MeterKind::Kramer | MeterKind::Roar => {
            let m = m.ok_or_else(|| Error::InvalidParam(format!("meter `{kind}` needs a dissimilarity matrix")))?;
            Ok(if kind == MeterKind::Kramer { kramer(c, m)?.1 } else { roar(c, m)?.1 })
        }
        MeterKind::Dit => Err(Error::InvalidParam("dit is not an interpretable meter".into())),
    }
}
