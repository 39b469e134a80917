//! The trained (non-interpretable) rarity meter.
//!
//! Training embeds the traded tokens on a line by minimizing stress against
//! the training dissimilarities, orients the line so rarity grows with
//! price, and shifts it so the smallest score is 1. Tokens are then scored
//! by kernel regression of the trained scores in the one-dimensional space
//! of an interpretable meter; the meter and the neighbourhood size `k` are
//! picked on a chronological hold-out of the training deals.

use serde::{Deserialize, Serialize};

use crate::collection::{split_trades, Collection, TradeLog};
use crate::dissim::{build_dissim, restrict_to_traded, DissimMatrix, IndexMap, TimeKernel};
use crate::error::{Error, Result};
use crate::eval::{measure_f_scaled, measure_with_alpha, optimal_scale};
use crate::meters::{interpretable_meter, MeterKind, RarityVector};
use crate::solver::{solve, SolverParams, SolverTrace};

/// Trained scores on the traded tokens of one matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedScores {
    /// Indexed like the restricted matrix; minimum is exactly 1.
    pub scores: Vec<f64>,
    pub index_map: IndexMap,
    pub sign: f64,
    pub shift: f64,
    pub trace: SolverTrace,
}

/// Orientation `s ∈ {+1, -1}` maximizing the deal-weighted covariance between
/// `s·x` of the traded token and its log price. Ties keep `+1`.
pub fn choose_sign(x: &[f64], map: &IndexMap, log: &TradeLog) -> f64 {
    let pts: Vec<(f64, f64)> = log
        .deals()
        .iter()
        .filter_map(|d| map.to_new(d.token_index).map(|k| (x[k], d.price.ln())))
        .collect();
    if pts.is_empty() {
        return 1.0;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = pts.iter().map(|(a, b)| (a - mx) * (b - my)).sum();
    if cov < 0.0 { -1.0 } else { 1.0 }
}

/// Applies the sign rule and shifts so that `min = 1`.
pub fn orient(x: &[f64], map: &IndexMap, log: &TradeLog) -> (Vec<f64>, f64, f64) {
    let sign = choose_sign(x, map, log);
    let min = x.iter().map(|v| sign * v).fold(f64::INFINITY, f64::min);
    let shift = 1.0 - min;
    (x.iter().map(|v| sign * v + shift).collect(), sign, shift)
}

/// Solves the restricted matrix and orients the result.
pub fn train(m: &DissimMatrix, map: &IndexMap, log_train: &TradeLog, params: &SolverParams) -> Result<TrainedScores> {
    if map.len() != m.n() {
        return Err(Error::DimensionMismatch { expected: m.n(), got: map.len() });
    }
    let (config, trace) = solve(m, params)?;
    let (scores, sign, shift) = orient(&config.x, map, log_train);
    Ok(TrainedScores { scores, index_map: map.clone(), sign, shift, trace })
}

/// Kernel regression of trained scores over the coordinate `R̃`.
///
/// Built once per `(trained scores, R̃)` and queried for every token and `k`.
pub struct Extender {
    /// `(R̃, R)` of trained tokens, sorted by `R̃`.
    points: Vec<(f64, f64)>,
    floor: f64,
}

/// Terms beyond this many bandwidths contribute below `e^-40` relative.
const KERNEL_REACH: f64 = 40.0;

impl Extender {
    pub fn new(trained: &[f64], trained_coord: &[f64]) -> Result<Self> {
        if trained.is_empty() {
            return Err(Error::TooFewTraded(0));
        }
        if trained.len() != trained_coord.len() {
            return Err(Error::DimensionMismatch { expected: trained.len(), got: trained_coord.len() });
        }
        let mut points: Vec<(f64, f64)> = trained_coord.iter().copied().zip(trained.iter().copied()).collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let range = points[points.len() - 1].0 - points[0].0;
        Ok(Self { points, floor: 1e-9 * (range + 1e-300) })
    }

    /// `R_k` at coordinate `q`.
    pub fn predict(&self, q: f64, k: usize) -> f64 {
        let pts = &self.points;
        let k = k.clamp(1, pts.len());
        let pos = pts.partition_point(|p| p.0 < q);
        // walk outwards to find the k-th nearest distance
        let (mut lo, mut hi) = (pos, pos);
        let mut kth = 0.0;
        for _ in 0..k {
            let dl = if lo > 0 { q - pts[lo - 1].0 } else { f64::INFINITY };
            let dr = if hi < pts.len() { pts[hi].0 - q } else { f64::INFINITY };
            if dl <= dr {
                kth = dl;
                lo -= 1;
            } else {
                kth = dr;
                hi += 1;
            }
        }
        if kth == 0.0 {
            let start = pts.partition_point(|p| p.0 < q);
            let end = pts.partition_point(|p| p.0 <= q);
            let tied = &pts[start..end];
            return tied.iter().map(|p| p.1).sum::<f64>() / tied.len() as f64;
        }
        let bw = kth.max(self.floor);
        let reach = KERNEL_REACH * bw;
        let mut num = 0.0;
        let mut den = 0.0;
        let mut add = |p: &(f64, f64)| {
            let w = (-(p.0 - q).abs() / bw).exp();
            num += w * p.1;
            den += w;
        };
        for p in pts[..pos].iter().rev().take_while(|p| q - p.0 <= reach) {
            add(p);
        }
        for p in pts[pos..].iter().take_while(|p| p.0 - q <= reach) {
            add(p);
        }
        num / den
    }
}

/// Scores every token of the collection. `baseline` is `R̃` on all `N`
/// tokens; `trained` is indexed by `map`.
pub fn extend(trained: &[f64], map: &IndexMap, baseline: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidParam("k must be at least 1".into()));
    }
    if baseline.len() != map.original_n() {
        return Err(Error::DimensionMismatch { expected: map.original_n(), got: baseline.len() });
    }
    let coord: Vec<f64> = map.kept().iter().map(|&old| baseline[old]).collect();
    let ext = Extender::new(trained, &coord)?;
    Ok(baseline.iter().map(|&q| ext.predict(q, k)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvGrid {
    pub meters: Vec<MeterKind>,
    pub ks: Vec<usize>,
    /// Share of the latest training deals held out for validation.
    pub validation_fraction: f64,
    /// Score with `α` fitted on the training matrix instead of the matrix
    /// being scored against.
    pub alpha_from_train: bool,
}

impl Default for CvGrid {
    fn default() -> Self {
        Self {
            meters: MeterKind::INTERPRETABLE.to_vec(),
            ks: (1..=25).collect(),
            validation_fraction: 0.3,
            alpha_from_train: false,
        }
    }
}

impl CvGrid {
    fn validate(&self) -> Result<()> {
        if self.meters.is_empty() || self.ks.is_empty() {
            return Err(Error::InvalidParam("grid needs at least one meter and one k".into()));
        }
        if let Some(m) = self.meters.iter().find(|m| !MeterKind::INTERPRETABLE.contains(m)) {
            return Err(Error::InvalidParam(format!("`{m}` cannot serve as the regression coordinate")));
        }
        if self.ks.contains(&0) {
            return Err(Error::InvalidParam("k must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::BadFraction(self.validation_fraction));
        }
        Ok(())
    }
}

/// Parses `1..25`, `1..=25`, `3` or `1,2,5`.
pub fn parse_k_range(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::InvalidParam(format!("bad k grid `{s}`"));
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        if a == 0 || b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|p| p.trim().parse::<usize>().map_err(|_| bad())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub meter: MeterKind,
    pub k: usize,
    /// `None` when the validation matrix could not score the cell.
    pub validation_f: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DitModel {
    pub trained: TrainedScores,
    pub chosen_meter: MeterKind,
    pub chosen_k: usize,
    pub cells: Vec<CvCell>,
    /// Final scores on every token of the collection.
    pub scores: RarityVector,
}

impl DitModel {
    pub fn sign(&self) -> f64 {
        self.trained.sign
    }

    pub fn shift(&self) -> f64 {
        self.trained.shift
    }
}

fn score_against(scores: &[f64], target: &DissimMatrix, fit_on: &DissimMatrix, alpha_from_train: bool) -> Option<f64> {
    let res = if alpha_from_train {
        let fit = optimal_scale(scores, fit_on).ok()?;
        measure_with_alpha(scores, target, fit.alpha)
    } else {
        measure_f_scaled(scores, target)
    };
    res.ok().map(|r| r.f_value).filter(|f| f.is_finite())
}

fn train_on(c: &Collection, log: &TradeLog, kernel: &TimeKernel, params: &SolverParams) -> Result<(DissimMatrix, TrainedScores)> {
    let full = build_dissim(log, c.len(), kernel)?;
    let (restricted, map) = restrict_to_traded(&full)?;
    let trained = train(&restricted, &map, log, params)?;
    Ok((full, trained))
}

/// Grid search over `(R̃, k)` on a chronological hold-out of `train_log`,
/// then retraining on all of `train_log` with the winner.
///
/// The embedding does not depend on the grid cell, so the inner model is
/// trained once and every cell only re-runs the extension.
pub fn cross_validate(
    c: &Collection,
    train_log: &TradeLog,
    grid: &CvGrid,
    kernel: &TimeKernel,
    params: &SolverParams,
) -> Result<DitModel> {
    grid.validate()?;
    if train_log.is_empty() {
        return Err(Error::EmptyLog);
    }
    let mut cells = Vec::new();
    let (meter, k) = if grid.meters.len() == 1 && grid.ks.len() == 1 {
        (grid.meters[0], grid.ks[0])
    } else {
        let inner = split_trades(train_log, 1.0 - grid.validation_fraction)?;
        let (inner_full, inner_model) = train_on(c, &inner.train, kernel, params)?;
        let val = if inner.test.is_empty() {
            return Err(Error::GridExhausted);
        } else {
            build_dissim(&inner.test, c.len(), kernel)?
        };
        if val.is_unweighted() {
            return Err(Error::GridExhausted);
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for (mi, &meter) in grid.meters.iter().enumerate() {
            let baseline = interpretable_meter(meter, c, Some(&inner_full))?;
            let coord: Vec<f64> = inner_model.index_map.kept().iter().map(|&o| baseline.scores[o]).collect();
            let ext = Extender::new(&inner_model.scores, &coord)?;
            for &k in &grid.ks {
                let scores: Vec<f64> = baseline.scores.iter().map(|&q| ext.predict(q, k)).collect();
                let f = score_against(&scores, &val, &inner_full, grid.alpha_from_train);
                cells.push(CvCell { meter, k, validation_f: f });
                if let Some(f) = f {
                    let better = match best {
                        None => true,
                        Some((bf, bk, bm)) => (f, k, mi) < (bf, bk, bm),
                    };
                    if better {
                        best = Some((f, k, mi));
                    }
                }
            }
        }
        let (_, k, mi) = best.ok_or(Error::GridExhausted)?;
        (grid.meters[mi], k)
    };

    let (full, trained) = train_on(c, train_log, kernel, params)?;
    let baseline = interpretable_meter(meter, c, Some(&full))?;
    let scores = extend(&trained.scores, &trained.index_map, &baseline.scores, k)?;
    Ok(DitModel {
        trained,
        chosen_meter: meter,
        chosen_k: k,
        cells,
        scores: RarityVector::new(MeterKind::Dit.code(), scores),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collection::Deal;

    /// Direct evaluation of the regression formula over every trained token.
    fn oracle(trained: &[f64], coord: &[f64], q: f64, k: usize) -> f64 {
        let mut d: Vec<f64> = coord.iter().map(|c| (c - q).abs()).collect();
        d.sort_by(f64::total_cmp);
        let eps = d[k - 1];
        let (mut num, mut den) = (0.0, 0.0);
        for (r, c) in trained.iter().zip(coord) {
            let w = (-(c - q).abs() / eps).exp();
            num += w * r;
            den += w;
        }
        num / den
    }

    #[test]
    fn worked_extension() {
        let ext = Extender::new(&[10.0, 20.0], &[0.0, 1.0]).unwrap();
        let e = (-1.0f64).exp();
        let expected = (10.0 + 20.0 * e) / (1.0 + e);
        assert!((ext.predict(0.0, 2) - expected).abs() < 1e-12);
        assert!((expected - 12.689).abs() < 1e-3);
    }

    #[test]
    fn concentrated_kernel_returns_neighbour() {
        let ext = Extender::new(&[3.0, 50.0, 70.0], &[0.0, 100.0, 200.0]).unwrap();
        assert!((ext.predict(0.0, 1) - 3.0).abs() < 1e-9);
        assert!((ext.predict(100.0, 1) - 50.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_distances_give_mean() {
        // query equidistant from both trained points
        let ext = Extender::new(&[4.0, 8.0], &[-1.0, 1.0]).unwrap();
        assert!((ext.predict(0.0, 2) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn zero_kth_distance_averages_ties() {
        let ext = Extender::new(&[2.0, 4.0, 100.0], &[1.0, 1.0, 5.0]).unwrap();
        assert_eq!(ext.predict(1.0, 2), 3.0);
        // k beyond the ties uses the kernel
        assert!(ext.predict(1.0, 3) > 3.0);
    }

    #[test]
    fn matches_direct_formula() {
        let coord = [0.3, 1.7, 1.9, 4.0, 4.4, 7.5, 9.0];
        let trained = [1.0, 2.5, 2.0, 6.0, 5.0, 9.0, 12.0];
        let ext = Extender::new(&trained, &coord).unwrap();
        for q in [-2.0, 0.0, 1.8, 3.3, 7.0, 11.0] {
            for k in 1..=7 {
                let a = ext.predict(q, k);
                let b = oracle(&trained, &coord, q, k);
                assert!((a - b).abs() <= 1e-12 * b.abs(), "q={q} k={k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn extension_is_shift_invariant_and_convex() {
        let map = IndexMap::identity(4);
        let trained = [1.0, 3.0, 2.0, 8.0];
        let base = [0.5, 2.0, 1.0, 6.0];
        let shifted: Vec<_> = base.iter().map(|v| v + 123.0).collect();
        for k in 1..=4 {
            let a = extend(&trained, &map, &base, k).unwrap();
            let b = extend(&trained, &map, &shifted, k).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9);
                assert!(*x >= 1.0 - 1e-12 && *x <= 8.0 + 1e-12);
            }
        }
        // k = 1 at a trained position gives back its score
        assert_eq!(extend(&trained, &map, &base, 1).unwrap(), trained.to_vec());
    }

    #[test]
    fn k_zero_rejected() {
        assert!(extend(&[1.0], &IndexMap::identity(1), &[0.0], 0).is_err());
    }

    #[test]
    fn k_ranges_parse() {
        assert_eq!(parse_k_range("1..25").unwrap(), (1..=25).collect::<Vec<_>>());
        assert_eq!(parse_k_range("2..=4").unwrap(), vec![2, 3, 4]);
        assert_eq!(parse_k_range("1,2,5").unwrap(), vec![1, 2, 5]);
        assert!(parse_k_range("0..3").is_err());
        assert!(parse_k_range("x").is_err());
    }

    fn log_of(prices: &[(usize, f64)]) -> TradeLog {
        TradeLog::new(
            prices.iter().enumerate().map(|(t, &(i, p))| Deal { timestamp: t as i64, token_index: i, price: p }).collect(),
        )
    }

    #[test]
    fn sign_follows_prices() {
        let map = IndexMap::identity(3);
        let log = log_of(&[(0, 1.0), (1, 2.0), (2, 4.0), (0, 1.1)]);
        assert_eq!(choose_sign(&[0.0, 1.0, 2.0], &map, &log), 1.0);
        assert_eq!(choose_sign(&[2.0, 1.0, 0.0], &map, &log), -1.0);
        let (r, _, _) = orient(&[2.0, 1.0, 0.0], &map, &log);
        assert_eq!(r, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn negated_solution_orients_identically() {
        let map = IndexMap::identity(3);
        let log = log_of(&[(0, 1.0), (1, 3.0), (2, 2.0)]);
        let x = [0.3, -1.2, 4.4];
        let neg: Vec<_> = x.iter().map(|v| -v).collect();
        let (a, _, _) = orient(&x, &map, &log);
        let (b, _, _) = orient(&neg, &map, &log);
        assert_eq!(a, b);
        assert_eq!(a.iter().cloned().fold(f64::INFINITY, f64::min), 1.0);
    }

    #[test]
    fn grid_validation() {
        let bad = [
            CvGrid { meters: vec![], ..Default::default() },
            CvGrid { ks: vec![0], ..Default::default() },
            CvGrid { meters: vec![MeterKind::Dit], ..Default::default() },
            CvGrid { validation_fraction: 1.0, ..Default::default() },
        ];
        for g in bad {
            assert!(g.validate().is_err());
        }
        assert_eq!(CvGrid::default().ks, (1..=25).collect::<Vec<_>>());
    }

    #[test]
    fn cross_validation_picks_grid_minimum() {
        let s = crate::synth::generate(&crate::synth::SynthParams { n_tokens: 40, n_trades: 800, seed: 3, ..Default::default() })
            .unwrap();
        let grid = CvGrid { meters: vec![MeterKind::RarityTools, MeterKind::OpenRarity], ks: vec![1, 3, 500], ..Default::default() };
        let model = cross_validate(&s.collection, &s.log, &grid, &TimeKernel::default(), &SolverParams::default()).unwrap();
        assert_eq!(model.cells.len(), 6);
        let best = model
            .cells
            .iter()
            .filter_map(|c| c.validation_f.map(|f| (f, c.k, c.meter)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap();
        assert_eq!((model.chosen_k, model.chosen_meter), (best.1, best.2));
        assert!((model.trained.scores.iter().copied().fold(f64::INFINITY, f64::min) - 1.0).abs() < 1e-12);
        assert!(model.scores.scores.iter().all(|v| v.is_finite() && *v >= 1.0 - 1e-12));
    }

    #[test]
    fn single_cell_grid_skips_validation() {
        let s = crate::synth::generate(&crate::synth::SynthParams { n_tokens: 20, n_trades: 300, seed: 4, ..Default::default() })
            .unwrap();
        let grid = CvGrid { meters: vec![MeterKind::Kramer], ks: vec![2], ..Default::default() };
        let model = cross_validate(&s.collection, &s.log, &grid, &TimeKernel::default(), &SolverParams::default()).unwrap();
        assert!(model.cells.is_empty());
        assert_eq!((model.chosen_meter, model.chosen_k), (MeterKind::Kramer, 2));
    }
}
