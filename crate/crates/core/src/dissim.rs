//! Weighted token dissimilarities aggregated from close-in-time deal pairs.
//!
//! Every unordered pair of deals on two different tokens whose timestamps
//! are within the kernel cutoff contributes its kernel weight `k` to
//! `W[i][j]` and `k * |ln(p1 / p2)|` to the numerator of `Δ[i][j]`.
//!
//! # Binary layout
//!
//! All integers and floats are little endian.
//!
//! | offset      | size      | content                        |
//! |-------------|-----------|--------------------------------|
//! | 0           | 8         | magic `b"DITMTX\0\0"`          |
//! | 8           | 4         | format version (`u32`, 1)      |
//! | 12          | 8         | `n` (`u64`)                    |
//! | 20          | 8·n·n     | `W`, row-major `f64`           |
//! | 20 + 8·n·n  | 8·n·n     | `Δ`, row-major `f64`           |
//!
//! A JSON sidecar with the same stem carries the kernel parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::collection::TradeLog;
use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 8] = b"DITMTX\0\0";
pub const MATRIX_VERSION: u32 = 1;

pub const DEFAULT_HALF_LIFE_SECS: f64 = 24.0 * 3600.0;
pub const DEFAULT_CUTOFF_SECS: f64 = 7.0 * 24.0 * 3600.0;

/// Exponential time-decay kernel with a hard cutoff.
///
/// `k(t1, t2) = 2^(-|t1 - t2| / half_life)` for `|t1 - t2| <= cutoff`, else 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeKernel {
    half_life: f64,
    cutoff: f64,
}

impl TimeKernel {
    pub fn new(half_life_secs: f64, cutoff_secs: f64) -> Result<Self> {
        if !(half_life_secs > 0.0 && half_life_secs.is_finite()) {
            return Err(Error::InvalidParam(format!("half-life must be positive, got {half_life_secs}")));
        }
        if !(cutoff_secs >= half_life_secs) {
            return Err(Error::InvalidParam(format!(
                "cutoff {cutoff_secs} must be at least the half-life {half_life_secs}"
            )));
        }
        Ok(Self { half_life: half_life_secs, cutoff: cutoff_secs })
    }

    pub fn half_life(&self) -> f64 {
        self.half_life
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    #[inline]
    pub fn weight(&self, t1: i64, t2: i64) -> f64 {
        let dt = (t1 - t2).unsigned_abs() as f64;
        if dt > self.cutoff {
            0.0
        } else {
            (-dt * std::f64::consts::LN_2 / self.half_life).exp()
        }
    }
}

impl Default for TimeKernel {
    fn default() -> Self {
        Self { half_life: DEFAULT_HALF_LIFE_SECS, cutoff: DEFAULT_CUTOFF_SECS }
    }
}

/// Paired dense symmetric `n × n` weight and dissimilarity matrices with
/// zero diagonals. `Δ[i][j]` is zero wherever `W[i][j]` is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DissimMatrix {
    n: usize,
    weights: Vec<f64>,
    dissims: Vec<f64>,
}

impl DissimMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, weights: vec![0.0; n * n], dissims: vec![0.0; n * n] }
    }

    /// Builds from full row-major matrices, checking symmetry and the
    /// diagonal / mask invariants.
    pub fn from_dense(n: usize, weights: Vec<f64>, dissims: Vec<f64>) -> Result<Self> {
        if weights.len() != n * n || dissims.len() != n * n {
            return Err(Error::DimensionMismatch { expected: n * n, got: weights.len().min(dissims.len()) });
        }
        for i in 0..n {
            if weights[i * n + i] != 0.0 || dissims[i * n + i] != 0.0 {
                return Err(Error::InvalidParam(format!("non-zero diagonal at {i}")));
            }
            for j in 0..n {
                let (w, d) = (weights[i * n + j], dissims[i * n + j]);
                if !(w >= 0.0 && w.is_finite() && d >= 0.0 && d.is_finite()) {
                    return Err(Error::InvalidParam(format!("entry ({i}, {j}) is negative or not finite")));
                }
                if w != weights[j * n + i] || d != dissims[j * n + i] {
                    return Err(Error::InvalidParam(format!("asymmetric entry ({i}, {j})")));
                }
                if w == 0.0 && d != 0.0 {
                    return Err(Error::InvalidParam(format!("dissimilarity without weight at ({i}, {j})")));
                }
            }
        }
        Ok(Self { n, weights, dissims })
    }

    /// Sets the symmetric pair `(i, j)`. Off-diagonal only.
    pub fn set(&mut self, i: usize, j: usize, weight: f64, dissim: f64) {
        assert!(i != j, "diagonal entries are fixed at zero");
        let dissim = if weight > 0.0 { dissim } else { 0.0 };
        let n = self.n;
        self.weights[i * n + j] = weight;
        self.weights[j * n + i] = weight;
        self.dissims[i * n + j] = dissim;
        self.dissims[j * n + i] = dissim;
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    #[inline]
    pub fn dissim(&self, i: usize, j: usize) -> f64 {
        self.dissims[i * self.n + j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dissims(&self) -> &[f64] {
        &self.dissims
    }

    pub fn row_weight_sums(&self) -> Vec<f64> {
        self.weights.chunks_exact(self.n.max(1)).map(|r| r.iter().sum()).collect()
    }

    /// Whether no off-diagonal weight is positive.
    pub fn is_unweighted(&self) -> bool {
        self.weights.iter().all(|&w| w == 0.0)
    }

    /// Upper-triangle pairs `(i, j, w, δ)` with `w > 0`.
    pub fn pairs(&self) -> impl Iterator<Item = WeightedPair> + '_ {
        (0..self.n).flat_map(move |i| {
            (i + 1..self.n).filter_map(move |j| {
                let w = self.weight(i, j);
                (w > 0.0).then(|| WeightedPair { i, j, weight: w, dissim: self.dissim(i, j) })
            })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedPair {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
    pub dissim: f64,
}

/// Aggregates all cross-token deal pairs within the kernel cutoff.
///
/// Runs a sliding window over the time-sorted log, so cost is linear in the
/// number of deal pairs inside the window rather than quadratic in the log.
pub fn build_dissim(log: &TradeLog, n: usize, kernel: &TimeKernel) -> Result<DissimMatrix> {
    if n < 2 {
        return Err(Error::TooFewTokens(n));
    }
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    if log.index_bound() > n {
        return Err(Error::DimensionMismatch { expected: n, got: log.index_bound() });
    }
    let deals = log.deals();
    let log_prices: Vec<f64> = deals.iter().map(|d| d.price.ln()).collect();
    let mut m = DissimMatrix::zeros(n);
    // accumulate into the upper triangle, mirror afterwards
    for a in 0..deals.len() {
        let da = deals[a];
        for b in a + 1..deals.len() {
            let db = deals[b];
            if (db.timestamp - da.timestamp) as f64 > kernel.cutoff {
                break;
            }
            if da.token_index == db.token_index {
                continue;
            }
            let k = kernel.weight(da.timestamp, db.timestamp);
            let (i, j) = if da.token_index < db.token_index {
                (da.token_index, db.token_index)
            } else {
                (db.token_index, da.token_index)
            };
            m.weights[i * n + j] += k;
            m.dissims[i * n + j] += k * (log_prices[a] - log_prices[b]).abs();
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            let w = m.weights[i * n + j];
            let d = if w > 0.0 { m.dissims[i * n + j] / w } else { 0.0 };
            m.dissims[i * n + j] = d;
            m.weights[j * n + i] = w;
            m.dissims[j * n + i] = d;
        }
    }
    if m.is_unweighted() {
        log::warn!("trade log yields no cross-token deal pairs within the cutoff");
    }
    Ok(m)
}

/// Mapping from the rows kept by [`restrict_to_traded`] back to the
/// original token indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMap {
    /// `kept[new] = old`, ascending.
    kept: Vec<usize>,
    original_n: usize,
}

impl IndexMap {
    pub fn identity(n: usize) -> Self {
        Self { kept: (0..n).collect(), original_n: n }
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn original_n(&self) -> usize {
        self.original_n
    }

    pub fn to_old(&self, new: usize) -> usize {
        self.kept[new]
    }

    pub fn to_new(&self, old: usize) -> Option<usize> {
        self.kept.binary_search(&old).ok()
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }
}

/// Drops tokens whose weight row sums to zero.
pub fn restrict_to_traded(m: &DissimMatrix) -> Result<(DissimMatrix, IndexMap)> {
    let kept: Vec<usize> = m
        .row_weight_sums()
        .iter()
        .enumerate()
        .filter_map(|(i, &s)| (s > 0.0).then_some(i))
        .collect();
    if kept.len() < 2 {
        return Err(Error::TooFewTraded(kept.len()));
    }
    let k = kept.len();
    let mut out = DissimMatrix::zeros(k);
    for (a, &i) in kept.iter().enumerate() {
        for (b, &j) in kept.iter().enumerate() {
            out.weights[a * k + b] = m.weight(i, j);
            out.dissims[a * k + b] = m.dissim(i, j);
        }
    }
    Ok((out, IndexMap { kept, original_n: m.n }))
}

/// Sidecar describing how a persisted matrix was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixMeta {
    pub format_version: u32,
    pub n: usize,
    pub half_life_secs: f64,
    pub cutoff_secs: f64,
    pub deals: usize,
    pub weighted_pairs: usize,
}

impl MatrixMeta {
    pub fn describe(m: &DissimMatrix, kernel: &TimeKernel, deals: usize) -> Self {
        Self {
            format_version: MATRIX_VERSION,
            n: m.n,
            half_life_secs: kernel.half_life,
            cutoff_secs: kernel.cutoff,
            deals,
            weighted_pairs: m.pairs().count(),
        }
    }
}

pub fn sidecar_path(matrix_path: &Path) -> PathBuf {
    matrix_path.with_extension("json")
}

pub fn write_matrix<W: Write>(m: &DissimMatrix, mut w: W) -> Result<()> {
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&MATRIX_VERSION.to_le_bytes())?;
    w.write_all(&(m.n as u64).to_le_bytes())?;
    for v in m.weights.iter().chain(&m.dissims) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix<R: Read>(mut r: R) -> Result<DissimMatrix> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::MatrixFormat("truncated header".into()))?;
    if &magic != MATRIX_MAGIC {
        return Err(Error::MatrixFormat("bad magic bytes".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| Error::MatrixFormat("truncated header".into()))?;
    let version = u32::from_le_bytes(b4);
    if version != MATRIX_VERSION {
        return Err(Error::MatrixFormat(format!("unsupported version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|_| Error::MatrixFormat("truncated header".into()))?;
    let n = u64::from_le_bytes(b8) as usize;
    let len = n.checked_mul(n).ok_or_else(|| Error::MatrixFormat("n overflows".into()))?;
    let mut read_block = || -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut b8).map_err(|_| Error::MatrixFormat("truncated body".into()))?;
            out.push(f64::from_le_bytes(b8));
        }
        Ok(out)
    };
    let weights = read_block()?;
    let dissims = read_block()?;
    DissimMatrix::from_dense(n, weights, dissims)
}

/// Writes `path` in the binary layout and `path.json` as the sidecar.
pub fn save_matrix(m: &DissimMatrix, meta: &MatrixMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_matrix(m, BufWriter::new(File::create(path)?))?;
    let side = BufWriter::new(File::create(sidecar_path(path))?);
    serde_json::to_writer_pretty(side, meta)?;
    Ok(())
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DissimMatrix> {
    read_matrix(BufReader::new(File::open(path)?))
}

pub fn load_matrix_meta(path: impl AsRef<Path>) -> Result<MatrixMeta> {
    let f = File::open(sidecar_path(path.as_ref()))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

/// Debug export: one row `i,j,weight,dissim` per weighted upper-triangle pair.
pub fn write_matrix_csv<W: Write>(m: &DissimMatrix, w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["i", "j", "weight", "dissim"])?;
    for p in m.pairs() {
        w.write_record([p.i.to_string(), p.j.to_string(), p.weight.to_string(), p.dissim.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collection::Deal;
    use std::f64::consts::E;

    fn deal(t: i64, i: usize, p: f64) -> Deal {
        Deal { timestamp: t, token_index: i, price: p }
    }

    #[test]
    fn kernel_shape() {
        let k = TimeKernel::new(10.0, 40.0).unwrap();
        assert_eq!(k.weight(5, 5), 1.0);
        assert!((k.weight(0, 10) - 0.5).abs() < 1e-15);
        assert_eq!(k.weight(0, 10), k.weight(10, 0));
        assert!(k.weight(0, 40) > 0.0);
        assert_eq!(k.weight(0, 41), 0.0);
        assert!(TimeKernel::new(10.0, 5.0).is_err());
        assert!(TimeKernel::new(0.0, 5.0).is_err());
    }

    #[test]
    fn single_pair() {
        let log = TradeLog::new(vec![deal(0, 0, E), deal(0, 1, E.powi(3))]);
        let m = build_dissim(&log, 2, &TimeKernel::new(3600.0, 7200.0).unwrap()).unwrap();
        assert_eq!(m.weight(0, 1), 1.0);
        assert!((m.dissim(0, 1) - 2.0).abs() < 1e-12);
        assert_eq!(m.weight(0, 0), 0.0);
    }

    #[test]
    fn two_pairs_with_cross_terms() {
        let h = 100;
        let kernel = TimeKernel::new(h as f64, 10.0 * h as f64).unwrap();
        let log = TradeLog::new(vec![deal(0, 0, E), deal(0, 1, E.powi(3)), deal(h, 0, E), deal(h, 1, E.powi(7))]);
        let m = build_dissim(&log, 2, &kernel).unwrap();
        // same-time pairs: k=1 with |Δ| 2 and 6; cross pairs (0@0,1@h): k=.5, |1-7|=6; (1@0,0@h): k=.5, |3-1|=2
        let w = 1.0 + 1.0 + 0.5 + 0.5;
        let d = (2.0 + 6.0 + 0.5 * 6.0 + 0.5 * 2.0) / w;
        assert!((m.weight(0, 1) - w).abs() < 1e-12);
        assert!((m.dissim(0, 1) - d).abs() < 1e-12);
    }

    #[test]
    fn single_token_has_no_weights() {
        let log = TradeLog::new(vec![deal(0, 1, 1.0), deal(5, 1, 2.0)]);
        let m = build_dissim(&log, 3, &TimeKernel::default()).unwrap();
        assert!(m.is_unweighted());
    }

    #[test]
    fn out_of_range_token_rejected() {
        let log = TradeLog::new(vec![deal(0, 4, 1.0)]);
        assert!(build_dissim(&log, 3, &TimeKernel::default()).is_err());
    }

    #[test]
    fn restrict_compacts() {
        let mut m = DissimMatrix::zeros(5);
        m.set(0, 2, 1.0, 0.5);
        m.set(2, 4, 2.0, 1.5);
        let (r, map) = restrict_to_traded(&m).unwrap();
        assert_eq!(map.kept(), &[0, 2, 4]);
        assert_eq!(map.to_new(2), Some(1));
        assert_eq!(map.to_new(1), None);
        assert_eq!(r.weight(1, 2), 2.0);
        assert_eq!(r.dissim(0, 1), 0.5);
    }

    #[test]
    fn restrict_identity() {
        let mut m = DissimMatrix::zeros(3);
        m.set(0, 1, 1.0, 1.0);
        m.set(1, 2, 1.0, 1.0);
        let (r, map) = restrict_to_traded(&m).unwrap();
        assert_eq!(map, IndexMap::identity(3));
        assert_eq!(r, m);
    }

    #[test]
    fn restrict_degenerate() {
        let m = DissimMatrix::zeros(4);
        assert!(matches!(restrict_to_traded(&m), Err(Error::TooFewTraded(0))));
    }

    #[test]
    fn binary_round_trip_and_corruption() {
        let mut m = DissimMatrix::zeros(3);
        m.set(0, 1, 0.25, 1.0 / 3.0);
        m.set(1, 2, 7.0, 2.5);
        let mut buf = Vec::new();
        write_matrix(&m, &mut buf).unwrap();
        assert_eq!(buf.len(), 20 + 2 * 8 * 9);
        assert_eq!(read_matrix(buf.as_slice()).unwrap(), m);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_matrix(bad.as_slice()), Err(Error::MatrixFormat(_))));
        assert!(matches!(read_matrix(&buf[..buf.len() - 1]), Err(Error::MatrixFormat(_))));
    }

    #[test]
    fn csv_export_lists_weighted_pairs() {
        let mut m = DissimMatrix::zeros(3);
        m.set(0, 2, 1.0, 0.5);
        let mut buf = Vec::new();
        write_matrix_csv(&m, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "i,j,weight,dissim\n0,2,1,0.5\n");
    }
}
