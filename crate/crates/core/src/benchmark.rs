//! Batch comparison of rarity meters over many collections.
//!
//! Every collection is split chronologically; meters are fitted or trained
//! on the earlier deals and scored with `F` on the dissimilarities of the
//! later ones, each after its own optimal rescaling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collection::{load_collection, load_trades, split_trades, Collection, TradeLog, DEFAULT_SPLIT_FRACTION};
use crate::dissim::{build_dissim, DissimMatrix, TimeKernel};
use crate::dit::{cross_validate, CvCell, CvGrid};
use crate::error::{Error, Result};
use crate::eval::{measure_f_scaled, measure_with_alpha, optimal_scale, profile, Profile, ProfileTable};
use crate::meters::{self, EnsembleWeights, MeterKind, RarityVector};
use crate::solver::SolverParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub meters: Vec<MeterKind>,
    pub kernel: TimeKernel,
    pub solver: SolverParams,
    pub grid: CvGrid,
    pub split_fraction: f64,
    /// Invert NFTGo so that atypical tokens score high.
    pub invert_nftgo: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            meters: MeterKind::ALL.to_vec(),
            kernel: TimeKernel::default(),
            solver: SolverParams::default(),
            grid: CvGrid::default(),
            split_fraction: DEFAULT_SPLIT_FRACTION,
            invert_nftgo: false,
        }
    }
}

pub struct Dataset {
    pub collection: Collection,
    pub log: TradeLog,
}

/// Loads every subdirectory of `dir` holding `collection.json` and
/// `trades.csv`, in name order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<(String, Result<Dataset>)>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("collection.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs
        .into_iter()
        .map(|d| {
            let name = d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let data = load_collection(d.join("collection.json")).and_then(|collection| {
                let (log, _) = load_trades(d.join("trades.csv"), &collection)?;
                Ok(Dataset { collection, log })
            });
            (name, data)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeterOutcome {
    pub meter: MeterKind,
    /// Test `F` after rescaling; `+∞` for degenerate meters, `None` on error.
    pub test_f: Option<f64>,
    pub alpha: Option<f64>,
    pub degenerate: bool,
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<EnsembleWeights>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DitSelection {
    pub chosen_meter: MeterKind,
    pub chosen_k: usize,
    pub cells: Vec<CvCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionReport {
    pub name: String,
    pub n_tokens: usize,
    pub train_deals: usize,
    pub test_deals: usize,
    pub meters: Vec<MeterOutcome>,
    pub dit: Option<DitSelection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub table: ProfileTable,
    pub profiles: Vec<Profile>,
    /// Chosen `k` → number of collections.
    pub k_hist: BTreeMap<usize, usize>,
    /// Chosen regression meter → number of collections.
    pub coord_hist: BTreeMap<String, usize>,
    pub collections: Vec<CollectionReport>,
    pub failures: Vec<(String, String)>,
}

impl BenchReport {
    /// Collections on which `meter` has the strictly lowest `F`.
    pub fn strict_wins(&self, meter: MeterKind) -> usize {
        let Some(mi) = self.table.meters.iter().position(|m| m == meter.code()) else {
            return 0;
        };
        (0..self.table.collections.len())
            .filter(|&c| {
                let Some(f) = self.table.f_matrix[mi][c] else { return false };
                self.table
                    .f_matrix
                    .iter()
                    .enumerate()
                    .all(|(other, row)| other == mi || row[c].is_none_or(|g| f < g))
            })
            .count()
    }
}

fn score_meter(scores: &RarityVector, test: &DissimMatrix, train: &DissimMatrix, alpha_from_train: bool) -> MeterOutcome {
    let meter = scores.meter_name.parse().unwrap_or(MeterKind::Dit);
    let res = if alpha_from_train {
        optimal_scale(&scores.scores, train).and_then(|fit| {
            if fit.degenerate {
                Err(Error::DegenerateMeter)
            } else {
                measure_with_alpha(&scores.scores, test, fit.alpha)
            }
        })
    } else {
        measure_f_scaled(&scores.scores, test)
    };
    match res {
        Ok(r) => MeterOutcome { meter, test_f: Some(r.f_value), alpha: Some(r.alpha_used), degenerate: false, error: None, weights: None },
        Err(Error::DegenerateMeter) => MeterOutcome {
            meter,
            test_f: Some(f64::INFINITY),
            alpha: None,
            degenerate: true,
            error: None,
            weights: None,
        },
        Err(e) => MeterOutcome { meter, test_f: None, alpha: None, degenerate: false, error: Some(e.to_string()), weights: None },
    }
}

fn failed(meter: MeterKind, e: Error) -> MeterOutcome {
    MeterOutcome { meter, test_f: None, alpha: None, degenerate: false, error: Some(e.to_string()), weights: None }
}

/// Splits, fits and scores every requested meter on one collection.
pub fn evaluate_collection(name: &str, data: &Dataset, cfg: &BenchConfig) -> Result<CollectionReport> {
    let c = &data.collection;
    let split = split_trades(&data.log, cfg.split_fraction)?;
    let train = build_dissim(&split.train, c.len(), &cfg.kernel)?;
    if split.test.is_empty() {
        return Err(Error::EmptyLog);
    }
    let test = build_dissim(&split.test, c.len(), &cfg.kernel)?;
    if train.is_unweighted() || test.is_unweighted() {
        return Err(Error::NoWeights);
    }
    let alpha_from_train = cfg.grid.alpha_from_train;
    let mut outcomes = Vec::with_capacity(cfg.meters.len());
    let mut dit = None;
    for &meter in &cfg.meters {
        let outcome = match meter {
            MeterKind::RarityTools => score_meter(&meters::rarity_tools(c), &test, &train, alpha_from_train),
            MeterKind::OpenRarity => score_meter(&meters::open_rarity(c), &test, &train, alpha_from_train),
            MeterKind::NftGo => score_meter(&meters::nftgo(c, cfg.invert_nftgo), &test, &train, alpha_from_train),
            MeterKind::Kramer | MeterKind::Roar => {
                let fitted = if meter == MeterKind::Kramer { meters::kramer(c, &train) } else { meters::roar(c, &train) };
                match fitted {
                    Ok((w, r)) => MeterOutcome { weights: Some(w), ..score_meter(&r, &test, &train, alpha_from_train) },
                    Err(e) => failed(meter, e),
                }
            }
            MeterKind::Dit => match cross_validate(c, &split.train, &cfg.grid, &cfg.kernel, &cfg.solver) {
                Ok(model) => {
                    dit = Some(DitSelection {
                        chosen_meter: model.chosen_meter,
                        chosen_k: model.chosen_k,
                        cells: model.cells.clone(),
                    });
                    score_meter(&model.scores, &test, &train, alpha_from_train)
                }
                Err(e) => failed(meter, e),
            },
        };
        log::info!("{name}: {meter} F = {:?}", outcome.test_f);
        outcomes.push(outcome);
    }
    Ok(CollectionReport {
        name: name.to_string(),
        n_tokens: c.len(),
        train_deals: split.train.len(),
        test_deals: split.test.len(),
        meters: outcomes,
        dit,
    })
}

/// Evaluates every collection and aggregates profiles and histograms.
/// Collections that fail outright are listed in `failures` and left out of
/// the table; a meter that errors on a collection that otherwise succeeded is
/// entered as `+∞`.
pub fn run_benchmark(datasets: &[(String, Dataset)], cfg: &BenchConfig) -> Result<BenchReport> {
    let results: Vec<(String, Result<CollectionReport>)> = datasets
        .par_iter()
        .map(|(name, data)| (name.clone(), evaluate_collection(name, data, cfg)))
        .collect();
    aggregate(results, cfg)
}

pub fn aggregate(results: Vec<(String, Result<CollectionReport>)>, cfg: &BenchConfig) -> Result<BenchReport> {
    let mut collections = Vec::new();
    let mut failures = Vec::new();
    for (name, r) in results {
        match r {
            Ok(rep) => collections.push(rep),
            Err(e) => {
                log::warn!("{name}: {e}");
                failures.push((name, e.to_string()));
            }
        }
    }
    let table = ProfileTable {
        meters: cfg.meters.iter().map(|m| m.code().to_string()).collect(),
        collections: collections.iter().map(|c| c.name.clone()).collect(),
        f_matrix: cfg
            .meters
            .iter()
            .enumerate()
            .map(|(mi, _)| collections.iter().map(|c| Some(c.meters[mi].test_f.unwrap_or(f64::INFINITY))).collect())
            .collect(),
    };
    let profiles = if collections.is_empty() { Vec::new() } else { profile(&table)? };
    let mut k_hist = BTreeMap::new();
    let mut coord_hist = BTreeMap::new();
    for sel in collections.iter().filter_map(|c| c.dit.as_ref()) {
        *k_hist.entry(sel.chosen_k).or_insert(0) += 1;
        *coord_hist.entry(sel.chosen_meter.code().to_string()).or_insert(0) += 1;
    }
    Ok(BenchReport { table, profiles, k_hist, coord_hist, collections, failures })
}

fn fmt_f(v: Option<f64>) -> String {
    match v {
        Some(f) if f.is_finite() => format!("{f:.12}"),
        Some(_) => "inf".into(),
        None => "".into(),
    }
}

/// Writes `f_table.csv`, `profiles.json`, `k_hist.json`, `failures.json`
/// and `detail/<collection>.json` under `out`.
pub fn write_report(report: &BenchReport, out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    fs::create_dir_all(out.join("detail"))?;
    let mut w = csv::Writer::from_path(out.join("f_table.csv"))?;
    let mut header = vec!["meter".to_string()];
    header.extend(report.table.collections.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in report.table.meters.iter().zip(&report.table.f_matrix) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| fmt_f(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;

    #[derive(Serialize)]
    struct ProfileOut<'a> {
        meter: &'a str,
        gaps: Vec<Option<f64>>,
        steps: Vec<(f64, f64)>,
    }
    let profiles: Vec<ProfileOut> = report
        .profiles
        .iter()
        .map(|p| ProfileOut {
            meter: &p.meter,
            // JSON has no infinity; null marks never-within-reach
            gaps: p.gaps.iter().map(|g| g.is_finite().then_some(*g)).collect(),
            steps: p.steps(),
        })
        .collect();
    fs::write(
        out.join("profiles.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "collections": report.table.collections.len(),
            "profiles": profiles,
        }))?,
    )?;
    fs::write(
        out.join("k_hist.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "k": report.k_hist,
            "coordinate_meter": report.coord_hist,
        }))?,
    )?;
    for c in &report.collections {
        let file = sanitize(&c.name);
        fs::write(out.join("detail").join(format!("{file}.json")), serde_json::to_string_pretty(&detail_json(c))?)?;
    }
    fs::write(out.join("failures.json"), serde_json::to_string_pretty(&report.failures)?)?;
    Ok(())
}

fn detail_json(c: &CollectionReport) -> serde_json::Value {
    let mut v = serde_json::to_value(c).unwrap_or_default();
    // infinities serialize as null; keep the flag explicit
    if let Some(ms) = v.get_mut("meters").and_then(|m| m.as_array_mut()) {
        for (m, o) in ms.iter_mut().zip(&c.meters) {
            if o.degenerate {
                m["test_f"] = serde_json::Value::String("inf".into());
            }
        }
    }
    v
}

fn sanitize(name: &str) -> String {
    name.chars().map(|ch| if ch.is_ascii_alphanumeric() || ch == '-' || ch == '_' { ch } else { '_' }).collect()
}
