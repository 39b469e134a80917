use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dit_core::benchmark::{load_dataset, run_benchmark, write_report, BenchConfig};
use dit_core::dissim::{write_matrix_csv, MatrixMeta};
use dit_core::dit::parse_k_range;
use dit_core::eval::measure_f_scaled;
use dit_core::meters::{interpretable_meter, parse_meter_list};
use dit_core::synth::{generate, SynthParams};
use dit_core::{
    build_dissim, cross_validate, load_collection, load_matrix, load_trades, restrict_to_traded, save_collection,
    save_matrix, save_trades, solve, split_trades, CvGrid, DitModel, MeterKind, SolverParams, TimeKernel,
};
use serde::Serialize;

mod adapt;

#[derive(Parser)]
#[command(name = "dit", version, about = "Trade-derived NFT rarity: dissimilarities, meters, solver and benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the weighted dissimilarity matrix of a trade log.
    Dissim(DissimArgs),
    /// Score a collection with interpretable meters.
    Meters(MetersArgs),
    /// Embed a matrix on a line by smoothed-stress continuation.
    Solve(SolveArgs),
    /// Train DIT with cross-validated extension and write the model.
    Fit(FitArgs),
    /// Compare meters over a directory of collections.
    Bench(BenchArgs),
    /// Convert a directory of raw collection dumps into the bench layout.
    Adapt(AdaptArgs),
    /// Write a synthetic collection with a planted latent rarity.
    Synth(SynthArgs),
}

fn duration(s: &str) -> Result<Duration, String> {
    humantime::parse_duration(s).map_err(|e| e.to_string())
}

#[derive(Args, Clone)]
struct KernelArgs {
    /// Half-life of the time kernel (e.g. 24h, 90min).
    #[arg(long, value_parser = duration, default_value = "24h")]
    half_life: Duration,
    /// Deal pairs further apart than this are ignored.
    #[arg(long, value_parser = duration, default_value = "7d")]
    cutoff: Duration,
}

impl KernelArgs {
    fn kernel(&self) -> Result<TimeKernel> {
        Ok(TimeKernel::new(self.half_life.as_secs_f64(), self.cutoff.as_secs_f64())?)
    }
}

#[derive(Args, Clone)]
struct SolverArgs {
    /// Number of continuation stages.
    #[arg(long, default_value_t = 20)]
    steps: usize,
    /// Gradient-norm tolerance per stage.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    max_iters: usize,
    /// Relaxation of the fixed-point update, in (0, 1].
    #[arg(long, default_value_t = 0.5)]
    relaxation: f64,
    /// Use the update with `x_j - δ u` for comparison runs.
    #[arg(long)]
    minus_update: bool,
}

impl SolverArgs {
    fn params(&self) -> SolverParams {
        SolverParams {
            steps: self.steps,
            grad_tol: self.tol,
            seed: self.seed,
            max_iters_per_eps: self.max_iters,
            relaxation: self.relaxation,
            minus_update: self.minus_update,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct DissimArgs {
    #[command(flatten)]
    kernel: KernelArgs,
    /// Trades CSV (`token_id,timestamp,price`).
    #[arg(long = "in")]
    input: PathBuf,
    /// Collection JSON that defines token indices.
    #[arg(long)]
    collection: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the weighted pairs as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct MetersArgs {
    /// Comma-separated meter codes: rt, kr, or, go, roar.
    #[arg(long, default_value = "rt,kr,or,go,roar")]
    which: String,
    #[arg(long)]
    collection: PathBuf,
    /// Matrix to fit kr and roar on.
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Report 100 minus the NFTGo score.
    #[arg(long, alias = "invert")]
    invert_nftgo: bool,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    /// Write the solver trace as JSON.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Coordinates as CSV (`index,x`), traded tokens only.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    collection: PathBuf,
    #[arg(long)]
    trades: PathBuf,
    /// Candidate regression coordinates.
    #[arg(long, default_value = "rt,kr,or,go")]
    grid: String,
    /// Neighbour counts: `1..25`, `1..=25` or `1,2,5`.
    #[arg(long, default_value = "1..=25")]
    k: String,
    /// Share of the latest training deals held out for validation.
    #[arg(long, default_value_t = 0.3)]
    validation: f64,
    /// Fit on the earliest share of deals only and report `F` on the rest.
    #[arg(long)]
    split: Option<f64>,
    /// Score with the scale fitted on training data.
    #[arg(long)]
    alpha_from_train: bool,
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: PathBuf,
    /// Also write final scores as CSV.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Directory with one subdirectory per collection.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "rt,kr,or,go,roar,dit")]
    meters: String,
    #[arg(long, default_value = "rt,kr,or,go")]
    grid: String,
    #[arg(long, default_value = "1..=25")]
    k: String,
    #[arg(long, default_value_t = 0.7)]
    split: f64,
    #[arg(long)]
    alpha_from_train: bool,
    #[arg(long, alias = "invert")]
    invert_nftgo: bool,
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    tokens: usize,
    #[arg(long, default_value_t = 5000)]
    trades: usize,
    /// Log-price noise around the latent value.
    #[arg(long, default_value_t = 0.2)]
    sigma: f64,
    #[arg(long, default_value_t = 4)]
    traits: usize,
    /// Correlation of trait rarity with the latent value.
    #[arg(long, default_value_t = 0.3)]
    correlation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives `collection.json` and `trades.csv`.
    #[arg(long)]
    out: PathBuf,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn run_dissim(a: DissimArgs) -> Result<()> {
    let kernel = a.kernel.kernel()?;
    let c = load_collection(&a.collection)?;
    let (log, dropped) = load_trades(&a.input, &c)?;
    if dropped.total() > 0 {
        log::warn!("dropped {} non-positive prices and {} unknown tokens", dropped.non_positive_price, dropped.unknown_token);
    }
    let m = build_dissim(&log, c.len(), &kernel)?;
    let meta = MatrixMeta::describe(&m, &kernel, log.len());
    save_matrix(&m, &meta, &a.out)?;
    if let Some(p) = a.csv {
        write_matrix_csv(&m, fs::File::create(p)?)?;
    }
    log::info!("{} tokens, {} deals, {} weighted pairs", meta.n, meta.deals, meta.weighted_pairs);
    Ok(())
}

fn run_meters(a: MetersArgs) -> Result<()> {
    let c = load_collection(&a.collection)?;
    let which = parse_meter_list(&a.which)?;
    let matrix = a.matrix.as_ref().map(load_matrix).transpose()?;
    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record(["token_id", "meter_name", "score"])?;
    for kind in which {
        let r = match kind {
            MeterKind::NftGo => dit_core::meters::nftgo(&c, a.invert_nftgo),
            MeterKind::Dit => bail!("dit scores come from `fit`"),
            _ => interpretable_meter(kind, &c, matrix.as_ref())?,
        };
        for (tok, s) in c.tokens.iter().zip(&r.scores) {
            w.write_record([tok.external_id.as_str(), kind.code(), &s.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn run_solve(a: SolveArgs) -> Result<()> {
    let full = load_matrix(&a.matrix)?;
    let (m, map) = restrict_to_traded(&full)?;
    let (config, trace) = solve(&m, &a.solver.params())?;
    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record(["index", "x"])?;
    for (k, x) in config.x.iter().enumerate() {
        w.write_record([map.to_old(k).to_string(), x.to_string()])?;
    }
    w.flush()?;
    if let Some(p) = a.trace {
        write_json(&p, &trace)?;
    }
    log::info!("{} traded tokens, final stress {:.6e}", m.n(), trace.final_stress);
    Ok(())
}

#[derive(Serialize)]
struct ModelFile<'a> {
    collection: &'a str,
    model: &'a DitModel,
    grid: &'a CvGrid,
    solver: &'a SolverParams,
    kernel: &'a TimeKernel,
    train_deals: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_f: Option<f64>,
}

fn run_fit(a: FitArgs) -> Result<()> {
    let kernel = a.kernel.kernel()?;
    let c = load_collection(&a.collection)?;
    let (log, _) = load_trades(&a.trades, &c)?;
    let grid = CvGrid {
        meters: parse_meter_list(&a.grid)?,
        ks: parse_k_range(&a.k)?,
        validation_fraction: a.validation,
        alpha_from_train: a.alpha_from_train,
    };
    let params = a.solver.params();
    let (train, test) = match a.split {
        Some(f) => {
            let s = split_trades(&log, f)?;
            (s.train, Some(s.test))
        }
        None => (log, None),
    };
    let model = cross_validate(&c, &train, &grid, &kernel, &params)?;
    let test_f = match &test {
        Some(t) if !t.is_empty() => {
            let m = build_dissim(t, c.len(), &kernel)?;
            Some(measure_f_scaled(&model.scores.scores, &m)?.f_value)
        }
        _ => None,
    };
    log::info!("chose {} with k = {}; test F {:?}", model.chosen_meter, model.chosen_k, test_f);
    write_json(
        &a.out,
        &ModelFile {
            collection: &c.name,
            model: &model,
            grid: &grid,
            solver: &params,
            kernel: &kernel,
            train_deals: train.len(),
            test_f,
        },
    )?;
    if let Some(p) = a.scores {
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(["token_id", "meter_name", "score"])?;
        for (tok, s) in c.tokens.iter().zip(&model.scores.scores) {
            w.write_record([tok.external_id.as_str(), "dit", &s.to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn run_bench(a: BenchArgs) -> Result<ExitCode> {
    let cfg = BenchConfig {
        meters: parse_meter_list(&a.meters)?,
        kernel: a.kernel.kernel()?,
        solver: a.solver.params(),
        grid: CvGrid {
            meters: parse_meter_list(&a.grid)?,
            ks: parse_k_range(&a.k)?,
            alpha_from_train: a.alpha_from_train,
            ..Default::default()
        },
        split_fraction: a.split,
        invert_nftgo: a.invert_nftgo,
    };
    let mut data = Vec::new();
    let mut load_failures = Vec::new();
    for (name, d) in load_dataset(&a.dataset)? {
        match d {
            Ok(d) => data.push((name, d)),
            Err(e) => {
                log::warn!("{name}: {e}");
                load_failures.push((name, e.to_string()));
            }
        }
    }
    if data.is_empty() && load_failures.is_empty() {
        bail!("no collections under {}", a.dataset.display());
    }
    let mut report = run_benchmark(&data, &cfg)?;
    report.failures.extend(load_failures);
    write_report(&report, &a.out)?;
    for meter in &cfg.meters {
        log::info!("{meter}: lowest F on {}/{}", report.strict_wins(*meter), report.table.collections.len());
    }
    if report.failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("{} collections failed; see {}", report.failures.len(), a.out.join("failures.json").display());
        Ok(ExitCode::FAILURE)
    }
}

fn run_adapt(a: AdaptArgs) -> Result<ExitCode> {
    let s = adapt::adapt(&a.input, &a.out)?;
    log::info!("{} collections written, {} trade rows dropped", s.collections, s.dropped_trades);
    for (name, why) in &s.skipped {
        eprintln!("skipped {name}: {why}");
    }
    Ok(if s.skipped.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let s = generate(&SynthParams {
        n_tokens: a.tokens,
        n_trades: a.trades,
        noise_sigma: a.sigma,
        n_traits: a.traits,
        trait_correlation: a.correlation,
        seed: a.seed,
        ..Default::default()
    })?;
    fs::create_dir_all(&a.out)?;
    save_collection(&s.collection, a.out.join("collection.json"))?;
    save_trades(&s.log, &s.collection, a.out.join("trades.csv"))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Dissim(a) => run_dissim(a).map(|_| ExitCode::SUCCESS),
        Command::Meters(a) => run_meters(a).map(|_| ExitCode::SUCCESS),
        Command::Solve(a) => run_solve(a).map(|_| ExitCode::SUCCESS),
        Command::Fit(a) => run_fit(a).map(|_| ExitCode::SUCCESS),
        Command::Bench(a) => run_bench(a),
        Command::Adapt(a) => run_adapt(a),
        Command::Synth(a) => run_synth(a).map(|_| ExitCode::SUCCESS),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
