//! Trade-derived rarity for NFT collections.
//!
//! The pipeline builds a weighted dissimilarity matrix from close-in-time
//! deal pairs ([`dissim`]), fits a one-dimensional embedding of it by
//! smoothed-stress continuation ([`solver`]), extends the embedding to
//! untraded tokens with kernel regression over an interpretable meter
//! ([`dit`]), and compares the result against classic trait-frequency
//! meters ([`meters`]) with the stress measure `F` and performance
//! profiles ([`eval`], [`benchmark`]).

pub mod benchmark;
pub mod collection;
pub mod dissim;
pub mod dit;
pub mod error;
pub mod eval;
pub mod meters;
pub mod solver;
pub mod synth;

pub use collection::{
    load_collection, load_trades, save_collection, save_trades, split_trades, Collection, Deal, DropSummary,
    SplitTradeLog, Token, TradeLog,
};
pub use dissim::{build_dissim, load_matrix, restrict_to_traded, save_matrix, DissimMatrix, IndexMap, TimeKernel};
pub use dit::{cross_validate, extend, train, CvGrid, DitModel};
pub use error::{Error, Result};
pub use eval::{measure_f, optimal_scale, profile, MeasureResult, ProfileTable};
pub use meters::{EnsembleWeights, MeterKind, RarityVector, TraitScoreTable};
pub use solver::{solve, Config1D, SolverParams, SolverTrace};
