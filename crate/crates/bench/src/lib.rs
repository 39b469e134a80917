//! Fixtures shared by the criterion benches.

use dit_core::synth::{generate, SynthParams, Synthetic};
use dit_core::{build_dissim, restrict_to_traded, DissimMatrix, TimeKernel};

pub fn synthetic(n_tokens: usize, n_trades: usize) -> Synthetic {
    generate(&SynthParams { n_tokens, n_trades, seed: 7, ..Default::default() }).expect("valid synth params")
}

/// Restricted dissimilarity matrix of a synthetic collection.
pub fn matrix(n_tokens: usize, n_trades: usize) -> DissimMatrix {
    let s = synthetic(n_tokens, n_trades);
    let m = build_dissim(&s.log, s.collection.len(), &TimeKernel::default()).expect("non-empty log");
    restrict_to_traded(&m).expect("synthetic log trades every token").0
}
