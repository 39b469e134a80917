//! Seeded synthetic collections with a planted one-dimensional rarity.
//!
//! Each token gets a latent value `z`. Deals pick tokens uniformly at random
//! times and log-prices are `z + N(0, σ²)`. Trait values are drawn from a
//! noisy copy of `z` so that rarer categories go with larger `z`, with a
//! tunable correlation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::collection::{Collection, Deal, TradeLog, NONE_VALUE};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_tokens: usize,
    pub n_trades: usize,
    pub noise_sigma: f64,
    pub n_traits: usize,
    pub values_per_trait: usize,
    /// Correlation between each trait's driver and `z`, in `[0, 1]`.
    pub trait_correlation: f64,
    /// Standard deviation of `z`.
    pub latent_scale: f64,
    /// Share of tokens with the last trait missing.
    pub none_rate: f64,
    pub span_secs: i64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_tokens: 200,
            n_trades: 5000,
            noise_sigma: 0.2,
            n_traits: 4,
            values_per_trait: 6,
            trait_correlation: 0.3,
            latent_scale: 1.0,
            none_rate: 0.2,
            span_secs: 90 * 24 * 3600,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub collection: Collection,
    pub log: TradeLog,
    pub latent: Vec<f64>,
}

/// Splits `n` sorted positions into `v` categories whose sizes shrink
/// geometrically; category 0 is the most common.
fn category_bounds(n: usize, v: usize) -> Vec<usize> {
    let weights: Vec<f64> = (0..v).map(|c| 0.6f64.powi(c as i32)).collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    let mut bounds: Vec<usize> = weights
        .iter()
        .map(|w| {
            acc += w;
            ((acc / total) * n as f64).round() as usize
        })
        .collect();
    *bounds.last_mut().expect("v >= 1") = n;
    bounds
}

pub fn generate(params: &SynthParams) -> Result<Synthetic> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = params.n_tokens;
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let latent: Vec<f64> = (0..n).map(|_| params.latent_scale * normal(&mut rng)).collect();
    let z_std = params.latent_scale.max(f64::MIN_POSITIVE);
    let rho = params.trait_correlation.clamp(0.0, 1.0);
    let noise_w = (1.0 - rho * rho).sqrt();
    let bounds = category_bounds(n, params.values_per_trait.max(1));

    let mut traits = vec![Vec::with_capacity(params.n_traits); n];
    let trait_names: Vec<String> = (0..params.n_traits).map(|t| format!("trait{t}")).collect();
    for t in 0..params.n_traits {
        let driver: Vec<f64> = latent.iter().map(|z| rho * z / z_std + noise_w * normal(&mut rng)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| driver[a].total_cmp(&driver[b]));
        let mut cat = 0;
        for (rank, &tok) in order.iter().enumerate() {
            while rank >= bounds[cat] {
                cat += 1;
            }
            traits[tok].push(format!("{}_{cat}", trait_names[t]));
        }
    }
    if params.n_traits > 1 {
        let last = params.n_traits - 1;
        for row in traits.iter_mut() {
            if rng.random::<f64>() < params.none_rate {
                row[last] = NONE_VALUE.to_string();
            }
        }
    }

    let rows = traits.into_iter().enumerate().map(|(i, tr)| (format!("tok{i}"), tr)).collect();
    let collection = Collection::new(format!("synthetic-{}", params.seed), "0xsynthetic", trait_names, rows)?;

    let deals = (0..params.n_trades)
        .map(|_| {
            let token_index = rng.random_range(0..n);
            let timestamp = rng.random_range(0..params.span_secs.max(1));
            let log_price = latent[token_index] + params.noise_sigma * normal(&mut rng);
            Deal { timestamp, token_index, price: log_price.exp() }
        })
        .collect();
    Ok(Synthetic { collection, log: TradeLog::new(deals), latent })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_shaped() {
        let p = SynthParams { n_tokens: 50, n_trades: 300, seed: 9, ..Default::default() };
        let a = generate(&p).unwrap();
        let b = generate(&p).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.collection, b.collection);
        assert_eq!(a.collection.len(), 50);
        assert_eq!(a.log.len(), 300);
        assert!(a.log.deals().iter().all(|d| d.price > 0.0));
    }

    #[test]
    fn bounds_cover_all_tokens() {
        let b = category_bounds(200, 6);
        assert_eq!(b.len(), 6);
        assert_eq!(*b.last().unwrap(), 200);
        assert!(b.windows(2).all(|w| w[0] <= w[1]));
        // first category is the largest
        assert!(b[0] > b[5] - b[4]);
    }
}
