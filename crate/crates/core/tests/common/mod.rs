#![allow(dead_code)]

use dit_core::collection::{Collection, Deal, TradeLog};
use dit_core::DissimMatrix;
use rand::Rng;

/// Dense instance with `W ~ U(0, 1)` and `Δ ~ U(0, 3)` on every pair.
pub fn random_instance<R: Rng>(rng: &mut R, n: usize) -> DissimMatrix {
    let mut m = DissimMatrix::zeros(n);
    for i in 0..n {
        for j in i + 1..n {
            let w = loop {
                let w: f64 = rng.random();
                if w > 0.0 {
                    break w;
                }
            };
            m.set(i, j, w, 3.0 * rng.random::<f64>());
        }
    }
    m
}

pub fn uniform_vec<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn collection(traits: &[&[&str]]) -> Collection {
    let t = traits[0].len();
    let names = (0..t).map(|k| format!("t{k}")).collect();
    let rows = traits
        .iter()
        .enumerate()
        .map(|(i, row)| (format!("tok{i}"), row.iter().map(|s| s.to_string()).collect()))
        .collect();
    Collection::new("fixture", "0x0", names, rows).unwrap()
}

pub fn random_log<R: Rng>(rng: &mut R, n_tokens: usize, n_deals: usize, span_secs: i64) -> TradeLog {
    TradeLog::new(
        (0..n_deals)
            .map(|_| Deal {
                timestamp: rng.random_range(0..span_secs),
                token_index: rng.random_range(0..n_tokens),
                price: (rng.random_range(-2.0..2.0f64)).exp(),
            })
            .collect(),
    )
}

/// Brute-force dissimilarities over every unordered deal pair.
pub fn brute_force_dissim(log: &TradeLog, n: usize, half_life: f64, cutoff: f64) -> (Vec<f64>, Vec<f64>) {
    let mut w = vec![0.0; n * n];
    let mut s = vec![0.0; n * n];
    let deals = log.deals();
    for a in 0..deals.len() {
        for b in a + 1..deals.len() {
            let (da, db) = (&deals[a], &deals[b]);
            if da.token_index == db.token_index {
                continue;
            }
            let dt = (da.timestamp - db.timestamp).abs() as f64;
            if dt > cutoff {
                continue;
            }
            let k = 0.5f64.powf(dt / half_life);
            let gap = (da.price.ln() - db.price.ln()).abs();
            for (i, j) in [(da.token_index, db.token_index), (db.token_index, da.token_index)] {
                w[i * n + j] += k;
                s[i * n + j] += k * gap;
            }
        }
    }
    let d = w.iter().zip(&s).map(|(&w, &s)| if w > 0.0 { s / w } else { 0.0 }).collect();
    (w, d)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}
