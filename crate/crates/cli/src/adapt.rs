//! Converts a directory of per-collection dumps into the `collection.json` +
//! `trades.csv` layout read by `bench`. Recognized inputs are listed in the
//! README.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dit_core::collection::{Collection, Deal, TradeLog, NONE_VALUE};
use dit_core::{save_collection, save_trades};
use serde_json::Value;

const TOKEN_FILES: [&str; 4] = ["tokens.json", "metadata.json", "tokens.csv", "metadata.csv"];
const TRADE_FILES: [&str; 3] = ["trades.csv", "sales.csv", "transactions.csv"];
const ID_KEYS: [&str; 5] = ["token_id", "tokenId", "id", "identifier", "token"];
const TIME_KEYS: [&str; 5] = ["timestamp", "block_timestamp", "time", "ts", "date"];
const PRICE_KEYS: [&str; 5] = ["price", "price_eth", "value", "amount", "sale_price"];

#[derive(Debug, Default)]
pub struct AdaptSummary {
    pub collections: usize,
    pub skipped: Vec<(String, String)>,
    pub dropped_trades: usize,
}

fn find(dir: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| dir.join(n)).find(|p| p.is_file())
}

fn scalar(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => NONE_VALUE.into(),
        other => other.to_string(),
    }
}

fn token_id(obj: &serde_json::Map<String, Value>) -> Option<String> {
    ID_KEYS.iter().find_map(|k| obj.get(*k)).map(scalar)
}

/// Trait map from an OpenSea-style `attributes` array or a plain object.
fn traits_of(obj: &serde_json::Map<String, Value>) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    match obj.get("attributes").or_else(|| obj.get("traits")) {
        Some(Value::Array(items)) => {
            for it in items {
                if let (Some(t), Some(v)) = (it.get("trait_type"), it.get("value")) {
                    out.insert(scalar(t), scalar(v));
                }
            }
        }
        Some(Value::Object(map)) => {
            for (k, v) in map {
                out.insert(k.clone(), scalar(v));
            }
        }
        _ => {}
    }
    out
}

type RawTokens = (Vec<(String, BTreeMap<String, String>)>, Option<String>);

fn read_tokens_json(path: &Path) -> Result<RawTokens> {
    let v: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let (list, contract) = match v {
        Value::Array(items) => (items, None),
        Value::Object(mut map) => {
            let contract = map.get("contract").or_else(|| map.get("address")).map(scalar);
            match map.remove("tokens") {
                Some(Value::Array(items)) => (items, contract),
                _ => {
                    // id -> token object
                    let items = map
                        .into_iter()
                        .filter_map(|(id, tok)| match tok {
                            Value::Object(mut o) => {
                                o.entry("token_id").or_insert(Value::String(id));
                                Some(Value::Object(o))
                            }
                            _ => None,
                        })
                        .collect();
                    (items, contract)
                }
            }
        }
        _ => bail!("{}: expected a JSON array or object", path.display()),
    };
    let mut rows = Vec::with_capacity(list.len());
    for item in list {
        let obj = item.as_object().ok_or_else(|| anyhow!("{}: token entry is not an object", path.display()))?;
        let id = token_id(obj).ok_or_else(|| anyhow!("{}: token without an id", path.display()))?;
        rows.push((id, traits_of(obj)));
    }
    Ok((rows, contract))
}

fn read_tokens_csv(path: &Path) -> Result<RawTokens> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let id_col = headers
        .iter()
        .position(|h| ID_KEYS.contains(&h))
        .unwrap_or(0);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let id = rec.get(id_col).unwrap_or_default().to_string();
        let traits = headers
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != id_col)
            .map(|(i, h)| {
                let v = rec.get(i).unwrap_or_default();
                (h.to_string(), if v.is_empty() { NONE_VALUE.to_string() } else { v.to_string() })
            })
            .collect();
        rows.push((id, traits));
    }
    Ok((rows, None))
}

fn build_collection(name: &str, raw: RawTokens) -> Result<Collection> {
    let (rows, contract) = raw;
    let mut names: Vec<String> = rows.iter().flat_map(|(_, t)| t.keys().cloned()).collect();
    names.sort();
    names.dedup();
    if names.is_empty() {
        bail!("no traits found");
    }
    let rows = rows
        .into_iter()
        .map(|(id, t)| (id, names.iter().map(|n| t.get(n).cloned().unwrap_or_else(|| NONE_VALUE.into())).collect()))
        .collect();
    Ok(Collection::new(name, contract.unwrap_or_else(|| name.to_string()), names, rows)?)
}

/// Unix seconds from integer seconds, milliseconds, fractional seconds or RFC 3339.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(if v.abs() > 100_000_000_000 { v / 1000 } else { v });
    }
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then_some(v.floor() as i64);
    }
    let t = humantime::parse_rfc3339_weak(s).ok()?;
    let d = t.duration_since(std::time::UNIX_EPOCH).ok()?;
    Some(d.as_secs() as i64)
}

fn read_trades(path: &Path, c: &Collection) -> Result<(TradeLog, usize)> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |keys: &[&str]| -> Result<usize> {
        headers
            .iter()
            .position(|h| keys.contains(&h))
            .ok_or_else(|| anyhow!("{}: none of the columns {keys:?}", path.display()))
    };
    let (ic, tc, pc) = (col(&ID_KEYS)?, col(&TIME_KEYS)?, col(&PRICE_KEYS)?);
    let index = c.index_of();
    let mut deals = Vec::new();
    let mut dropped = 0;
    for rec in r.records() {
        let rec = rec?;
        let deal = (|| {
            let token_index = *index.get(rec.get(ic)?.trim())?;
            let timestamp = parse_timestamp(rec.get(tc)?)?;
            let price: f64 = rec.get(pc)?.trim().parse().ok()?;
            (price > 0.0 && price.is_finite()).then_some(Deal { timestamp, token_index, price })
        })();
        match deal {
            Some(d) => deals.push(d),
            None => dropped += 1,
        }
    }
    Ok((TradeLog::new(deals), dropped))
}

fn adapt_one(dir: &Path, out: &Path, name: &str) -> Result<usize> {
    let tokens = find(dir, &TOKEN_FILES).ok_or_else(|| anyhow!("no token metadata file"))?;
    let trades = find(dir, &TRADE_FILES).ok_or_else(|| anyhow!("no trades file"))?;
    let raw = if tokens.extension().is_some_and(|e| e == "json") { read_tokens_json(&tokens)? } else { read_tokens_csv(&tokens)? };
    let c = build_collection(name, raw)?;
    let (log, dropped) = read_trades(&trades, &c)?;
    let target = out.join(name);
    fs::create_dir_all(&target)?;
    save_collection(&c, target.join("collection.json"))?;
    save_trades(&log, &c, target.join("trades.csv"))?;
    log::info!("{name}: {} tokens, {} trades, {dropped} rows dropped", c.len(), log.len());
    Ok(dropped)
}

pub fn adapt(input: &Path, out: &Path) -> Result<AdaptSummary> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut summary = AdaptSummary::default();
    for dir in dirs {
        let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        match adapt_one(&dir, out, &name) {
            Ok(dropped) => {
                summary.collections += 1;
                summary.dropped_trades += dropped;
            }
            Err(e) => {
                log::warn!("{name}: skipped: {e:#}");
                summary.skipped.push((name, format!("{e:#}")));
            }
        }
    }
    Ok(summary)
}
