//! Collections of tokens with categorical traits, trade logs, and the
//! chronological train/test split.
//!
//! A collection file is a JSON object:
//!
//! ```json
//! {"name": "apes", "contract": "0xbc4c...", "trait_names": ["fur", "hat"],
//!  "tokens": [{"id": "0", "traits": {"fur": "gold", "hat": "cap"}}]}
//! ```
//!
//! Traits a token does not list are stored as [`NONE_VALUE`]. A trades file
//! is a CSV with header `token_id,timestamp,price`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The category used for a trait slot a token does not have.
pub const NONE_VALUE: &str = "None";

/// Default share of the earliest deals used for training.
pub const DEFAULT_SPLIT_FRACTION: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub index: usize,
    pub external_id: String,
    pub traits: Vec<String>,
}

impl Token {
    /// Number of trait slots holding something other than [`NONE_VALUE`].
    pub fn trait_count(&self) -> usize {
        self.traits.iter().filter(|v| v.as_str() != NONE_VALUE).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Collection {
    pub name: String,
    pub contract: String,
    pub trait_names: Vec<String>,
    pub tokens: Vec<Token>,
}

impl Collection {
    /// Builds a collection from `(external_id, traits)` rows, validating shape.
    pub fn new(
        name: impl Into<String>,
        contract: impl Into<String>,
        trait_names: Vec<String>,
        rows: Vec<(String, Vec<String>)>,
    ) -> Result<Self> {
        if trait_names.is_empty() {
            return Err(Error::MalformedCollection("no trait names".into()));
        }
        if rows.len() < 2 {
            return Err(Error::TooFewTokens(rows.len()));
        }
        let mut seen = HashMap::with_capacity(rows.len());
        let mut tokens = Vec::with_capacity(rows.len());
        for (index, (external_id, traits)) in rows.into_iter().enumerate() {
            if traits.len() != trait_names.len() {
                return Err(Error::MalformedCollection(format!(
                    "token `{external_id}` has {} trait slots, expected {}",
                    traits.len(),
                    trait_names.len()
                )));
            }
            if seen.insert(external_id.clone(), index).is_some() {
                return Err(Error::DuplicateToken(external_id));
            }
            tokens.push(Token { index, external_id, traits });
        }
        Ok(Self { name: name.into(), contract: contract.into(), trait_names, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn trait_count(&self) -> usize {
        self.trait_names.len()
    }

    /// Values of trait column `t` for every token, in token order.
    pub fn column(&self, t: usize) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(move |tok| tok.traits[t].as_str())
    }

    pub fn index_of(&self) -> HashMap<&str, usize> {
        self.tokens.iter().map(|t| (t.external_id.as_str(), t.index)).collect()
    }
}

#[derive(Deserialize, Serialize)]
struct CollectionFile {
    name: String,
    #[serde(default)]
    contract: String,
    trait_names: Vec<String>,
    tokens: Vec<TokenEntry>,
}

#[derive(Deserialize, Serialize)]
struct TokenEntry {
    id: String,
    #[serde(default)]
    traits: BTreeMap<String, serde_json::Value>,
}

fn value_to_category(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::Null => Some(NONE_VALUE.to_string()),
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        serde_json::Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

pub fn read_collection<R: Read>(reader: R) -> Result<Collection> {
    let file: CollectionFile = serde_json::from_reader(reader)
        .map_err(|e| Error::MalformedCollection(e.to_string()))?;
    let slot: HashMap<&str, usize> =
        file.trait_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    if slot.len() != file.trait_names.len() {
        return Err(Error::MalformedCollection("duplicate trait names".into()));
    }
    let mut rows = Vec::with_capacity(file.tokens.len());
    for entry in &file.tokens {
        let mut traits = vec![NONE_VALUE.to_string(); file.trait_names.len()];
        for (name, value) in &entry.traits {
            let &t = slot.get(name.as_str()).ok_or_else(|| {
                Error::MalformedCollection(format!(
                    "token `{}` has undeclared trait `{name}`",
                    entry.id
                ))
            })?;
            traits[t] = value_to_category(value).ok_or_else(|| {
                Error::MalformedCollection(format!(
                    "token `{}` trait `{name}` is not a scalar",
                    entry.id
                ))
            })?;
        }
        rows.push((entry.id.clone(), traits));
    }
    Collection::new(file.name, file.contract, file.trait_names, rows)
}

pub fn load_collection(path: impl AsRef<Path>) -> Result<Collection> {
    read_collection(BufReader::new(File::open(path)?))
}

pub fn write_collection<W: Write>(collection: &Collection, writer: W) -> Result<()> {
    let file = CollectionFile {
        name: collection.name.clone(),
        contract: collection.contract.clone(),
        trait_names: collection.trait_names.clone(),
        tokens: collection
            .tokens
            .iter()
            .map(|tok| TokenEntry {
                id: tok.external_id.clone(),
                traits: collection
                    .trait_names
                    .iter()
                    .cloned()
                    .zip(tok.traits.iter().map(|v| serde_json::Value::String(v.clone())))
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_writer_pretty(writer, &file)?;
    Ok(())
}

pub fn save_collection(collection: &Collection, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_collection(collection, &mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deal {
    /// Unix seconds.
    pub timestamp: i64,
    pub token_index: usize,
    /// Strictly positive, in the chain's native currency.
    pub price: f64,
}

/// Deals sorted non-decreasing by timestamp. Equal timestamps keep their
/// input order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TradeLog {
    deals: Vec<Deal>,
}

impl TradeLog {
    pub fn new(mut deals: Vec<Deal>) -> Self {
        deals.sort_by_key(|d| d.timestamp);
        Self { deals }
    }

    pub fn deals(&self) -> &[Deal] {
        &self.deals
    }

    pub fn len(&self) -> usize {
        self.deals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deals.is_empty()
    }

    /// Largest token index referenced plus one, or 0 for an empty log.
    pub fn index_bound(&self) -> usize {
        self.deals.iter().map(|d| d.token_index + 1).max().unwrap_or(0)
    }
}

/// Rows dropped while reading a trades file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DropSummary {
    pub non_positive_price: usize,
    pub unknown_token: usize,
}

impl DropSummary {
    pub fn total(&self) -> usize {
        self.non_positive_price + self.unknown_token
    }
}

#[derive(Deserialize)]
struct TradeRow {
    token_id: String,
    timestamp: i64,
    price: f64,
}

pub fn read_trades<R: Read>(reader: R, collection: &Collection) -> Result<(TradeLog, DropSummary)> {
    let ids = collection.index_of();
    let mut summary = DropSummary::default();
    let mut deals = Vec::new();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    for row in rdr.deserialize() {
        let row: TradeRow = row?;
        let Some(&token_index) = ids.get(row.token_id.as_str()) else {
            summary.unknown_token += 1;
            continue;
        };
        // NaN fails this test too
        if !(row.price > 0.0 && row.price.is_finite()) {
            summary.non_positive_price += 1;
            continue;
        }
        deals.push(Deal { timestamp: row.timestamp, token_index, price: row.price });
    }
    if summary.total() > 0 {
        log::warn!(
            "dropped {} trade rows ({} non-positive price, {} unknown token)",
            summary.total(),
            summary.non_positive_price,
            summary.unknown_token
        );
    }
    Ok((TradeLog::new(deals), summary))
}

pub fn load_trades(path: impl AsRef<Path>, collection: &Collection) -> Result<(TradeLog, DropSummary)> {
    read_trades(BufReader::new(File::open(path)?), collection)
}

pub fn write_trades<W: Write>(log: &TradeLog, collection: &Collection, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["token_id", "timestamp", "price"])?;
    for d in log.deals() {
        w.write_record([
            collection.tokens[d.token_index].external_id.as_str(),
            &d.timestamp.to_string(),
            &d.price.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_trades(log: &TradeLog, collection: &Collection, path: impl AsRef<Path>) -> Result<()> {
    write_trades(log, collection, BufWriter::new(File::create(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitTradeLog {
    pub train: TradeLog,
    pub test: TradeLog,
    pub split_fraction: f64,
}

/// Chronological split: the first `ceil(fraction * len)` deals train.
pub fn split_trades(log: &TradeLog, fraction: f64) -> Result<SplitTradeLog> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::BadFraction(fraction));
    }
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    let cut = split_index(log.len(), fraction);
    let (train, test) = log.deals.split_at(cut);
    Ok(SplitTradeLog {
        train: TradeLog { deals: train.to_vec() },
        test: TradeLog { deals: test.to_vec() },
        split_fraction: fraction,
    })
}

fn split_index(len: usize, fraction: f64) -> usize {
    // 0.7 * 10 must give 7, not 8
    let raw = fraction * len as f64;
    let cut = (raw - 1e-9 * raw.max(1.0)).ceil() as usize;
    cut.clamp(1, len)
}
