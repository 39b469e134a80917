use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("malformed collection: {0}")]
    MalformedCollection(String),

    #[error("duplicate token id `{0}`")]
    DuplicateToken(String),

    #[error("a collection needs at least 2 tokens, found {0}")]
    TooFewTokens(usize),

    #[error("trade log is empty")]
    EmptyLog,

    #[error("split fraction {0} is outside (0, 1)")]
    BadFraction(f64),

    #[error("only {0} token(s) carry positive weight, need at least 2")]
    TooFewTraded(usize),

    #[error("row {0} of the weight matrix sums to zero")]
    ZeroRowSum(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("weight matrix has no positive entries")]
    NoWeights,

    #[error("rarity vector is constant on every weighted pair")]
    DegenerateMeter,

    #[error("all building blocks are zero")]
    ZeroBlocks,

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("matrix file: {0}")]
    MatrixFormat(String),

    #[error("unknown meter `{0}`")]
    UnknownMeter(String),

    #[error("no grid cell produced a finite validation score")]
    GridExhausted,

    #[error("profile table is empty")]
    EmptyTable,

    #[error("profile table has a missing entry for meter `{meter}` on collection `{collection}`")]
    MissingEntry { meter: String, collection: String },
}
