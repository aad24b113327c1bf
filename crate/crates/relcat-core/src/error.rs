//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing table file for `{table}`: {path}")]
    MissingTable { table: String, path: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error in table `{table}`: {source}")]
    Csv { table: String, source: csv::Error },

    #[error("table `{table}` is missing column `{column}`")]
    MissingColumn { table: String, column: String },

    #[error("duplicate primary key `{pk}` in table `{table}`")]
    DuplicatePk { table: String, pk: String },

    #[error("dangling foreign key in table `{table}`, row `{pk}`, column `{column}`: no `{target}` row with pk `{value}`")]
    DanglingForeignKey {
        table: String,
        pk: String,
        column: String,
        target: String,
        value: String,
    },

    #[error("invalid row in table `{table}`, pk `{pk}`: {reason}")]
    InvalidRow {
        table: String,
        pk: String,
        reason: String,
    },

    #[error("feature matrix for node type `{node_type}` has {feature_rows} rows but the table has {table_rows}")]
    FeatureMisalignment {
        node_type: String,
        feature_rows: usize,
        table_rows: usize,
    },

    #[error("cannot mask pair (transaction {txn}, category {cat}): no such edge in either direction")]
    MaskMissingEdge { txn: usize, cat: usize },

    #[error("no positive transaction-category edges to sample from")]
    NoPositiveEdges,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("bad config value for `{key}`: {reason}")]
    BadConfigValue { key: String, reason: String },

    #[error("zero-norm embedding at row {row}: cosine similarity undefined")]
    ZeroNormEmbedding { row: usize },

    #[error("graph relation {relation} has no parameters in the model")]
    MissingRelationParams { relation: String },

    #[error("empty positive/negative pairing for the ranking loss")]
    EmptyPairing,

    #[error("negative sampling needs at least two categories with nonzero weight, got {0}")]
    TooFewCategories(usize),

    #[error("training aborted: non-finite loss at epoch {epoch}, step {step} (lr {lr})")]
    NonFiniteLoss { epoch: usize, step: usize, lr: f64 },

    #[error("weight file magic mismatch: expected `RELCAT01`, found {found:?}")]
    WeightMagicMismatch { found: Vec<u8> },

    #[error("weight file truncated while reading {context}")]
    WeightTruncated { context: String },

    #[error("tensor `{name}` has shape {found:?} but the model expects {expected:?}")]
    WeightShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("weight file is missing tensor `{0}`")]
    WeightMissingTensor(String),

    #[error("weight file contains unexpected tensor `{0}`")]
    WeightUnexpectedTensor(String),

    #[error("prediction/truth mismatch: {0}")]
    EvalMismatch(String),

    #[error("empty response set")]
    EmptyResponses,

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;
