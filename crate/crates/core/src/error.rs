// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error types for the core crate.

use thiserror::Error;

/// Errors raised while loading or validating an attribution graph.
#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("cycle detected through node `{0}`")]
    Cycle(String),
    #[error("edge references unknown node `{0}`")]
    DanglingEdge(String),
}

/// Errors raised by feature selection.
#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("graph contains no feature nodes")]
    NoFeatures,
    #[error("feature `{0}` has a non-finite influence")]
    NonFiniteInfluence(String),
    #[error("tau must lie in [0, 1], got {0}")]
    TauOutOfRange(f64),
}

/// Errors raised by token labeling and target mapping.
#[derive(Debug, Error, PartialEq)]
pub enum LexiconError {
    #[error("functional vocabulary is empty")]
    EmptyVocabulary,
    #[error("token list is empty")]
    EmptyTokens,
    #[error("position {position} out of range for {len} tokens")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("window must be at least 1")]
    ZeroWindow,
    #[error("directionality key `{0}` is neither a vocabulary entry nor punctuation")]
    UnknownDirectionalityKey(String),
    #[error("vocabulary config: {0}")]
    Config(String),
}

/// Errors raised while computing activation records and signatures.
#[derive(Debug, Error, PartialEq)]
pub enum SignatureError {
    #[error("activation length {activations} does not match token length {tokens}")]
    LengthMismatch { activations: usize, tokens: usize },
    #[error("activation vector is empty")]
    EmptyActivations,
    #[error("non-finite or negative activation at index {0}")]
    NonFinite(usize),
    #[error("no records to aggregate")]
    EmptyRecordSet,
    #[error("records mix features `{0}` and `{1}`")]
    MixedFeature(String, String),
}

/// Errors raised by graph scoring.
#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no embedding-to-logit influence exists")]
    ZeroDenominator,
    #[error("pinned node `{0}` is not in the graph")]
    UnknownPinned(String),
}

/// Errors raised by grouping evaluation and clustering baselines.
#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("silhouette needs at least 2 groups and 2 points")]
    SingletonGrouping,
    #[error("group {0} is empty")]
    EmptyGroup(usize),
    #[error("missing signature or records for `{0}`")]
    MissingMember(String),
    #[error("n_clusters = {n_clusters} exceeds feature count {n_features}")]
    TooManyClusters { n_clusters: usize, n_features: usize },
    #[error("n_clusters must be at least 1")]
    ZeroClusters,
    #[error("ward linkage requires a Euclidean space")]
    WardNeedsEuclidean,
    #[error("vector length mismatch for `{0}`")]
    DimensionMismatch(String),
}

/// Errors raised by entity-swap transfer analysis.
#[derive(Debug, Error, PartialEq)]
pub enum TransferError {
    #[error("graphs use different models: `{0}` vs `{1}`")]
    ModelMismatch(String, String),
    #[error("peak token `{0}` was swapped but is missing from the entity map")]
    MissingEntityMap(String),
    #[error("no feature pairs to report")]
    EmptyPairSet,
    #[error("feature `{0}` has {1} probes in one circuit and {2} in the other")]
    ProbeCountMismatch(String, usize, usize),
}

/// Errors raised by file import/export helpers.
#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Yaml(#[from] serde_yaml::Error),
    #[error("{0}")]
    Invalid(String),
}
